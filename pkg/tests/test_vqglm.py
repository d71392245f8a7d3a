import numpy as np
import pytest

from cfscm import synthpop, vqglm


# -- autoencoder -----------------------------------------------------------------------

def svd_mse(x, k):
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    return float(np.mean((xc - (u[:, :k] * s[:k]) @ vt[:k]) ** 2))


def test_autoencoder_matches_svd_oracle(rng):
    x = rng.normal(size=(200, 16)) @ np.diag(np.linspace(3, 0.2, 16))
    ae = vqglm.fit_linear_autoencoder(x, 4, seed=1)
    assert ae.mse(x) <= svd_mse(x, 4) * 1.01
    assert all(b <= a + 1e-12 for a, b in zip(ae.trace, ae.trace[1:]))


def test_autoencoder_exact_cases(rng):
    low = rng.normal(size=(50, 3)) @ rng.normal(size=(3, 10)) + 2.0
    assert vqglm.fit_linear_autoencoder(low, 3).mse(low) <= 1e-9
    full = rng.normal(size=(30, 5))
    assert vqglm.fit_linear_autoencoder(full, 5).mse(full) <= 1e-9


def test_autoencoder_errors(rng):
    with pytest.raises(ValueError):
        vqglm.fit_linear_autoencoder(rng.normal(size=(4, 8)), 4)
    flat = np.outer(rng.normal(size=40), np.ones(6))
    with pytest.raises(vqglm.RankDeficient):
        vqglm.fit_linear_autoencoder(flat, 3)


# -- quantization --------------------------------------------------------------------------

def test_quantize_examples():
    cb = vqglm.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert vqglm.quantize(cb, np.array([0.2, 0.1])) == 0
    assert vqglm.quantize(cb, np.array([0.5, 0.5])) == 0
    assert np.array_equal(vqglm.quantize_residual(cb, np.array([[1.0, 1.0]])), [[1.0, 1.0]])
    cb3 = vqglm.Codebook(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]))
    assert np.allclose(vqglm.quantize_residual(cb3, np.array([[0.7, 0.7]])), [[0.5, 0.5]])


def test_quantize_matches_exhaustive_scan(rng):
    cb = vqglm.Codebook(np.vstack([np.zeros(3), rng.normal(size=(9, 3))]))
    z = rng.normal(size=(1000, 3))
    scan = np.array([min(range(len(cb)), key=lambda k: (np.sum((v - cb.entries[k]) ** 2), k)) for v in z])
    assert np.array_equal(vqglm.quantize(cb, z), scan)


def test_residual_never_worse(rng):
    cb = vqglm.Codebook(np.vstack([np.zeros(2), rng.normal(size=(6, 2))]))
    z = rng.normal(size=(1000, 2)) * 2
    plain = np.linalg.norm(z - cb.entries[vqglm.quantize(cb, z)], axis=1)
    resid = np.linalg.norm(z - vqglm.quantize_residual(cb, z), axis=1)
    assert np.all(resid <= plain + 1e-12)


def test_codebook_invariants():
    with pytest.raises(ValueError):
        vqglm.Codebook(np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        vqglm.Codebook(np.array([[0.0, 0.0], [np.nan, 0.0]]))
    cb = vqglm.Codebook(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        vqglm.quantize_code(cb, np.ones((2, 6)))


def test_fit_codebook(rng):
    a = rng.normal(size=(50, 2)) * 0.01 + [5.0, 5.0]
    b = rng.normal(size=(50, 2)) * 0.01 + [-5.0, 3.0]
    v = np.vstack([a, b])
    cb, trace = vqglm.fit_codebook(v, 3, iterations=20, seed=0)
    assert np.array_equal(cb.entries[0], [0.0, 0.0])
    got = sorted(map(tuple, np.round(cb.entries[1:], 1)))
    assert got == sorted([tuple(np.round(a.mean(0), 1)), tuple(np.round(b.mean(0), 1))])
    assert all(y <= x + 1e-9 for x, y in zip(trace, trace[1:]))
    cb2, _ = vqglm.fit_codebook(v, 3, iterations=20, seed=0)
    assert np.array_equal(cb.entries, cb2.entries)
    one, _ = vqglm.fit_codebook(v, 1)
    assert len(one) == 1 and np.array_equal(vqglm.quantize_residual(one, v), np.zeros_like(v))


# -- GLM -----------------------------------------------------------------------------------

P2 = np.array([[1.0, 0.0], [1.0, 1.0]])


def test_glm_hand_examples():
    fit = vqglm.glm_fit(np.array([[2.0], [4.0]]), P2)
    assert np.allclose(fit.b, [[2.0], [2.0]], atol=1e-12)
    # the square system is interpolated exactly, so the residual vanishes
    fit5 = vqglm.glm_fit(np.array([[2.0], [5.0]]), P2)
    assert np.allclose(fit5.b, [[2.0], [3.0]], atol=1e-12)
    assert np.allclose(vqglm.glm_abduct(fit5, np.array([[2.0], [5.0]]), P2), 0.0, atol=1e-12)
    assert np.allclose(vqglm.glm_predict(fit, np.zeros((1, 1)), np.array([[1.0, 2.0]])), [[6.0]])


def test_glm_orthogonality_and_roundtrip(rng):
    p = np.column_stack([np.ones(100), rng.normal(size=(100, 3))])
    z = rng.normal(size=(100, 4))
    fit = vqglm.glm_fit(z, p)
    u = vqglm.glm_abduct(fit, z, p)
    assert np.max(np.abs(p.T @ u)) <= 1e-6 * np.max(np.abs(p.T @ z))
    assert np.allclose(vqglm.glm_predict(fit, u, p), z, atol=1e-12)
    assert np.allclose(vqglm.glm_abduct(fit, u + p @ fit.b, p), u, atol=1e-12)
    alpha = 2.5
    lhs = vqglm.glm_predict(fit, alpha * u, p)
    assert np.allclose(lhs, alpha * vqglm.glm_predict(fit, u, p) - (alpha - 1) * p @ fit.b)
    perm = rng.permutation(100)
    assert np.allclose(vqglm.glm_fit(z[perm], p[perm]).b, fit.b, atol=1e-12)
    b0 = rng.normal(size=(4, 4))
    exact = vqglm.glm_fit(p @ b0, p)
    assert np.allclose(exact.b, b0, atol=1e-10)


def test_glm_duplicate_column_policy(rng):
    x = rng.normal(size=30)
    p = np.column_stack([np.ones(30), x, x])
    z = rng.normal(size=(30, 2))
    with pytest.raises(vqglm.SingularMatrix):
        vqglm.glm_fit(z, p, delta=0.0)
    assert np.all(np.isfinite(vqglm.glm_fit(z, p, delta=1e-8).b))
    with pytest.raises(ValueError):
        vqglm.glm_fit(z[:2], p[:2])


def test_glm_momentum(rng):
    p = np.column_stack([np.ones(20), rng.normal(size=20)])
    z1, z2 = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    b1, b2 = vqglm.glm_fit(z1, p).b, vqglm.glm_fit(z2, p).b
    start = vqglm.glm_fit(z1, p)
    assert np.allclose(vqglm.glm_momentum_update(start, z2, p, 0.0).b, b2)
    two = vqglm.glm_momentum_update(vqglm.glm_momentum_update(start, z1, p, 0.5), z2, p, 0.5)
    assert np.allclose(two.b, 0.5 * (0.5 * b1 + 0.5 * b1) + 0.5 * b2)
    cur = vqglm.GlmParams(np.zeros_like(b1), momentum=np.zeros_like(b1))
    gap = np.abs(b1).max()
    for _ in range(5):
        cur = vqglm.glm_momentum_update(cur, z1, p, 0.7)
        new_gap = np.abs(cur.b - b1).max()
        assert new_gap == pytest.approx(0.7 * gap)
        gap = new_gap
    with pytest.raises(ValueError):
        vqglm.glm_momentum_update(cur, z1, p, 1.0)


def test_design_matrix_roundtrip():
    parents = {"y": np.array([0, 1, 2, 1]), "t": np.array([1.0, 2.0, 3.0, 4.0])}
    d = vqglm.DesignMatrix.fit(parents, {"y": 3})
    m = d(parents)
    assert m.shape == (4, 4) and np.all(m[:, 0] == 1.0)
    assert np.allclose(m[:, 1:].mean(axis=0), 0.0)
    again = vqglm.DesignMatrix.from_json(d.to_json())
    assert np.array_equal(again(parents), m)
    assert '"columns"' in vqglm.design_sidecar(d)


# -- pipeline ----------------------------------------------------------------------------

def test_latent_counterfactual_composition():
    ds = synthpop.generate(1, 300)
    vals = ds.attributes
    model = vqglm.fit_latent_scm(ds.images, vals, {"y": 3}, k=8, n_codes=16, codebook_iterations=10)
    x_cf = vqglm.latent_counterfactual(model, ds.images, vals, vals)
    assert np.allclose(x_cf, model.reconstruct(ds.images), atol=1e-9)
    moved = dict(vals, t=vals["t"] + 1.0)
    a = vqglm.latent_counterfactual(model, ds.images, vals, moved)
    assert np.array_equal(a, vqglm.latent_counterfactual(model, ds.images, vals, moved))
    assert not np.allclose(a, x_cf)
