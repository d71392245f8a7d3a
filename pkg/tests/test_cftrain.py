import math

import numpy as np
import pytest

from cfscm import cftrain, ladder, synthpop
from cfscm.imagescm import ImageScm, attribute_graph
from cfscm.nets import DivergenceError
from conftest import fd_check

KINDS = {"y": ("categorical", 3), "t": ("continuous", 0), "i": ("continuous", 0)}


class TablePredictor:
    """q(pa | x) given as a conditional probability table, rows indexed by x."""

    kind = "categorical"

    def __init__(self, table):
        self.table = np.asarray(table, float)

    def log_prob(self, x, pa):
        return np.log(self.table[np.asarray(x, int), np.asarray(pa, int)])


def enumerate_joint(joint):
    """All (pa, x) cells of a joint table with their probabilities."""
    n_pa, n_x = joint.shape
    pa, x = np.meshgrid(np.arange(n_pa), np.arange(n_x), indexing="ij")
    return pa.ravel(), x.ravel(), joint.ravel()


def brute_force_mi(joint):
    p_pa = joint.sum(axis=1, keepdims=True)
    p_x = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (p_pa @ p_x)[mask])).sum())


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def test_mi_bound_perfect_copy_is_ln2():
    joint = np.diag([0.5, 0.5])
    pa, x, w = enumerate_joint(joint)
    q = TablePredictor(np.eye(2) * (1 - 1e-15) + 1e-15 / 2)
    bound = cftrain.mi_lower_bound(pa, x, q, entropy(joint.sum(axis=1)), weights=w)
    assert abs(bound - math.log(2)) < 1e-9
    assert abs(brute_force_mi(joint) - math.log(2)) < 1e-12


def test_mi_bound_marginal_predictor_is_zero():
    joint = np.array([[0.1, 0.2], [0.3, 0.4]])
    marg = joint.sum(axis=1)
    pa, x, w = enumerate_joint(joint)
    q = TablePredictor(np.tile(marg, (2, 1)))
    assert abs(cftrain.mi_lower_bound(pa, x, q, entropy(marg), weights=w)) < 1e-12


def test_mi_bound_never_exceeds_true_mi():
    gen = np.random.default_rng(7)
    for _ in range(50):
        n_pa, n_x = gen.integers(2, 5, size=2)
        joint = gen.dirichlet(np.ones(n_pa * n_x)).reshape(n_pa, n_x)
        pa, x, w = enumerate_joint(joint)
        q = TablePredictor(gen.dirichlet(np.ones(n_pa), size=n_x))
        bound = cftrain.mi_lower_bound(pa, x, q, entropy(joint.sum(axis=1)), weights=w)
        assert bound <= brute_force_mi(joint) + 1e-9


def test_mi_bound_needs_samples():
    with pytest.raises(ValueError):
        cftrain.mi_lower_bound(np.zeros(0), np.zeros(0), TablePredictor(np.eye(2)), 0.0)


def test_entropy_of():
    assert cftrain.entropy_of([0, 1, 0, 1], "categorical") == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        cftrain.entropy_of([0.1, 0.2], "continuous")


def test_lagrangian_sign_dynamics():
    s = cftrain.LagrangianState(0.5, c=10.0, damping=0.1)
    assert s.ascend(12.0, 0.01).lam > s.lam
    assert s.ascend(8.0, 0.01).lam < s.lam
    assert cftrain.LagrangianState(0.0, 10.0, 0.1).ascend(5.0, 0.01).lam == 0.0
    assert s.multiplier(12.0) == pytest.approx(0.7)
    assert cftrain.LagrangianState(0.0, 10.0, 0.1).multiplier(0.0) == 0.0


def test_sample_marginal_draws_observed_values():
    marg = np.array([3.0, 5.0, 7.0])
    d = cftrain.sample_marginal(marg, seed=1, stream=0, index=np.arange(500))
    assert set(np.unique(d)) <= set(marg)
    assert np.array_equal(d, cftrain.sample_marginal(marg, 1, 0, np.arange(500)))
    assert len(np.unique(d)) == 3


@pytest.fixture(scope="module")
def world():
    ds = synthpop.generate(3, 24)
    vals = ds.attributes
    spec = ladder.LadderSpec(ladder.MEDIATOR, x_dim=256, pa_dim=5, z_dims=(2, 3), h_dim=4, bu_dim=4, hidden=6)
    img = ImageScm(attribute_graph(), ladder.LadderModel.create(spec, 0), pi=0.5)
    x = ds.images.reshape(len(ds), -1)
    preds, traces = cftrain.fit_predictors(x, vals, KINDS, cftrain.PredictorConfig(hidden=8, epochs=3, batch_size=8))
    return img, x, vals, preds, traces


def test_fit_predictors(world):
    _, x, vals, preds, traces = world
    assert [p.name for p in preds] == ["y", "t", "i"]
    for name, tr in traces.items():
        assert len(tr) == 4 and tr[-1] < tr[0]
    t = preds[1]
    assert t.target_mean == pytest.approx(vals["t"].mean())
    assert preds[0].predict(x).shape == (len(x),)
    with pytest.raises(ValueError):
        cftrain.fit_predictors(x[:0], vals, KINDS)
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(DivergenceError):
        cftrain.fit_predictors(bad, vals, KINDS)


def test_constant_parent_predictors():
    x = np.random.default_rng(0).normal(size=(40, 4))
    cols = {"a": np.full(40, 2), "b": np.full(40, 1.5)}
    preds, _ = cftrain.fit_predictors(x, cols, {"a": ("categorical", 3), "b": ("continuous", 0)},
                                      cftrain.PredictorConfig(hidden=4, epochs=40, batch_size=8, lr=1e-2))
    assert np.mean(preds[0].predict(x) == 2) == 1.0
    assert abs(preds[1].predict(x).mean() - 1.5) < 0.05


def test_predictor_gradients(world):
    _, x, vals, preds, _ = world
    for p in preds:
        err = fd_check(lambda q: p.log_prob_var(q, x[:5], vals[p.name][:5]).mean(), p.params, list(p.params),
                       n_coords=40)
        assert err < 1e-5


def test_counterfactual_loss_basics(world):
    img, x, vals, preds, _ = world
    marg = {k: np.asarray(v) for k, v in vals.items()}
    a = cftrain.counterfactual_loss(img, x, vals, preds, marg, seed=5)
    b = cftrain.counterfactual_loss(img, x, vals, preds, marg, seed=5)
    assert a == b and np.isfinite(a)
    assert cftrain.counterfactual_loss(img, x, vals, [], marg, seed=5) == 0.0
    assert cftrain.counterfactual_loss(img, x, vals, preds, marg, seed=6) != a


def test_counterfactual_loss_gradient(world):
    img, x, vals, preds, _ = world
    marg = {k: np.asarray(v) for k, v in vals.items()}
    sub = {k: v[:4] for k, v in vals.items()}
    m = img.model
    err = fd_check(lambda p: cftrain.counterfactual_loss_var(img, p, x[:4], sub, preds, marg, seed=2),
                   m.params, list(m.params), n_coords=60)
    assert err < 1e-4


def test_finetune_keeps_frozen_parts_and_is_deterministic(world):
    img, x, vals, preds, _ = world
    before_pred = [{k: v.copy() for k, v in p.params.items()} for p in preds]
    before_attr = {n: {k: v.copy() for k, v in img.attributes.mechanisms[n].params.items()}
                   for n in img.attributes.names}
    c = ladder.mean_free_energy(img.model, x, img.features(vals), ladder.eval_seed(0))
    cfg = cftrain.LagrangeConfig(epochs=2, batch_size=12, lr=1e-3)
    r1 = cftrain.finetune_constrained(img, preds, x, vals, c, cfg)
    r2 = cftrain.finetune_constrained(img, preds, x, vals, c, cfg)
    assert r1.trace == r2.trace and len(r1.trace) == 3
    assert r1.trace[0][2] == pytest.approx(c)
    for p, old in zip(preds, before_pred):
        assert all(np.array_equal(p.params[k], old[k]) for k in old)
    for n, old in before_attr.items():
        assert all(np.array_equal(img.attributes.mechanisms[n].params[k], old[k]) for k in old)
    for f, lam0, lam1 in r1.steps:
        if f > c:
            assert lam1 > lam0
        elif lam0 > 0:
            assert lam1 < lam0
    assert "epoch,L_CT,F_FE,lambda" in cftrain.trace_csv(r1.trace)


def test_finetune_rejects_empty(world):
    img, x, vals, preds, _ = world
    with pytest.raises(ValueError):
        cftrain.finetune_constrained(img, preds, x[:0], {k: v[:0] for k, v in vals.items()}, 0.0)
