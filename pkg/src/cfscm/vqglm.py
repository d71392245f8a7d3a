"""Latent-space counterfactuals: linear autoencoder, residual VQ, closed-form GLM.

Pipeline for one image x with parents pa and counterfactual parents pa_cf:

    z    = Q(E(x))            residual quantization of each half of the code
    U_Z  = z - P B            abduction (least-squares residual)
    z_cf = U_Z + P_cf B       prediction
    x_cf = D(z_cf)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from cfscm import rng


class RankDeficient(ValueError):
    pass


class SingularMatrix(np.linalg.LinAlgError):
    pass


# -- linear autoencoder ----------------------------------------------------------------

@dataclass(frozen=True)
class LinearAutoencoder:
    mean: np.ndarray       # (D,)
    encoder: np.ndarray    # (D, K)
    decoder: np.ndarray    # (K, D)
    trace: tuple = ()

    @property
    def k(self) -> int:
        return self.encoder.shape[1]

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x.reshape(x.shape[0], -1) - self.mean) @ self.encoder

    def decode(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.decoder + self.mean

    def mse(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(np.shape(x)[0], -1)
        return float(np.mean((self.decode(self.encode(x)) - x) ** 2))


def fit_linear_autoencoder(x, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8) -> LinearAutoencoder:
    """Alternating least squares on the centred data: X ~ Z W with Z = X E.

    Each sweep solves for W given Z, then for the encoder E that reproduces
    the least-squares codes for that W.  The fixed point spans the top-k
    principal subspace.
    """
    x = np.asarray(x, dtype=float)
    x = x.reshape(x.shape[0], -1)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more rows than latent dimensions (N={n}, K={k})")
    if not 1 <= k <= d:
        raise ValueError(f"latent dimension {k} outside [1, {d}]")
    mean = x.mean(axis=0)
    xc = x - mean
    if np.linalg.matrix_rank(x) < k:
        raise RankDeficient(f"data rank {np.linalg.matrix_rank(x)} is below K={k}")
    w = rng.normals(seed, 0, np.arange(k), d)
    trace = []
    prev = np.inf
    enc = None
    for _ in range(max_iter):
        # codes given decoder, then decoder given codes
        enc = np.linalg.pinv(w)
        z = xc @ enc
        w = np.linalg.lstsq(z, xc, rcond=None)[0]
        loss = float(np.mean((z @ w - xc) ** 2))
        trace.append(loss)
        if prev - loss < tol:
            break
        prev = loss
    enc = np.linalg.pinv(w)
    return LinearAutoencoder(mean, enc, w, tuple(trace))


# -- codebook ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray    # (N_C, d); row 0 is the frozen zero vector

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError("codebook needs a 2-d array of entries")
        if np.any(e[0] != 0.0):
            raise ValueError("codebook entry 0 must be the zero vector")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self) -> int:
        return self.entries.shape[0]


def _sq_dist(codebook: Codebook, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != codebook.dim:
        raise ValueError(f"vector dimension {z.shape[-1]} != codebook dimension {codebook.dim}")
    diff = z[..., None, :] - codebook.entries
    return np.einsum("...kd,...kd->...k", diff, diff)


def quantize(codebook: Codebook, z):
    """Index of the nearest entry (argmin takes the lowest index on ties)."""
    return np.argmin(_sq_dist(codebook, z), axis=-1)


def quantize_residual(codebook: Codebook, z) -> np.ndarray:
    """e(I(z)) + e(I(z - e(I(z))))."""
    z = np.asarray(z, dtype=float)
    first = codebook.entries[quantize(codebook, z)]
    return first + codebook.entries[quantize(codebook, z - first)]


def quantize_code(codebook: Codebook, z) -> np.ndarray:
    """Residual-quantize a code split into two halves, each against the same codebook."""
    z = np.asarray(z, dtype=float)
    h = z.shape[-1] // 2
    if 2 * h != z.shape[-1] or h != codebook.dim:
        raise ValueError("code length must be twice the codebook dimension")
    return np.concatenate([quantize_residual(codebook, z[..., :h]), quantize_residual(codebook, z[..., h:])], axis=-1)


def split_halves(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    h = z.shape[-1] // 2
    return np.concatenate([z[:, :h], z[:, h:]], axis=0)


def fit_codebook(latents, n_codes: int, iterations: int = 50, seed: int = 0) -> tuple[Codebook, list[float]]:
    """k-means with entry 0 pinned at the origin.  Returns the codebook and the error trace.

    Empty clusters are re-seeded with the point currently farthest from its entry.
    """
    v = np.asarray(latents, dtype=float)
    if n_codes < 1:
        raise ValueError("need at least one code")
    if v.shape[0] < n_codes - 1:
        raise ValueError(f"need at least {n_codes - 1} latents to fit {n_codes} codes")
    entries = np.zeros((n_codes, v.shape[1]))
    if n_codes > 1:
        pick = rng.permutation(seed, 0, v.shape[0])[: n_codes - 1]
        entries[1:] = v[pick]
    trace = []
    for _ in range(iterations):
        d = _sq_dist(Codebook(entries), v)
        assign = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(v)), assign].sum()))
        new = entries.copy()
        nearest = d[np.arange(len(v)), assign]
        for k in range(1, n_codes):
            members = assign == k
            if members.any():
                new[k] = v[members].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                new[k] = v[far]
                nearest[far] = 0.0
        if np.array_equal(new, entries):
            break
        entries = new
    d = _sq_dist(Codebook(entries), v)
    trace.append(float(d.min(axis=1).sum()))
    return Codebook(entries), trace


_MAX_COND = 1e12


# -- GLM -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignMatrix:
    """Intercept plus standardized parent columns; stats are kept for reuse on new rows."""

    columns: tuple          # (name, level) pairs; level is None for continuous columns
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, parents: dict, categorical: dict | None = None) -> "DesignMatrix":
        """``categorical`` maps name -> number of levels (one-hot with the first level dropped)."""
        categorical = categorical or {}
        cols = []
        for name in parents:
            if name in categorical:
                cols += [(name, lvl) for lvl in range(1, categorical[name])]
            else:
                cols.append((name, None))
        raw = _raw_columns(cols, parents)
        mean = raw.mean(axis=0) if raw.size else np.zeros(0)
        std = raw.std(axis=0) if raw.size else np.zeros(0)
        return cls(tuple(cols), mean, np.where(std > 0, std, 1.0))

    def __call__(self, parents: dict) -> np.ndarray:
        raw = _raw_columns(self.columns, parents)
        n = raw.shape[0]
        return np.concatenate([np.ones((n, 1)), (raw - self.mean) / self.std], axis=1)

    def to_json(self) -> dict:
        return {"columns": [[n, lvl] for n, lvl in self.columns],
                "mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, doc) -> "DesignMatrix":
        cols = tuple((n, lvl) for n, lvl in doc["columns"])
        return cls(cols, np.array(doc["mean"], dtype=float), np.array(doc["std"], dtype=float))


def _raw_columns(cols, parents) -> np.ndarray:
    n = len(np.asarray(next(iter(parents.values())))) if parents else 0
    out = np.empty((n, len(cols)))
    for j, (name, lvl) in enumerate(cols):
        v = np.asarray(parents[name], dtype=float)
        out[:, j] = v if lvl is None else (v == lvl).astype(float)
    return out


@dataclass(frozen=True)
class GlmParams:
    b: np.ndarray                 # (m + 1, K)
    delta: float = 1e-8
    momentum: np.ndarray | None = field(default=None, compare=False)
    gamma: float = 0.0


def glm_fit(z, p, delta: float = 1e-8) -> GlmParams:
    """Least-squares B from the normal equations P'P B = P'Z.

    The ridge jitter ``delta`` is added to P'P only when the plain system is
    numerically singular (condition number above 1e12), so identifiable
    problems get the exact least-squares solution.  ``delta=0`` disables it.
    """
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if p.shape[0] != z.shape[0]:
        raise ValueError("P and Z disagree on the number of rows")
    if p.shape[0] < p.shape[1]:
        raise ValueError(f"need N >= m + 1 rows (N={p.shape[0]}, columns={p.shape[1]})")
    if delta < 0:
        raise ValueError("jitter must be non-negative")
    gram = p.T @ p
    if np.linalg.cond(gram) > _MAX_COND:
        gram = gram + delta * np.eye(p.shape[1])
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise SingularMatrix(f"P'P + {delta} I is singular")
    try:
        b = np.linalg.solve(gram, p.T @ z)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.all(np.isfinite(b)):
        raise SingularMatrix("solution is non-finite")
    return GlmParams(b, delta, b.copy())


def glm_abduct(params: GlmParams, z, p) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return z - np.asarray(p, dtype=float) @ params.b


def glm_predict(params: GlmParams, u, p_cf) -> np.ndarray:
    return np.asarray(u, dtype=float) + np.asarray(p_cf, dtype=float) @ params.b


def glm_momentum_update(params: GlmParams, z, p, gamma: float) -> GlmParams:
    """B_bar <- gamma B_bar + (1 - gamma) B_batch; the running value becomes the active B."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("momentum must satisfy 0 <= gamma < 1")
    batch = glm_fit(z, p, params.delta).b
    prev = params.momentum if params.momentum is not None else params.b
    b = gamma * prev + (1.0 - gamma) * batch
    return GlmParams(b, params.delta, b, gamma)


# -- full pipeline ----------------------------------------------------------------------

@dataclass(frozen=True)
class LatentScm:
    autoencoder: LinearAutoencoder
    codebook: Codebook
    design: DesignMatrix
    glm: GlmParams

    def latents(self, x) -> np.ndarray:
        return quantize_code(self.codebook, self.autoencoder.encode(x))

    def reconstruct(self, x) -> np.ndarray:
        return self.autoencoder.decode(self.latents(x))


def fit_latent_scm(x, parents: dict, categorical: dict | None = None, k: int = 8, n_codes: int = 64,
                   codebook_iterations: int = 50, delta: float = 1e-8, seed: int = 0) -> LatentScm:
    ae = fit_linear_autoencoder(x, k, seed)
    code = ae.encode(x)
    cb, _ = fit_codebook(split_halves(code), n_codes, codebook_iterations, seed)
    design = DesignMatrix.fit(parents, categorical)
    z = quantize_code(cb, code)
    return LatentScm(ae, cb, design, glm_fit(z, design(parents), delta))


def latent_counterfactual(model: LatentScm, x, parents: dict, parents_cf: dict) -> np.ndarray:
    """x_cf = D(U_Z + P_cf B) with U_Z = Q(E(x)) - P B."""
    z = model.latents(x)
    u = glm_abduct(model.glm, z, model.design(parents))
    return model.autoencoder.decode(glm_predict(model.glm, u, model.design(parents_cf)))


def design_sidecar(design: DesignMatrix) -> str:
    return json.dumps(design.to_json(), indent=2, sort_keys=True) + "\n"
