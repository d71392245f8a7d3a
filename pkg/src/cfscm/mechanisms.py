"""Invertible mechanisms for scalar attribute variables.

Two families are provided:

* :class:`AffineFlowMechanism` -- ``x = T^-1(loc(pa) + scale(pa) * u)`` with
  standard-normal ``u`` and a fixed output bijection ``T`` (identity, log, or a
  bounded logit).  Exactly invertible.
* :class:`CategoricalMechanism` -- Gumbel-max sampling, ``x = argmax(logits(pa) + g)``.
  Abduction draws Gumbels from the posterior given the observed class.

Parents arrive as an already-encoded float feature matrix of shape
``(n, n_features)``; see :func:`cfscm.scm.encode_parents`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from cfscm import autodiff as ad
from cfscm import rng
from cfscm.nets import Adam, DivergenceError, ParamFn, clamp_logscale, value_and_grad

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteError(ValueError):
    pass


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    tol: float = 1e-6


@dataclass
class FitResult:
    mechanism: object
    nll: float
    trace: list[float]


# -- output bijections -------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    """Fixed bijection between the attribute's range and the real line."""

    kind: str = "identity"  # identity | log | logit
    lo: float = 0.0
    hi: float = 1.0

    def to_real(self, x):
        if self.kind == "identity":
            return np.asarray(x, dtype=float)
        if self.kind == "log":
            return np.log(x)
        p = (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo)
        return np.log(p) - np.log1p(-p)

    def from_real(self, y):
        if self.kind == "identity":
            return np.asarray(y, dtype=float)
        if self.kind == "log":
            return np.exp(y)
        return self.lo + (self.hi - self.lo) * (0.5 * (1.0 + np.tanh(0.5 * np.asarray(y))))

    def log_abs_jacobian(self, x):
        """log |dT/dx|, which enters the data NLL but not its parameter gradient."""
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.zeros_like(x)
        if self.kind == "log":
            return -np.log(x)
        w = self.hi - self.lo
        return np.log(w) - np.log(x - self.lo) - np.log(self.hi - x)

    def in_range(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.isfinite(x)
        if self.kind == "log":
            return np.isfinite(x) & (x > 0)
        return np.isfinite(x) & (x > self.lo) & (x < self.hi)

    def to_json(self) -> dict:
        if self.kind == "logit":
            return {"kind": self.kind, "lo": self.lo, "hi": self.hi}
        return {"kind": self.kind}


# -- continuous ---------------------------------------------------------------

@dataclass(frozen=True)
class AffineFlowMechanism:
    loc: ParamFn
    logscale: ParamFn
    params: dict = field(compare=False)
    transform: Transform = Transform()

    noise_dim = 1
    invertible = True
    categorical = False

    @classmethod
    def create(cls, n_inputs: int, hidden: int = 0, transform: Transform = Transform(),
               seed: int = 0, stream: int = 0) -> "AffineFlowMechanism":
        loc = ParamFn("loc", n_inputs, 1, hidden)
        logscale = ParamFn("logscale", n_inputs, 1, hidden)
        params = {**loc.init(seed, 2 * stream), **logscale.init(seed, 2 * stream + 1, out_scale=0.1)}
        return cls(loc, logscale, params, transform)

    @classmethod
    def linear(cls, weights, bias: float, logscale_bias: float = 0.0, logscale_weights=None,
               transform: Transform = Transform()) -> "AffineFlowMechanism":
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        ls_w = np.zeros_like(w) if logscale_weights is None else np.asarray(logscale_weights, float).reshape(-1, 1)
        loc = ParamFn("loc", w.shape[0], 1)
        logscale = ParamFn("logscale", w.shape[0], 1)
        params = {"loc.w": w, "loc.b": np.array([float(bias)]),
                  "logscale.w": ls_w, "logscale.b": np.array([float(logscale_bias)])}
        return cls(loc, logscale, params, transform)

    @property
    def n_inputs(self) -> int:
        return self.loc.in_dim

    def with_params(self, params) -> "AffineFlowMechanism":
        return replace(self, params=params)

    def _check(self, pa):
        pa = np.asarray(pa, dtype=float)
        if pa.ndim == 1:
            pa = pa.reshape(-1, self.n_inputs) if self.n_inputs else pa.reshape(-1, 0)
        if pa.shape[1] != self.n_inputs:
            raise ArityError(f"expected {self.n_inputs} parent features, got {pa.shape[1]}")
        return pa

    def loc_scale(self, pa):
        pa = self._check(pa)
        loc = self.loc.numpy(self.params, pa)[:, 0]
        scale = np.exp(clamp_logscale(self.logscale.numpy(self.params, pa)[:, 0]))
        return loc, scale

    def forward(self, pa, u):
        loc, scale = self.loc_scale(pa)
        u = np.asarray(u, dtype=float).reshape(loc.shape[0], -1)[:, 0]
        return self.transform.from_real(loc + scale * u)

    def inverse(self, pa, x, seed: int = 0, stream: int = 0, index=None):
        x = np.asarray(x, dtype=float)
        if not np.all(self.transform.in_range(x)):
            raise NonFiniteError("value outside the mechanism's range")
        loc, scale = self.loc_scale(pa)
        u = (self.transform.to_real(x) - loc) / scale
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("abducted noise is non-finite")
        return u[:, None]

    def sample_noise(self, seed: int, stream: int, index):
        return rng.normals(seed, stream, index, 1)

    def nll_var(self, params, pa, x):
        """Mean negative log-likelihood as a tape expression of ``params``."""
        y = self.transform.to_real(x)
        loc = self.loc(params, pa)[:, 0]
        logscale = clamp_logscale(self.logscale(params, pa)[:, 0])
        u = (ad.Var(y) - loc) * ad.exp(-logscale)
        const = _HALF_LOG_2PI + self.transform.log_abs_jacobian(x)
        return (0.5 * u.square() + logscale + ad.Var(const)).mean()

    def nll(self, pa, x) -> float:
        return float(self.nll_var(self.params, self._check(pa), np.asarray(x, float)).value)

    def fit(self, pa, x, config: FitConfig = FitConfig()) -> FitResult:
        pa = self._check(pa)
        x = np.asarray(x, dtype=float)
        if not np.all(self.transform.in_range(x)):
            raise NonFiniteError("training values outside the mechanism's range")
        return _fit(self, pa, x, config)


# -- categorical --------------------------------------------------------------

@dataclass(frozen=True)
class CategoricalMechanism:
    logits: ParamFn
    params: dict = field(compare=False)

    invertible = True
    categorical = True

    @classmethod
    def create(cls, n_inputs: int, k: int, hidden: int = 0, seed: int = 0, stream: int = 0):
        fn = ParamFn("logits", n_inputs, k, hidden)
        return cls(fn, fn.init(seed, stream, out_scale=0.1))

    @classmethod
    def from_logits(cls, logits, weights=None) -> "CategoricalMechanism":
        b = np.asarray(logits, dtype=float)
        w = np.zeros((0, b.size)) if weights is None else np.asarray(weights, float)
        fn = ParamFn("logits", w.shape[0], b.size)
        return cls(fn, {"logits.w": w, "logits.b": b})

    @property
    def k(self) -> int:
        return self.logits.out_dim

    @property
    def noise_dim(self) -> int:
        return self.k

    @property
    def n_inputs(self) -> int:
        return self.logits.in_dim

    def with_params(self, params) -> "CategoricalMechanism":
        return replace(self, params=params)

    def _logits(self, pa, n=None):
        pa = np.asarray(pa, dtype=float)
        if pa.ndim == 1:
            pa = pa.reshape(-1, self.n_inputs) if self.n_inputs else np.zeros((len(pa) if n is None else n, 0))
        if pa.shape[1] != self.n_inputs:
            raise ArityError(f"expected {self.n_inputs} parent features, got {pa.shape[1]}")
        return self.logits.numpy(self.params, pa)

    def forward(self, pa, u):
        u = np.asarray(u, dtype=float)
        u = u.reshape(-1, self.k)
        logits = self._logits(pa, n=u.shape[0])
        return np.argmax(logits + u, axis=-1)

    def probs(self, pa, n=None) -> np.ndarray:
        logits = self._logits(pa, n)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def inverse(self, pa, x, seed: int = 0, stream: int = 0, index=None):
        """Posterior Gumbels given the observed class (top-down construction).

        The maximum of the perturbed logits is drawn first from its Gumbel law,
        then the remaining coordinates are drawn from Gumbels truncated below it.
        Re-forwarding therefore reproduces ``x`` exactly.
        """
        x = np.asarray(x)
        if not np.all((x >= 0) & (x < self.k) & (x == np.round(x))):
            raise ValueError(f"category outside 0..{self.k - 1}")
        x = x.astype(np.int64)
        n = x.shape[0]
        logits = self._logits(pa, n=n)
        if index is None:
            index = np.arange(n)
        g = rng.gumbels(seed, stream, index, self.k + 1)
        m = logits.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
        top = lse + g[:, self.k]
        perturbed = logits + g[:, : self.k]
        # Gumbel(l_j) truncated to lie below `top`
        below = -np.logaddexp(-top[:, None], -perturbed)
        rows = np.arange(n)
        below[rows, x] = top
        return below - logits

    def sample_noise(self, seed: int, stream: int, index):
        return rng.gumbels(seed, stream, index, self.k)

    def nll_var(self, params, pa, x):
        logp = ad.log_softmax(self.logits(params, pa))
        onehot = np.zeros(logp.shape)
        onehot[np.arange(len(x)), np.asarray(x, dtype=np.int64)] = 1.0
        return -(logp * onehot).sum(axis=-1).mean()

    def nll(self, pa, x) -> float:
        x = np.asarray(x)
        return float(self.nll_var(self.params, np.asarray(pa, float).reshape(len(x), -1), x).value)

    def fit(self, pa, x, config: FitConfig = FitConfig()) -> FitResult:
        x = np.asarray(x)
        pa = np.asarray(pa, dtype=float).reshape(len(x), -1)
        if pa.shape[1] != self.n_inputs:
            raise ArityError(f"expected {self.n_inputs} parent features, got {pa.shape[1]}")
        return _fit(self, pa, x, config)


def n_params(mech) -> int:
    return int(sum(v.size for v in mech.params.values()))


def _fit(mech, pa, x, config: FitConfig) -> FitResult:
    """Full-batch Adam with step acceptance: a step that raises the NLL by more
    than ``tol`` is rejected and the learning rate halved, so the recorded
    trace is monotone."""
    n_rows = len(x)
    if n_rows < 2 * n_params(mech):
        raise ValueError(f"need at least {2 * n_params(mech)} rows to fit {n_params(mech)} parameters, got {n_rows}")
    keys = list(mech.params)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    params = dict(mech.params)
    loss_fn = lambda p: mech.nll_var(p, pa, x)  # noqa: E731
    nll, grads = value_and_grad(loss_fn, params, keys)
    if not np.isfinite(nll):
        raise DivergenceError("initial NLL is non-finite")
    trace = [nll]
    for _ in range(config.epochs):
        candidate = opt.step(params, grads)
        cand_nll, cand_grads = value_and_grad(loss_fn, candidate, keys)
        if not np.isfinite(cand_nll):
            raise DivergenceError("NLL became non-finite during fitting")
        if cand_nll <= nll + config.tol:
            params, nll, grads = candidate, cand_nll, cand_grads
        else:
            opt.lr *= 0.5
        trace.append(nll)
    return FitResult(mech.with_params(params), nll, trace)


def from_json(doc: dict, n_inputs: int):
    """Build a mechanism from its JSON description.

    ``{"type": "affine", "loc": {"weights": [...], "bias": b}, "logscale": {...},
    "transform": {"kind": "log"}}`` or ``{"type": "categorical", "logits": [...],
    "weights": [[...]]}``; ``{"type": "affine", "hidden": 8}`` without explicit
    weights creates a fresh learnable mechanism.
    """
    kind = doc.get("type", "affine")
    if kind == "affine":
        tr = Transform(**doc.get("transform", {"kind": "identity"}))
        if "loc" not in doc:
            return AffineFlowMechanism.create(n_inputs, doc.get("hidden", 0), tr, seed=doc.get("seed", 0))
        loc = doc["loc"]
        ls = doc.get("logscale", {})
        weights = loc.get("weights", [0.0] * n_inputs)
        if len(weights) != n_inputs:
            raise ArityError(f"mechanism has {len(weights)} weights for {n_inputs} parent features")
        return AffineFlowMechanism.linear(weights, loc.get("bias", 0.0), ls.get("bias", 0.0),
                                          ls.get("weights"), tr)
    if kind == "categorical":
        if "logits" not in doc:
            return CategoricalMechanism.create(n_inputs, int(doc["k"]), doc.get("hidden", 0), seed=doc.get("seed", 0))
        logits = doc["logits"]
        weights = doc.get("weights")
        if weights is None and n_inputs:
            weights = np.zeros((n_inputs, len(logits)))
        return CategoricalMechanism.from_logits(logits, weights)
    raise ValueError(f"unknown mechanism type {kind!r}")
