"""Small parametric maps and the optimizer shared by every trainable piece.

A model keeps its parameters in one flat ``dict[str, ndarray]``; each
:class:`ParamFn` owns the keys under its prefix.  During a gradient step the
arrays are wrapped in :class:`~cfscm.autodiff.Var` leaves, so the same forward
code serves both evaluation and differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cfscm import autodiff as ad
from cfscm import rng

LOGSCALE_MIN = -5.0
LOGSCALE_MAX = 2.0


class DivergenceError(FloatingPointError):
    """Raised when a training objective becomes non-finite."""


@dataclass(frozen=True)
class ParamFn:
    """``out = W2 tanh(W1 x + b1) + b2`` (or a single affine map when ``hidden == 0``)."""

    prefix: str
    in_dim: int
    out_dim: int
    hidden: int = 0

    def shapes(self) -> dict[str, tuple[int, ...]]:
        p = self.prefix
        if self.hidden:
            return {f"{p}.w1": (self.in_dim, self.hidden), f"{p}.b1": (self.hidden,),
                    f"{p}.w2": (self.hidden, self.out_dim), f"{p}.b2": (self.out_dim,)}
        return {f"{p}.w": (self.in_dim, self.out_dim), f"{p}.b": (self.out_dim,)}

    def init(self, seed: int, stream: int, out_scale: float = 1.0) -> dict[str, np.ndarray]:
        out = {}
        for j, (name, shape) in enumerate(self.shapes().items()):
            if len(shape) == 1:
                out[name] = np.zeros(shape)
                continue
            std = 1.0 / np.sqrt(max(shape[0], 1))
            if name.endswith((".w2", ".w")):
                std *= out_scale
            draws = rng.normals(seed, stream * 16 + j, np.arange(shape[0]), shape[1])
            out[name] = std * draws
        return out

    def __call__(self, params, x):
        p = self.prefix
        x = ad.lift(x)
        if self.hidden:
            h = ad.tanh(x @ ad.lift(params[f"{p}.w1"]) + ad.lift(params[f"{p}.b1"]))
            return h @ ad.lift(params[f"{p}.w2"]) + ad.lift(params[f"{p}.b2"])
        return x @ ad.lift(params[f"{p}.w"]) + ad.lift(params[f"{p}.b"])

    def numpy(self, params, x: np.ndarray) -> np.ndarray:
        p = self.prefix
        if self.hidden:
            h = np.tanh(x @ params[f"{p}.w1"] + params[f"{p}.b1"])
            return h @ params[f"{p}.w2"] + params[f"{p}.b2"]
        return x @ params[f"{p}.w"] + params[f"{p}.b"]


def clamp_logscale(pre):
    if isinstance(pre, ad.Var):
        return ad.clip(pre, LOGSCALE_MIN, LOGSCALE_MAX)
    return np.clip(pre, LOGSCALE_MIN, LOGSCALE_MAX)


def as_leaves(params: dict[str, np.ndarray], keys=None) -> dict[str, ad.Var]:
    keys = params.keys() if keys is None else keys
    return {k: ad.Var(params[k]) for k in keys}


def flatten(params: dict[str, np.ndarray], keys) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in keys]) if keys else np.zeros(0)


def unflatten(vector: np.ndarray, template: dict[str, np.ndarray], keys) -> dict[str, np.ndarray]:
    out = dict(template)
    pos = 0
    for k in keys:
        n = template[k].size
        out[k] = vector[pos:pos + n].reshape(template[k].shape).copy()
        pos += n
    return out


def value_and_grad(loss_fn, params: dict[str, np.ndarray], keys):
    """Evaluate ``loss_fn(leaves)`` (a scalar Var) and its gradient w.r.t. ``keys``."""
    leaves = {k: v for k, v in params.items()}
    trainable = {k: ad.Var(params[k]) for k in keys}
    leaves.update(trainable)
    loss = loss_fn(leaves)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in trainable.items()}
    return float(loss.value), grads


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._t += 1
        out = dict(params)
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for k, g in grads.items():
            m = self._m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self._v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self._m[k], self._v[k] = m, v
            out[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{what} became non-finite")
