"""Hierarchical latent mechanism for a high-dimensional variable x.

Top-down generative pass, for layers ``i = L .. 1``::

    prior_i  = N(mu_p, sigma_p)([ctx_{i+1}]            )   exogenous-prior variant
             = N(mu_p, sigma_p)([ctx_{i+1}, pa]        )   latent-mediator variant
    ctx_i    = ctx_{i+1} + g_i(z_i)                         (never sees pa)
    h_i      = h_{i+1}   + f_i(z_i, pa)                     (residual conditioning)
    x        ~ N(mu(h_1), sigma(h_1))

``ctx`` and ``h`` start from learned vectors ``c_init`` / ``h_init``.  Keeping the
prior's context stream free of ``pa`` is what makes the exogenous-prior
variant's latent prior independent of the parents.  The inference model is
top-down as well: ``q(z_i | z_{>i}, x, pa)`` reads ``[ctx_{i+1}, b_i(x), pa]``
with a bottom-up deterministic chain ``b_1 = d_1(x), b_i = d_i(b_{i-1})``.

Parents are passed as raw encoded feature matrices and standardized with the
stats stored on the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from cfscm import autodiff as ad
from cfscm import rng
from cfscm.nets import Adam, DivergenceError, ParamFn, check_finite, clamp_logscale, value_and_grad

EXOGENOUS = "exogenous"
MEDIATOR = "mediator"
VARIANTS = (EXOGENOUS, MEDIATOR)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_TRAIN_STREAM = 1000
_POSTERIOR_STREAM = 2000


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class LadderSpec:
    variant: str = MEDIATOR
    x_dim: int = 256
    pa_dim: int = 5
    z_dims: tuple = (4, 8, 16)
    h_dim: int = 32
    bu_dim: int = 64
    hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.z_dims:
            raise ValueError("need at least one latent layer")

    @property
    def L(self) -> int:
        return len(self.z_dims)

    def nets(self) -> dict[str, ParamFn]:
        H, P, B, W = self.h_dim, self.pa_dim, self.bu_dim, self.hidden
        out = {"dec": ParamFn("dec", H, 2 * self.x_dim, W)}
        for i, d in enumerate(self.z_dims, start=1):
            prior_in = H if self.variant == EXOGENOUS else H + P
            out[f"prior{i}"] = ParamFn(f"prior{i}", prior_in, 2 * d, W)
            out[f"post{i}"] = ParamFn(f"post{i}", H + B + P, 2 * d, W)
            out[f"ctx{i}"] = ParamFn(f"ctx{i}", d, H, W)
            out[f"res{i}"] = ParamFn(f"res{i}", d + P, H, W)
            out[f"up{i}"] = ParamFn(f"up{i}", self.x_dim if i == 1 else B, B)
        return out

    def to_json(self) -> dict:
        return {"variant": self.variant, "x_dim": self.x_dim, "pa_dim": self.pa_dim,
                "z_dims": list(self.z_dims), "h_dim": self.h_dim, "bu_dim": self.bu_dim,
                "hidden": self.hidden}


@dataclass(frozen=True)
class LadderModel:
    spec: LadderSpec
    params: dict = field(compare=False)
    pa_mean: np.ndarray = field(compare=False)
    pa_std: np.ndarray = field(compare=False)

    @classmethod
    def create(cls, spec: LadderSpec, seed: int = 0, pa_mean=None, pa_std=None, x_mean=None) -> "LadderModel":
        params = {}
        for j, fn in enumerate(spec.nets().values()):
            out_scale = 0.1 if fn.prefix.startswith(("ctx", "res", "prior", "post")) else 1.0
            params.update(fn.init(seed, j, out_scale=out_scale))
        params["h_init"] = np.zeros(spec.h_dim)
        params["c_init"] = np.zeros(spec.h_dim)
        if x_mean is not None:
            params["dec.b2"] = np.concatenate([np.asarray(x_mean, float).ravel(), np.full(spec.x_dim, -2.0)])
        pa_mean = np.zeros(spec.pa_dim) if pa_mean is None else np.asarray(pa_mean, float)
        pa_std = np.ones(spec.pa_dim) if pa_std is None else np.asarray(pa_std, float)
        return cls(spec, params, pa_mean, pa_std)

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def L(self) -> int:
        return self.spec.L

    def with_params(self, params) -> "LadderModel":
        return replace(self, params=params)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def standardize(self, pa) -> np.ndarray:
        pa = np.asarray(pa, dtype=float).reshape(-1, self.spec.pa_dim)
        return (pa - self.pa_mean) / self.pa_std


@dataclass
class LatentStack:
    """Latents ordered by layer index (``z[0]`` is z_1), plus abducted noises for the mediator variant."""

    z: list
    pa: np.ndarray
    u_z: list | None = None


@dataclass
class EffectReport:
    de: np.ndarray
    ie: np.ndarray
    te: np.ndarray
    # g(pa_cf, z_cf) - g(pa, z_cf): the direct effect evaluated at the counterfactual mediator
    de_cf: np.ndarray | None = None

    @property
    def norms(self) -> dict[str, float]:
        return {k: float(np.abs(getattr(self, k)).sum()) for k in ("de", "ie", "te")}

    def telescoping_gap(self) -> float:
        """max |TE - IE - (g(pa_cf, z_cf) - g(pa, z_cf))|, zero up to rounding."""
        if self.de_cf is None or self.te.size == 0:
            return 0.0
        return float(np.max(np.abs(self.te - self.ie - self.de_cf)))


# -- building blocks on the tape ------------------------------------------------

def _split(out, d):
    return out[:, :d], clamp_logscale(out[:, d:])


def _gauss_kl(mu_q, ls_q, mu_p, ls_p):
    """KL(N(mu_q, e^ls_q) || N(mu_p, e^ls_p)) summed over the last axis."""
    var_ratio = ad.exp(2.0 * (ls_q - ls_p))
    diff = (mu_q - mu_p) * ad.exp(-ls_p)
    return (ls_p - ls_q + 0.5 * (var_ratio + diff.square()) - 0.5).sum(axis=-1)


def _gauss_loglik(x, mu, ls):
    u = (ad.lift(x) - mu) * ad.exp(-ls)
    return (-0.5 * u.square() - ls - _HALF_LOG_2PI).sum(axis=-1)


class _Net:
    """Evaluates a model's nets against a parameter mapping (arrays or tape leaves)."""

    def __init__(self, model: LadderModel, params=None):
        self.m = model
        self.s = model.spec
        self.p = model.params if params is None else params
        self.fns = model.spec.nets()

    def __call__(self, name, x):
        return self.fns[name](self.p, x)

    def init_states(self, n):
        ones = np.ones((n, 1))
        return ones * ad.lift(self.p["c_init"]), ones * ad.lift(self.p["h_init"])

    def bottom_up(self, x):
        feats, b = [], ad.lift(x)
        for i in range(1, self.s.L + 1):
            b = ad.tanh(self(f"up{i}", b))
            feats.append(b)
        return feats

    def prior(self, i, ctx, pa):
        inp = ctx if self.s.variant == EXOGENOUS else ad.concat([ctx, pa])
        return _split(self(f"prior{i}", inp), self.s.z_dims[i - 1])

    def posterior(self, i, ctx, feat, pa):
        return _split(self(f"post{i}", ad.concat([ctx, feat, pa])), self.s.z_dims[i - 1])

    def step(self, i, ctx, h, z, pa):
        return ctx + self(f"ctx{i}", z), h + self(f"res{i}", ad.concat([z, pa]))

    def decode_h(self, h):
        return _split(self("dec", h), self.s.x_dim)

    def decode(self, zs, pa):
        """(mu, logsigma) of x given the latent stack (ctx stream is not needed here)."""
        n = pa.shape[0]
        _, h = self.init_states(n)
        for i in range(self.s.L, 0, -1):
            h = h + self(f"res{i}", ad.concat([zs[i - 1], pa]))
        return self.decode_h(h)

    def infer(self, x, pa, noises):
        """Top-down posterior pass.  Returns z's, posterior/prior params and the final h."""
        n = pa.shape[0]
        feats = self.bottom_up(x)
        ctx, h = self.init_states(n)
        zs = [None] * self.s.L
        post = [None] * self.s.L
        prior = [None] * self.s.L
        for i in range(self.s.L, 0, -1):
            mu_p, ls_p = self.prior(i, ctx, pa)
            mu_q, ls_q = self.posterior(i, ctx, feats[i - 1], pa)
            z = mu_q + ad.exp(ls_q) * noises[i - 1]
            zs[i - 1], post[i - 1], prior[i - 1] = z, (mu_q, ls_q), (mu_p, ls_p)
            ctx, h = self.step(i, ctx, h, z, pa)
        return zs, post, prior, h


def _layer_noise(spec: LadderSpec, seed: int, stream: int, index) -> list[np.ndarray]:
    return [rng.normals(seed, stream + i, index, d) for i, d in enumerate(spec.z_dims)]


def _prep(model: LadderModel, x, pa):
    x = np.asarray(x, dtype=float).reshape(-1, model.spec.x_dim)
    pa_s = model.standardize(pa)
    if pa_s.shape[0] != x.shape[0]:
        raise ValueError("x and pa disagree on the batch size")
    return x, pa_s


# -- ELBO / training ------------------------------------------------------------

def elbo_terms(model: LadderModel, params, x, pa_s, noises):
    """Per-sample (log-likelihood, [KL_i]) on the tape."""
    net = _Net(model, params)
    _, post, prior, h = net.infer(x, ad.lift(pa_s), noises)
    mu, ls = net.decode_h(h)
    kls = [_gauss_kl(*post[i], *prior[i]) for i in range(model.L)]
    return _gauss_loglik(x, mu, ls), kls


def free_energy_var(model: LadderModel, params, x, pa_s, noises):
    """Mean free energy (negative ELBO) over the batch, as a tape expression."""
    ll, kls = elbo_terms(model, params, x, pa_s, noises)
    total = ll
    for kl in kls:
        total = total - kl
    return -total.mean()


def elbo(model: LadderModel, x, pa, seed: int = 0, index=None):
    """Single-sample ELBO per row and the per-layer KL terms (rows x layers)."""
    x, pa_s = _prep(model, x, pa)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _TRAIN_STREAM, index)
    ll, kls = elbo_terms(model, model.params, x, pa_s, noises)
    kl = np.stack([k.value for k in kls], axis=1)
    out = ll.value - kl.sum(axis=1)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("ELBO is non-finite")
    return out, kl


def mean_free_energy(model: LadderModel, x, pa, seed: int, batch: int = 512) -> float:
    """Dataset-mean free energy with a fixed evaluation seed (comparable across calls)."""
    x = np.asarray(x, dtype=float).reshape(-1, model.spec.x_dim)
    tot = 0.0
    for lo in range(0, x.shape[0], batch):
        idx = np.arange(lo, min(lo + batch, x.shape[0]))
        e, _ = elbo(model, x[idx], np.asarray(pa)[idx], seed, idx)
        tot += float(-e.sum())
    return tot / x.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    model: LadderModel
    trace: list[float]

    @property
    def c(self) -> float:
        """Constraint level: the last recorded mean free energy."""
        return self.trace[-1]


def eval_seed(seed: int) -> int:
    return rng.derive_seed(seed, 0xE7A1)


def validate_data(x, pa):
    x = np.asarray(x, dtype=float)
    pa = np.asarray(pa, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(pa))):
        raise DivergenceError("dataset contains non-finite values")
    return x, pa


def train(model: LadderModel, x, pa, config: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Minibatch Adam on the free energy; records the dataset-mean free energy per epoch."""
    x, pa = validate_data(x, pa)
    x = x.reshape(x.shape[0], -1)
    pa_s = model.standardize(pa)
    n = x.shape[0]
    keys = list(model.params)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    params = dict(model.params)
    ev = eval_seed(config.seed)
    trace = [mean_free_energy(model, x, pa, ev)]
    for epoch in range(config.epochs):
        perm = rng.permutation(config.seed, epoch, n)
        ep_seed = rng.derive_seed(config.seed, epoch)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            noises = _layer_noise(model.spec, ep_seed, _TRAIN_STREAM, idx)
            loss, grads = value_and_grad(
                lambda p: free_energy_var(model, p, x[idx], pa_s[idx], noises), params, keys)
            if not np.isfinite(loss):
                raise DivergenceError(f"free energy became non-finite in epoch {epoch}")
            params = opt.step(params, grads)
        model = model.with_params(params)
        trace.append(mean_free_energy(model, x, pa, ev))
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} free energy {trace[-1]:.3f}")
        check_finite(trace[-1], "free energy")
    return TrainResult(model, trace)


# -- decoding and abduction -------------------------------------------------------

def decode(model: LadderModel, stack: LatentStack, pa) -> tuple[np.ndarray, np.ndarray]:
    pa_s = model.standardize(pa)
    for i, z in enumerate(stack.z):
        if np.asarray(z).shape != (pa_s.shape[0], model.spec.z_dims[i]):
            raise ValueError(f"layer {i + 1} latent has shape {np.shape(z)}")
    mu, ls = _Net(model).decode([ad.lift(z) for z in stack.z], ad.lift(pa_s))
    return mu.value, np.exp(ls.value)


def abduct_epsilon(model: LadderModel, x, stack: LatentStack, pa) -> np.ndarray:
    mu, sigma = decode(model, stack, pa)
    eps = (np.asarray(x, dtype=float).reshape(mu.shape) - mu) / sigma
    check_finite(eps, "abducted noise")
    return eps


def sample_posterior(model: LadderModel, x, pa, seed: int, index=None) -> LatentStack:
    x, pa_s = _prep(model, x, pa)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _POSTERIOR_STREAM, index)
    zs, _, _, _ = _Net(model).infer(x, ad.lift(pa_s), noises)
    return LatentStack([z.value for z in zs], np.asarray(pa, float).reshape(x.shape[0], -1))


def _cf_exogenous_var(model: LadderModel, params, x, pa_s, pa_cf_s, noises):
    net = _Net(model, params)
    zs, _, _, h = net.infer(x, ad.lift(pa_s), noises)
    mu, ls = net.decode_h(h)
    eps = (ad.lift(x) - mu) * ad.exp(-ls)
    mu_cf, ls_cf = net.decode(zs, ad.lift(pa_cf_s))
    return mu_cf + ad.exp(ls_cf) * eps


def counterfactual_exogenous(model: LadderModel, x, pa, pa_cf, seed: int = 0, index=None) -> np.ndarray:
    """One posterior draw of z is shared by both worlds; eps carries the pixel noise across."""
    if model.variant != EXOGENOUS:
        raise VariantError("counterfactual_exogenous needs the exogenous-prior variant")
    x, pa_s = _prep(model, x, pa)
    pa_cf_s = model.standardize(pa_cf)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _POSTERIOR_STREAM, index)
    return _cf_exogenous_var(model, model.params, x, pa_s, pa_cf_s, noises).value


def abduct_mediator(model: LadderModel, x, pa, seed: int = 0, index=None) -> LatentStack:
    """Posterior sample of the mediator plus its inverted reparameterization noise."""
    if model.variant != MEDIATOR:
        raise VariantError("abduct_mediator needs the latent-mediator variant")
    x, pa_s = _prep(model, x, pa)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _POSTERIOR_STREAM, index)
    zs, post, _, _ = _Net(model).infer(x, ad.lift(pa_s), noises)
    z = [v.value for v in zs]
    u_z = [(z[i] - post[i][0].value) / np.exp(post[i][1].value) for i in range(model.L)]
    return LatentStack(z, np.asarray(pa, float).reshape(x.shape[0], -1), u_z)


def moment_match(mu_p, sigma_p, mu_q, sigma_q, pi: float):
    """Gaussian with the mean and variance of ``pi N(mu_p, sigma_p) + (1 - pi) N(mu_q, sigma_q)``."""
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"mixture weight {pi} outside [0, 1]")
    if pi == 1.0:
        return mu_p, sigma_p
    if pi == 0.0:
        return mu_q, sigma_q
    mu_r = pi * mu_p + (1.0 - pi) * mu_q
    second = pi * (sigma_p * sigma_p + mu_p * mu_p) + (1.0 - pi) * (sigma_q * sigma_q + mu_q * mu_q)
    var = second - mu_r * mu_r
    if isinstance(var, ad.Var):
        # written as the same moments, rearranged to stay positive on the tape
        dm = mu_p - mu_q
        var = pi * sigma_p.square() + (1.0 - pi) * sigma_q.square() + (pi * (1.0 - pi)) * dm.square()
        return mu_r, ad.exp(0.5 * ad.log(var))
    return mu_r, np.sqrt(np.maximum(var, 0.0))


def _cf_mediator_var(model: LadderModel, params, x, pa_s, pa_cf_s, noises, pi):
    """Shared top-down pass for counterfactual_mediator and effects, on the tape.

    Returns (x_cf, z_factual, z_cf, u_x, net).
    """
    net = _Net(model, params)
    n = pa_s.shape[0]
    pa_v, pa_cf_v = ad.lift(pa_s), ad.lift(pa_cf_s)
    feats = net.bottom_up(x)
    ctx, h = net.init_states(n)
    ctx_cf, _ = net.init_states(n)
    zs, zs_cf = [None] * model.L, [None] * model.L
    for i in range(model.L, 0, -1):
        mu_q, ls_q = net.posterior(i, ctx, feats[i - 1], pa_v)
        sigma_q = ad.exp(ls_q)
        z = mu_q + sigma_q * noises[i - 1]
        u = (z - mu_q) / sigma_q
        mu_p, ls_p = net.prior(i, ctx_cf, pa_cf_v)
        mu_r, sigma_r = moment_match(mu_p, ad.exp(ls_p), mu_q, sigma_q, pi)
        z_cf = mu_r + sigma_r * u
        zs[i - 1], zs_cf[i - 1] = z, z_cf
        ctx, h = net.step(i, ctx, h, z, pa_v)
        ctx_cf = ctx_cf + net(f"ctx{i}", z_cf)
    mu, ls = net.decode_h(h)
    u_x = (ad.lift(x) - mu) * ad.exp(-ls)
    mu_cf, ls_cf = net.decode(zs_cf, pa_cf_v)
    return mu_cf + ad.exp(ls_cf) * u_x, zs, zs_cf, u_x, net


def counterfactual_mediator(model: LadderModel, x, pa, pa_cf, pi: float = 0.9, seed: int = 0, index=None):
    """Returns ``(x_cf, LatentStack of the counterfactual mediator)``."""
    if model.variant != MEDIATOR:
        raise VariantError("counterfactual_mediator needs the latent-mediator variant")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"mixture weight {pi} outside [0, 1]")
    x, pa_s = _prep(model, x, pa)
    pa_cf_s = model.standardize(pa_cf)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _POSTERIOR_STREAM, index)
    x_cf, _, zs_cf, _, _ = _cf_mediator_var(model, model.params, x, pa_s, pa_cf_s, noises, pi)
    return x_cf.value, LatentStack([z.value for z in zs_cf], np.asarray(pa_cf, float).reshape(x.shape[0], -1))


def mixture_params(model: LadderModel, layer: int, z_cf_above, pa_cf, z_above, x, pa, pi: float):
    """Moment-matched mixture of the counterfactual prior and the factual posterior at one layer.

    ``z_cf_above`` / ``z_above`` hold the latents of layers ``layer+1 .. L``
    (ordered like ``LatentStack.z``, i.e. lowest layer first).
    """
    if not 1 <= layer <= model.L:
        raise ValueError(f"layer must be in 1..{model.L}")
    x, pa_s = _prep(model, x, pa)
    pa_cf_s = model.standardize(pa_cf)
    net = _Net(model)
    n = x.shape[0]
    feats = net.bottom_up(x)
    ctx, _ = net.init_states(n)
    ctx_cf, _ = net.init_states(n)
    for i in range(model.L, layer, -1):
        ctx = ctx + net(f"ctx{i}", ad.lift(z_above[i - layer - 1]))
        ctx_cf = ctx_cf + net(f"ctx{i}", ad.lift(z_cf_above[i - layer - 1]))
    mu_q, ls_q = net.posterior(layer, ctx, feats[layer - 1], ad.lift(pa_s))
    mu_p, ls_p = net.prior(layer, ctx_cf, ad.lift(pa_cf_s))
    return moment_match(mu_p.value, np.exp(ls_p.value), mu_q.value, np.exp(ls_q.value), pi)


def effects(model: LadderModel, x, pa, pa_cf, pi: float = 0.9, seed: int = 0, index=None) -> EffectReport:
    """Direct, indirect and total effects with ``g(pa, z) = mu(z, pa) + sigma(z, pa) * U_x``."""
    if model.variant != MEDIATOR:
        raise VariantError("mediation effects need the latent-mediator variant")
    x, pa_s = _prep(model, x, pa)
    pa_cf_s = model.standardize(pa_cf)
    index = np.arange(x.shape[0]) if index is None else np.asarray(index)
    noises = _layer_noise(model.spec, seed, _POSTERIOR_STREAM, index)
    _, zs, zs_cf, u_x, net = _cf_mediator_var(model, model.params, x, pa_s, pa_cf_s, noises, pi)
    u_x = u_x.value

    def g(p, z):
        mu, ls = net.decode([ad.lift(v.value) for v in z], ad.lift(p))
        return mu.value + np.exp(ls.value) * u_x

    base = g(pa_s, zs)
    de = g(pa_cf_s, zs) - base
    ie = g(pa_s, zs_cf) - base
    cf = g(pa_cf_s, zs_cf)
    te = cf - base
    de_cf = cf - g(pa_s, zs_cf)
    # a null query has no effect by definition, even though the mixture moves z when pi > 0
    null = np.all(np.asarray(pa_cf_s) == np.asarray(pa_s), axis=1)
    for arr in (de, ie, te, de_cf):
        arr[null] = 0.0
    return EffectReport(de, ie, te, de_cf)


def prior_log_density(model: LadderModel, stack: LatentStack, pa) -> np.ndarray:
    """log p(z_{1:L} | [pa]) per row under the generative prior."""
    pa_s = ad.lift(model.standardize(pa))
    net = _Net(model)
    ctx, _ = net.init_states(pa_s.shape[0])
    total = np.zeros(pa_s.shape[0])
    for i in range(model.L, 0, -1):
        mu, ls = net.prior(i, ctx, pa_s)
        z = ad.lift(stack.z[i - 1])
        total += _gauss_loglik(z, mu, ls).value
        ctx = ctx + net(f"ctx{i}", z)
    return total


# -- SCM binding --------------------------------------------------------------------

@dataclass(frozen=True)
class LadderMechanism:
    """Binds a ladder model to an SCM node.

    The node's noise vector is ``[U_z1, ..., U_zL, eps]``.  Forward sampling maps
    the ``U_z`` through the prior; abduction inverts the prior (exogenous
    variant, where z is itself exogenous) or the posterior (mediator variant).
    """

    model: LadderModel
    pi: float = 0.9

    invertible = True
    categorical = False

    @property
    def noise_dim(self) -> int:
        return sum(self.model.spec.z_dims) + self.model.spec.x_dim

    @property
    def n_inputs(self) -> int:
        return self.model.spec.pa_dim

    def _split_noise(self, u):
        u = np.asarray(u, dtype=float)
        out, pos = [], 0
        for d in self.model.spec.z_dims:
            out.append(u[:, pos:pos + d])
            pos += d
        return out, u[:, pos:]

    def _prior_z(self, pa_s, u_z):
        net = _Net(self.model)
        ctx, _ = net.init_states(pa_s.shape[0])
        zs = [None] * self.model.L
        for i in range(self.model.L, 0, -1):
            mu, ls = net.prior(i, ctx, ad.lift(pa_s))
            zs[i - 1] = mu.value + np.exp(ls.value) * u_z[i - 1]
            ctx = ctx + net(f"ctx{i}", ad.lift(zs[i - 1]))
        return zs

    def forward(self, pa, u):
        pa_s = self.model.standardize(pa)
        u_z, eps = self._split_noise(u)
        zs = self._prior_z(pa_s, u_z)
        mu, sigma = decode(self.model, LatentStack(zs, pa), pa)
        return (mu + sigma * eps).reshape((-1,) + self._x_shape(pa))

    def _x_shape(self, pa):
        side = int(round(math.sqrt(self.model.spec.x_dim)))
        return (side, side) if side * side == self.model.spec.x_dim else (self.model.spec.x_dim,)

    def _prior_noise(self, pa_s, zs):
        net = _Net(self.model)
        ctx, _ = net.init_states(pa_s.shape[0])
        u_z = [None] * self.model.L
        for i in range(self.model.L, 0, -1):
            mu, ls = net.prior(i, ctx, ad.lift(pa_s))
            u_z[i - 1] = (zs[i - 1] - mu.value) / np.exp(ls.value)
            ctx = ctx + net(f"ctx{i}", ad.lift(zs[i - 1]))
        return u_z

    def _posterior_noise(self, x, pa_s, zs):
        net = _Net(self.model)
        pa_v = ad.lift(pa_s)
        feats = net.bottom_up(x)
        ctx, h = net.init_states(x.shape[0])
        u = [None] * self.model.L
        for i in range(self.model.L, 0, -1):
            mu_q, ls_q = net.posterior(i, ctx, feats[i - 1], pa_v)
            u[i - 1] = (zs[i - 1] - mu_q.value) / np.exp(ls_q.value)
            ctx, h = net.step(i, ctx, h, ad.lift(zs[i - 1]), pa_v)
        return u

    def inverse(self, pa, x, seed: int = 0, stream: int = 0, index=None):
        # the noise is always expressed in prior coordinates so forward(pa, inverse(pa, x)) == x
        x = np.asarray(x, dtype=float).reshape(-1, self.model.spec.x_dim)
        stack = sample_posterior(self.model, x, pa, rng.derive_seed(seed, stream), index)
        u_z = self._prior_noise(self.model.standardize(pa), stack.z)
        eps = abduct_epsilon(self.model, x, stack, pa)
        return np.concatenate(u_z + [eps], axis=1)

    def counterfactual(self, pa, x, u, pa_cf, index=None):
        if self.model.variant == EXOGENOUS:
            return self.forward(pa_cf, u)
        x = np.asarray(x, dtype=float).reshape(-1, self.model.spec.x_dim)
        pa_s = self.model.standardize(pa)
        u_z, _ = self._split_noise(u)
        # re-express the abducted mediator in posterior coordinates for the mixture step
        u_post = self._posterior_noise(x, pa_s, self._prior_z(pa_s, u_z))
        x_cf, _, _, _, _ = _cf_mediator_var(self.model, self.model.params, x, pa_s,
                                            self.model.standardize(pa_cf), u_post, self.pi)
        return x_cf.value.reshape((-1,) + self._x_shape(pa))

    def sample_noise(self, seed, stream, index):
        return rng.normals(seed, stream, index, self.noise_dim)
