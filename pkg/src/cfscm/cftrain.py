"""Counterfactual fine-tuning of the image mechanism.

Parent predictors q_psi(pa_k | x) are fitted on observational data and then
frozen.  The counterfactual loss intervenes on one parent at a time with a
value resampled from its empirical marginal, generates the counterfactual
image, and scores the intervened value under the predictor.  Fine-tuning
minimises that loss subject to the model's mean free energy staying at or
below its pre-trained level ``c``, with a projected multiplier updated by
gradient ascent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cfscm import autodiff as ad
from cfscm import ladder, rng, scm
from cfscm.imagescm import ImageScm
from cfscm.nets import Adam, DivergenceError, ParamFn, clamp_logscale, value_and_grad

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_INTERVENTION_STREAM = 3000


@dataclass(frozen=True)
class ParentPredictor:
    """q_psi(pa_k | x): Gaussian (continuous parents, standardized target) or softmax."""

    name: str
    kind: str
    net: ParamFn
    params: dict = field(compare=False)
    target_mean: float = 0.0
    target_std: float = 1.0

    @classmethod
    def create(cls, name: str, kind: str, x_dim: int, k: int = 0, hidden: int = 64, seed: int = 0, stream: int = 0,
               target_mean: float = 0.0, target_std: float = 1.0) -> "ParentPredictor":
        out = k if kind == "categorical" else 2
        net = ParamFn("psi", x_dim, out, hidden)
        return cls(name, kind, net, net.init(seed, stream), float(target_mean), float(target_std))

    @property
    def k(self) -> int:
        return self.net.out_dim if self.kind == "categorical" else 0

    def with_params(self, params) -> "ParentPredictor":
        return ParentPredictor(self.name, self.kind, self.net, params, self.target_mean, self.target_std)

    def log_prob_var(self, params, x, target):
        """Per-row log q(target | x) on the tape."""
        out = self.net(params, ad.lift(x).value.reshape(-1, self.net.in_dim) if not isinstance(x, ad.Var)
                       else _flat(x, self.net.in_dim))
        if self.kind == "categorical":
            logp = ad.log_softmax(out)
            onehot = np.zeros(logp.shape)
            onehot[np.arange(logp.shape[0]), np.asarray(target, dtype=np.int64)] = 1.0
            return (logp * onehot).sum(axis=-1)
        mu = out[:, 0]
        ls = clamp_logscale(out[:, 1])
        u = (ad.Var((np.asarray(target, float) - self.target_mean) / self.target_std) - mu) * ad.exp(-ls)
        return -0.5 * u.square() - ls - (_HALF_LOG_2PI + math.log(self.target_std))

    def log_prob(self, x, target) -> np.ndarray:
        return self.log_prob_var(self.params, np.asarray(x, float), target).value

    def predict(self, x) -> np.ndarray:
        out = self.net.numpy(self.params, np.asarray(x, float).reshape(-1, self.net.in_dim))
        if self.kind == "categorical":
            return np.argmax(out, axis=-1)
        return self.target_mean + self.target_std * out[:, 0]


def _flat(v: ad.Var, d: int) -> ad.Var:
    if v.value.ndim == 2 and v.value.shape[1] == d:
        return v
    shape = v.value.shape
    return ad.Var(v.value.reshape(-1, d), (v,), lambda g: (g.reshape(shape),))


@dataclass(frozen=True)
class PredictorConfig:
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def fit_predictors(x, columns: dict, kinds: dict, config: PredictorConfig = PredictorConfig()):
    """Fit one predictor per parent.  ``kinds`` maps name -> ("continuous", 0) or ("categorical", k).

    Returns ``(predictors, traces)`` where ``traces[name]`` is the per-epoch mean NLL.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("cannot fit predictors on an empty dataset")
    x = x.reshape(x.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("images contain non-finite values")
    preds, traces = [], {}
    for j, (name, (kind, k)) in enumerate(kinds.items()):
        target = np.asarray(columns[name])
        if kind == "categorical":
            p = ParentPredictor.create(name, kind, x.shape[1], k, config.hidden, config.seed, j)
        else:
            sd = float(target.std()) or 1.0
            p = ParentPredictor.create(name, kind, x.shape[1], 0, config.hidden, config.seed, j,
                                       float(target.mean()), sd)
        p, trace = _fit_predictor(p, x, target, config, stream=j)
        preds.append(p)
        traces[name] = trace
    return preds, traces


def _fit_predictor(p: ParentPredictor, x, target, config: PredictorConfig, stream: int):
    keys = list(p.params)
    params = dict(p.params)
    opt = Adam(config.lr)
    n = x.shape[0]
    trace = [float(-p.log_prob(x, target).mean())]
    for epoch in range(config.epochs):
        perm = rng.permutation(config.seed, 100 * stream + epoch, n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss, grads = value_and_grad(lambda q: -p.log_prob_var(q, x[idx], target[idx]).mean(), params, keys)
            if not np.isfinite(loss):
                raise DivergenceError(f"predictor for {p.name} diverged")
            params = opt.step(params, grads)
        p = p.with_params(params)
        trace.append(float(-p.log_prob(x, target).mean()))
    return p, trace


def mi_lower_bound(pa_cf, x_cf, predictor, entropy: float, weights=None) -> float:
    """Variational MI bound H(pa) + E[log q(pa | x)] over samples (optionally probability-weighted).

    Since E[log q] <= -H(pa | x), this never exceeds I(pa; x).
    """
    logq = np.asarray(predictor.log_prob(x_cf, pa_cf), dtype=float)
    if logq.size == 0:
        raise ValueError("need at least one sample")
    if weights is None:
        return float(logq.mean() + entropy)
    w = np.asarray(weights, dtype=float)
    return float((w * logq).sum() / w.sum() + entropy)


def sample_marginal(marginal, seed: int, stream: int, index) -> np.ndarray:
    """Resample observed values: one per row, keyed by row index."""
    marginal = np.asarray(marginal)
    u = rng.uniforms(seed, _INTERVENTION_STREAM + stream, np.asarray(index), 1)[:, 0]
    return marginal[np.minimum((u * len(marginal)).astype(np.int64), len(marginal) - 1)]


def _ladder_cf_var(model: ladder.LadderModel, params, x, pa_s, pa_cf_s, noises, pi):
    if model.variant == ladder.EXOGENOUS:
        return ladder._cf_exogenous_var(model, params, x, pa_s, pa_cf_s, noises)
    return ladder._cf_mediator_var(model, params, x, pa_s, pa_cf_s, noises, pi)[0]


def counterfactual_loss_var(image_scm: ImageScm, params, x, values: dict, predictors, marginals: dict,
                            seed: int, index=None, joint: bool = False):
    """L_CT on the tape, as a function of the ladder parameters ``params``."""
    model = image_scm.model
    x = np.asarray(x, dtype=float).reshape(-1, model.spec.x_dim)
    n = x.shape[0]
    index = np.arange(n) if index is None else np.asarray(index)
    if not predictors:
        return ad.Var(0.0)
    pa_s = model.standardize(image_scm.features(values))
    draws = {p.name: sample_marginal(marginals[p.name], seed, j, index) for j, p in enumerate(predictors)}
    groups = [list(predictors)] if joint else [[p] for p in predictors]
    total = ad.Var(0.0)
    for g, group in enumerate(groups):
        targets = {p.name: draws[p.name] for p in group}
        values_cf = image_scm.per_row_intervention(values, targets, seed=rng.derive_seed(seed, 7), index=index)
        pa_cf_s = model.standardize(image_scm.features(values_cf))
        noises = ladder._layer_noise(model.spec, rng.derive_seed(seed, 11, g), ladder._POSTERIOR_STREAM, index)
        x_cf = _ladder_cf_var(model, params, x, pa_s, pa_cf_s, noises, image_scm.pi)
        for p in group:
            total = total - p.log_prob_var(p.params, x_cf, targets[p.name]).mean()
    return total


def counterfactual_loss(image_scm: ImageScm, x, values: dict, predictors, marginals: dict, seed: int,
                        index=None, joint: bool = False, batch: int = 512) -> float:
    x = np.asarray(x, dtype=float).reshape(-1, image_scm.model.spec.x_dim)
    n = x.shape[0]
    if n == 0:
        return 0.0
    index = np.arange(n) if index is None else np.asarray(index)
    tot = 0.0
    for lo in range(0, n, batch):
        sl = slice(lo, min(lo + batch, n))
        vals = {k: np.asarray(v)[sl] for k, v in values.items()}
        loss = counterfactual_loss_var(image_scm, image_scm.model.params, x[sl], vals, predictors, marginals,
                                       seed, index[sl], joint)
        tot += float(loss.value) * (sl.stop - sl.start)
    return tot / n


@dataclass(frozen=True)
class LagrangeConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_lambda: float = 0.01
    damping: float = 0.1
    lambda_init: float = 0.0
    seed: int = 0
    joint: bool = False


@dataclass
class LagrangianState:
    lam: float
    c: float
    damping: float

    def multiplier(self, free_energy: float) -> float:
        """Multiplier applied to the free-energy gradient this step (damped, projected)."""
        return max(0.0, self.lam + self.damping * (free_energy - self.c))

    def ascend(self, free_energy: float, lr: float) -> "LagrangianState":
        return LagrangianState(max(0.0, self.lam + lr * (free_energy - self.c)), self.c, self.damping)


@dataclass
class FinetuneResult:
    model: ladder.LadderModel
    trace: list[tuple]   # (epoch, L_CT, F_FE, lambda)
    steps: list[tuple] = field(default_factory=list)  # (F_batch, lambda_before, lambda_after)


def finetune_constrained(image_scm: ImageScm, predictors, x, values: dict, c: float,
                         config: LagrangeConfig = LagrangeConfig(), marginals: dict | None = None,
                         log=None) -> FinetuneResult:
    """Descend the ladder parameters on L_CT + lambda F_FE; ascend lambda on F_FE - c.

    Predictors and attribute mechanisms are read but never written.
    """
    x, _ = ladder.validate_data(x, image_scm.features(values))
    model = image_scm.model
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    marginals = marginals or {p.name: np.asarray(values[p.name]) for p in predictors}
    pa_s = model.standardize(image_scm.features(values))
    keys = list(model.params)
    params = dict(model.params)
    opt = Adam(config.lr)
    state = LagrangianState(config.lambda_init, c, config.damping)
    ev = ladder.eval_seed(config.seed)
    ct_seed = rng.derive_seed(config.seed, 0xC7)

    def epoch_row(epoch, m):
        s = image_scm.with_model(m)
        l_ct = counterfactual_loss(s, x, values, predictors, marginals, ct_seed, joint=config.joint)
        f = ladder.mean_free_energy(m, x, image_scm.features(values), ev)
        return (epoch, l_ct, f, state.lam)

    trace = [epoch_row(0, model)]
    steps = []
    for epoch in range(config.epochs):
        perm = rng.permutation(config.seed, 0xF000 + epoch, n)
        ep_seed = rng.derive_seed(config.seed, 0xF1, epoch)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]
            vals = {k: np.asarray(v)[idx] for k, v in values.items()}
            noises = ladder._layer_noise(model.spec, ep_seed, ladder._TRAIN_STREAM, idx)
            step_seed = rng.derive_seed(ep_seed, b)
            box = {}

            def objective(p):
                cur = image_scm.with_model(model.with_params(p))
                l_ct = counterfactual_loss_var(cur, p, x[idx], vals, predictors, marginals, step_seed, idx,
                                               config.joint)
                fe = ladder.free_energy_var(model, p, x[idx], pa_s[idx], noises)
                box["fe"] = float(fe.value)
                box["mult"] = state.multiplier(box["fe"])
                return l_ct + box["mult"] * fe

            loss, grads = value_and_grad(objective, params, keys)
            if not np.isfinite(loss):
                raise DivergenceError(f"Lagrangian became non-finite in epoch {epoch + 1}")
            params = opt.step(params, grads)
            before = state.lam
            state = state.ascend(box["fe"], config.lr_lambda)
            steps.append((box["fe"], before, state.lam))
        model = model.with_params(params)
        trace.append(epoch_row(epoch + 1, model))
        if log:
            e, l_ct, f, lam = trace[-1]
            log(f"finetune epoch {e}/{config.epochs}: L_CT {l_ct:.4f} F_FE {f:.3f} (c {c:.3f}) lambda {lam:.4f}")
    return FinetuneResult(model, trace, steps)


def trace_csv(trace) -> str:
    lines = ["epoch,L_CT,F_FE,lambda"]
    lines += [f"{e},{l!r},{f!r},{lam!r}" for e, l, f, lam in trace]
    return "\n".join(lines) + "\n"


def entropy_of(values, kind: str) -> float:
    """Plug-in entropy of a categorical column (used as the constant H term)."""
    if kind != "categorical":
        raise ValueError("plug-in entropy is only defined here for categorical parents")
    _, counts = np.unique(np.asarray(values), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def batched_intervention(name: str, values) -> scm.Intervention:
    return scm.Intervention.hard(**{name: values})
