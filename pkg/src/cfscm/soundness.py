"""Soundness harness: composition, effectiveness, reversibility, oracle error, Cohen's d.

Every counterfactual generator is wrapped in an adapter with one method::

    adapter.counterfactual(x, values, targets, seed, index) -> (x_cf, values_cf)

``values`` holds the factual attribute columns, ``targets`` maps intervened
attributes to per-row values (empty for the null intervention), and
``values_cf`` are the counterfactual attributes the adapter believes in
(downstream attributes recomputed by its own attribute model).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from cfscm import rng, synthpop, vqglm
from cfscm.cftrain import sample_marginal
from cfscm.imagescm import ImageScm

SIZE = synthpop.SIZE


class ZeroVariance(ValueError):
    pass


def _as_images(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape[0], SIZE, SIZE)


def _copy_values(values) -> dict:
    return {k: np.asarray(v).copy() for k, v in values.items()}


# -- adapters -------------------------------------------------------------------------------

class OracleAdapter:
    """The ground-truth mechanisms, with every noise abducted exactly from (x, y, t, i)."""

    name = "oracle"

    def counterfactual(self, x, values, targets, seed=0, index=None):
        x = _as_images(x)
        if not targets:
            return x.copy(), _copy_values(values)
        y, t, i = (np.asarray(values[k], dtype=float) for k in ("y", "t", "i"))
        frac = (i - synthpop.I_MIN) / (synthpop.I_MAX - synthpop.I_MIN)
        u_i = (np.log(frac) - np.log1p(-frac) + 5.0 - 2.0 * t) / 0.5
        u_x = (x - synthpop.render(y.astype(np.int64), t, i)) / synthpop.PIXEL_SIGMA
        y_cf = np.asarray(targets.get("y", y)).astype(np.int64)
        t_cf = np.asarray(targets["t"], dtype=float) if "t" in targets else t.copy()
        if "i" in targets:
            i_cf = np.asarray(targets["i"], dtype=float)
        elif "t" in targets:
            i_cf = synthpop.intensity(t_cf, u_i)
        else:
            i_cf = i.copy()
        x_cf = synthpop.render(y_cf, t_cf, i_cf) + synthpop.PIXEL_SIGMA * u_x
        same = (y_cf == y) & (t_cf == t) & (i_cf == i)
        x_cf[same] = x[same]
        return x_cf, {"y": y_cf, "t": t_cf, "i": i_cf}


class IdentityAdapter:
    """Negative control: ignores the intervention and returns the factual image."""

    name = "identity"

    def counterfactual(self, x, values, targets, seed=0, index=None):
        out = _copy_values(values)
        out.update({k: np.asarray(v) for k, v in targets.items()})
        return _as_images(x).copy(), out


class LadderAdapter:
    def __init__(self, image_scm: ImageScm, pi: float | None = None, name: str | None = None):
        self.scm = image_scm
        self.pi = image_scm.pi if pi is None else pi
        self.name = name or f"ladder-{image_scm.model.variant}"

    def counterfactual(self, x, values, targets, seed=0, index=None):
        x = _as_images(x)
        index = np.arange(x.shape[0]) if index is None else np.asarray(index)
        values_cf = self.scm.per_row_intervention(values, targets, seed, index) if targets else _copy_values(values)
        x_cf = self.scm.counterfactual_image(x, values, values_cf, seed, index, self.pi)
        return _as_images(x_cf), values_cf


class VqGlmAdapter:
    name = "vq-glm"

    def __init__(self, model: vqglm.LatentScm, attributes):
        self.model = model
        self.attributes = ImageScm(attributes, None)

    def counterfactual(self, x, values, targets, seed=0, index=None):
        x = _as_images(x)
        index = np.arange(x.shape[0]) if index is None else np.asarray(index)
        values_cf = (self.attributes.per_row_intervention(values, targets, seed, index) if targets
                     else _copy_values(values))
        x_cf = vqglm.latent_counterfactual(self.model, x, values, values_cf)
        return _as_images(x_cf), values_cf


# -- metrics --------------------------------------------------------------------------------

def _l1(a, b) -> float:
    """Per-sample summed absolute difference, averaged over samples."""
    a, b = _as_images(a), _as_images(b)
    if a.shape[0] == 0:
        return 0.0
    return float(np.abs(a - b).reshape(a.shape[0], -1).sum(axis=1).mean())


def composition_metric(adapter, x, values, m: int, seed: int = 0) -> float:
    """Mean L1 between x and the result of m repeated null interventions."""
    if m < 0:
        raise ValueError("m must be non-negative")
    x = _as_images(x)
    cur = x
    for cycle in range(m):
        cur, _ = adapter.counterfactual(cur, values, {}, rng.derive_seed(seed, cycle))
    return _l1(x, cur)


def draw_targets(parent: str, marginal, seed: int, index) -> dict:
    return {parent: sample_marginal(marginal, seed, 17, index)}


def effectiveness_metric(adapter, predictor, x, values, parent: str, marginal, seed: int = 0) -> float:
    """Median |psi(x_cf) - do value| for continuous parents, accuracy for categorical ones."""
    x = _as_images(x)
    index = np.arange(x.shape[0])
    targets = draw_targets(parent, marginal, seed, index)
    x_cf, _ = adapter.counterfactual(x, values, targets, seed, index)
    pred = predictor.predict(x_cf.reshape(x_cf.shape[0], -1))
    if predictor.kind == "categorical":
        return float(np.mean(pred == targets[parent]))
    return float(np.median(np.abs(pred - targets[parent])))


def reversibility_metric(adapter, x, values, parent: str, marginal, seed: int = 0) -> float:
    """Mean L1 between x and do(pa_k := sampled) followed by do(pa_k := factual)."""
    x = _as_images(x)
    index = np.arange(x.shape[0])
    targets = draw_targets(parent, marginal, seed, index)
    x_cf, values_cf = adapter.counterfactual(x, values, targets, seed, index)
    back, _ = adapter.counterfactual(x_cf, values_cf, {parent: np.asarray(values[parent])},
                                     rng.derive_seed(seed, 1), index)
    return _l1(x, back)


def oracle_metric(adapter, x, values, parent: str, marginal, seed: int = 0) -> float:
    """Mean L1 between the adapter's counterfactual and the ground-truth one."""
    x = _as_images(x)
    index = np.arange(x.shape[0])
    targets = draw_targets(parent, marginal, seed, index)
    x_cf, _ = adapter.counterfactual(x, values, targets, seed, index)
    truth, _ = OracleAdapter().counterfactual(x, values, targets, seed, index)
    return _l1(x_cf, truth)


def cohens_d(a, b) -> float:
    """(mean_a - mean_b) / pooled standard deviation."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if not pooled > 0:
        raise ZeroVariance("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def attribute_cohens_d(adapter, predictor, x, values, parent: str, marginal, seed: int = 0) -> float:
    """d between predictor read-outs of model and oracle counterfactual populations under do(parent)."""
    x = _as_images(x)
    index = np.arange(x.shape[0])
    targets = draw_targets(parent, marginal, seed, index)
    x_cf, _ = adapter.counterfactual(x, values, targets, seed, index)
    truth, _ = OracleAdapter().counterfactual(x, values, targets, seed, index)
    return cohens_d(predictor.predict(x_cf.reshape(len(x_cf), -1)), predictor.predict(truth.reshape(len(truth), -1)))


# -- report ---------------------------------------------------------------------------------

@dataclass
class SoundnessReport:
    model: str
    composition_l1: dict = field(default_factory=dict)     # m -> value
    effectiveness: dict = field(default_factory=dict)      # parent -> MAE or accuracy
    reversibility_l1: dict = field(default_factory=dict)   # parent -> value
    oracle_l1: dict = field(default_factory=dict)          # parent -> value
    cohens_d: dict = field(default_factory=dict)           # parent -> value
    flags: list = field(default_factory=list)

    def rows(self):
        for metric in ("composition_l1", "effectiveness", "reversibility_l1", "oracle_l1", "cohens_d"):
            for key, value in getattr(self, metric).items():
                yield self.model, metric, str(key), value

    def to_json(self) -> dict:
        out = {"model": self.model, "flags": list(self.flags)}
        for metric in ("composition_l1", "effectiveness", "reversibility_l1", "oracle_l1", "cohens_d"):
            out[metric] = {str(k): float(v) for k, v in getattr(self, metric).items()}
        return out


def evaluate(adapter, predictors, x, values, seed: int = 0, cycles=(1, 5, 10), marginals=None,
             with_oracle: bool = True) -> SoundnessReport:
    marginals = marginals or {p.name: np.asarray(values[p.name]) for p in predictors}
    rep = SoundnessReport(adapter.name)
    for m in cycles:
        rep.composition_l1[m] = composition_metric(adapter, x, values, m, seed)
    comp = [rep.composition_l1[m] for m in sorted(rep.composition_l1)]
    if any(b < a for a, b in zip(comp, comp[1:])):
        rep.flags.append("composition error decreased with more cycles")
    for j, p in enumerate(predictors):
        s = rng.derive_seed(seed, 100 + j)
        rep.effectiveness[p.name] = effectiveness_metric(adapter, p, x, values, p.name, marginals[p.name], s)
        rep.reversibility_l1[p.name] = reversibility_metric(adapter, x, values, p.name, marginals[p.name], s)
        if with_oracle:
            rep.oracle_l1[p.name] = oracle_metric(adapter, x, values, p.name, marginals[p.name], s)
            if p.kind != "categorical":
                rep.cohens_d[p.name] = attribute_cohens_d(adapter, p, x, values, p.name, marginals[p.name], s)
    return rep


def better(predictor, a: float, b: float) -> bool:
    """True when effectiveness score ``a`` is strictly better than ``b``."""
    return a > b if predictor.kind == "categorical" else a < b


def evaluate_suite(adapters, predictors, x, values, seed: int = 0, cycles=(1, 5, 10)) -> list[SoundnessReport]:
    """Reports for the oracle, the ignore-intervention control and every model adapter.

    Flags the oracle report if it fails to beat the control on any parent.
    """
    reports = [evaluate(a, predictors, x, values, seed, cycles) for a in [OracleAdapter(), IdentityAdapter(), *adapters]]
    oracle, control = reports[0], reports[1]
    for p in predictors:
        if not better(p, oracle.effectiveness[p.name], control.effectiveness[p.name]):
            oracle.flags.append(f"oracle does not beat the ignore-intervention control on {p.name}")
    return reports


def reports_json(reports) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "key", "value"])
    for r in reports:
        for model, metric, key, value in r.rows():
            w.writerow([model, metric, key, repr(float(value))])
    return buf.getvalue()
