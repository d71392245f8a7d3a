"""An attribute SCM plus a ladder mechanism for the image node.

The attribute part (y, t, i) is an ordinary :class:`~cfscm.scm.ScmGraph`; the
image x hangs off it through :class:`~cfscm.ladder.LadderMechanism`.  Helpers
here turn attribute columns into the ladder's parent features and compute
counterfactual parents (downstream attributes recomputed) for a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cfscm import ladder, scm
from cfscm.mechanisms import AffineFlowMechanism, CategoricalMechanism, FitConfig, Transform
from cfscm.synthpop import CLASSES, I_MAX, I_MIN, SIZE

ATTRIBUTES = ("y", "t", "i")


def attribute_graph(seed: int = 0) -> scm.ScmGraph:
    """Untrained attribute SCM with the y, t -> i structure of the synthetic population.

    Thickness is modelled on the log scale and intensity on a logit scale over
    its known range, so the affine family can represent both mechanisms.
    """
    nodes = [scm.VariableSpec("y", "categorical", k=len(CLASSES)),
             scm.VariableSpec("t", units="pixels"),
             scm.VariableSpec("i", units="grey level")]
    parents = {"y": (), "t": (), "i": ("t",)}
    mechs = {
        "y": CategoricalMechanism.create(0, len(CLASSES), seed=seed, stream=0),
        "t": AffineFlowMechanism.create(0, transform=Transform("log"), seed=seed, stream=1),
        "i": AffineFlowMechanism.create(1, transform=Transform("logit", I_MIN, I_MAX), seed=seed, stream=2),
    }
    return scm.ScmGraph(nodes, parents, mechs)


def fit_attributes(columns: dict, seed: int = 0, config: FitConfig | None = None):
    config = config or FitConfig(lr=0.05, epochs=1500)
    return scm.fit_scm(attribute_graph(seed), {k: columns[k] for k in ATTRIBUTES}, config)


@dataclass(frozen=True)
class ImageScm:
    attributes: scm.ScmGraph
    model: ladder.LadderModel
    parents: tuple = ATTRIBUTES
    pi: float = 0.9

    def features(self, values: dict) -> np.ndarray:
        cols = [self.attributes.specs[p].encode(np.asarray(values[p])) for p in self.parents]
        return np.concatenate(cols, axis=1)

    def with_model(self, model) -> "ImageScm":
        return ImageScm(self.attributes, model, self.parents, self.pi)

    def counterfactual_parents(self, values: dict, iv: scm.Intervention, seed: int = 0, index=None) -> dict:
        if not iv:
            return {k: np.asarray(values[k]) for k in self.parents}
        cols = {k: np.asarray(values[k]) for k in self.attributes.names}
        out, _ = scm.counterfactual_batch(self.attributes, cols, iv, seed, index)
        return out

    def per_row_intervention(self, values: dict, targets: dict, seed: int = 0, index=None) -> dict:
        """Counterfactual parents when each row gets its own ``do`` value.

        ``targets`` maps a parent name to an array of per-row values.  The rows
        are processed together: abduction once, then a vector-valued constant.
        """
        cols = {k: np.asarray(values[k]) for k in self.attributes.names}
        n = len(next(iter(cols.values())))
        index = np.arange(n) if index is None else np.asarray(index)
        exo = scm.abduct_batch(self.attributes, cols, seed, index)
        out = {}
        affected = set(targets) | self.attributes.descendants(targets)
        for name in self.attributes.order:
            if name in targets:
                out[name] = np.asarray(targets[name])
            elif name not in affected:
                out[name] = cols[name]
            else:
                pa = self.attributes.encode_parents(name, out, n)
                out[name] = self.attributes.mechanisms[name].forward(pa, exo[name])
        return out

    def counterfactual_image(self, x, values: dict, values_cf: dict, seed: int = 0, index=None, pi=None):
        pa, pa_cf = self.features(values), self.features(values_cf)
        if self.model.variant == ladder.EXOGENOUS:
            return ladder.counterfactual_exogenous(self.model, x, pa, pa_cf, seed, index)
        x_cf, _ = ladder.counterfactual_mediator(self.model, x, pa, pa_cf, self.pi if pi is None else pi, seed, index)
        return x_cf

    def full_graph(self) -> scm.ScmGraph:
        """The whole SCM, image node included, for the generic scm-core operations."""
        nodes = list(self.attributes.nodes) + [scm.VariableSpec("x", "tensor", shape=(SIZE, SIZE))]
        parents = dict(self.attributes.parents)
        parents["x"] = tuple(self.parents)
        mechs = dict(self.attributes.mechanisms)
        mechs["x"] = ladder.LadderMechanism(self.model, self.pi)
        return scm.ScmGraph(nodes, parents, mechs)


def parent_feature_stats(scm_: ImageScm, values: dict):
    f = scm_.features(values)
    std = f.std(axis=0)
    return f.mean(axis=0), np.where(std > 0, std, 1.0)
