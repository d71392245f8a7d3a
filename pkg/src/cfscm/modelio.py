"""Model directories: a manifest.json plus one CFT1 parameter blob per component.

Each blob is the concatenation of a parameter dict's arrays in sorted key
order; the manifest records the keys and shapes needed to cut it back up.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from cfscm import fileio, ladder, scm, vqglm
from cfscm.cftrain import ParentPredictor
from cfscm.imagescm import ImageScm, attribute_graph
from cfscm.mechanisms import AffineFlowMechanism, CategoricalMechanism, Transform
from cfscm.nets import ParamFn

FORMAT = "cfscm-model/1"
MANIFEST = "manifest.json"


def save_params(directory: Path, name: str, params: dict) -> dict:
    keys = sorted(params)
    blob = np.concatenate([np.asarray(params[k], float).ravel() for k in keys]) if keys else np.zeros(0)
    fileio.write_cft1(directory / f"{name}.cft", blob)
    return {"file": f"{name}.cft", "shapes": {k: list(np.shape(params[k])) for k in keys}}


def load_params(directory: Path, entry: dict) -> dict:
    blob = fileio.read_cft1(directory / entry["file"])
    out, pos = {}, 0
    for key in sorted(entry["shapes"]):
        shape = tuple(entry["shapes"][key])
        size = int(np.prod(shape)) if shape else 1
        out[key] = blob[pos:pos + size].reshape(shape)
        pos += size
    if pos != blob.size:
        raise fileio.FormatError(f"{entry['file']}: parameter blob has {blob.size - pos} extra values")
    return out


def _mechanism_doc(directory: Path, name: str, mech) -> dict:
    if isinstance(mech, CategoricalMechanism):
        doc = {"type": "categorical", "k": mech.k, "n_inputs": mech.n_inputs, "hidden": mech.logits.hidden}
    else:
        doc = {"type": "affine", "n_inputs": mech.n_inputs, "hidden": mech.loc.hidden,
               "transform": mech.transform.to_json()}
    doc["params"] = save_params(directory, f"attr_{name}", mech.params)
    return doc


def _mechanism_from_doc(directory: Path, doc: dict):
    params = load_params(directory, doc["params"])
    if doc["type"] == "categorical":
        return CategoricalMechanism(ParamFn("logits", doc["n_inputs"], doc["k"], doc["hidden"]), params)
    return AffineFlowMechanism(ParamFn("loc", doc["n_inputs"], 1, doc["hidden"]),
                               ParamFn("logscale", doc["n_inputs"], 1, doc["hidden"]),
                               params, Transform(**doc["transform"]))


def save_attributes(directory: Path, graph: scm.ScmGraph) -> dict:
    return {name: _mechanism_doc(directory, name, graph.mechanisms[name]) for name in graph.names}


def load_attributes(directory: Path, docs: dict) -> scm.ScmGraph:
    template = attribute_graph()
    return template.replace(mechanisms={name: _mechanism_from_doc(directory, d) for name, d in docs.items()})


def save_predictors(directory: Path, predictors) -> list:
    out = []
    for p in predictors:
        out.append({"name": p.name, "kind": p.kind, "in_dim": p.net.in_dim, "out_dim": p.net.out_dim,
                    "hidden": p.net.hidden, "target_mean": p.target_mean, "target_std": p.target_std,
                    "params": save_params(directory, f"predictor_{p.name}", p.params)})
    return out


def load_predictors(directory: Path, docs: list) -> list:
    return [ParentPredictor(d["name"], d["kind"], ParamFn("psi", d["in_dim"], d["out_dim"], d["hidden"]),
                            load_params(directory, d["params"]), d["target_mean"], d["target_std"])
            for d in docs]


def save_ladder(directory: Path, model: ladder.LadderModel) -> dict:
    return {"spec": model.spec.to_json(), "pa_mean": [float(v) for v in model.pa_mean],
            "pa_std": [float(v) for v in model.pa_std], "params": save_params(directory, "ladder", model.params)}


def load_ladder(directory: Path, doc: dict) -> ladder.LadderModel:
    spec_doc = dict(doc["spec"])
    spec_doc["z_dims"] = tuple(spec_doc["z_dims"])
    return ladder.LadderModel(ladder.LadderSpec(**spec_doc), load_params(directory, doc["params"]),
                              np.array(doc["pa_mean"], float), np.array(doc["pa_std"], float))


def save_latent(directory: Path, model: vqglm.LatentScm) -> dict:
    ae = model.autoencoder
    return {
        "autoencoder": save_params(directory, "autoencoder",
                                   {"mean": ae.mean, "encoder": ae.encoder, "decoder": ae.decoder}),
        "codebook": save_params(directory, "codebook", {"entries": model.codebook.entries}),
        "glm": save_params(directory, "glm", {"B": model.glm.b}),
        "delta": model.glm.delta,
        "design": model.design.to_json(),
    }


def load_latent(directory: Path, doc: dict) -> vqglm.LatentScm:
    ae = load_params(directory, doc["autoencoder"])
    cb = load_params(directory, doc["codebook"])["entries"]
    b = load_params(directory, doc["glm"])["B"]
    return vqglm.LatentScm(vqglm.LinearAutoencoder(ae["mean"], ae["encoder"], ae["decoder"]),
                           vqglm.Codebook(cb), vqglm.DesignMatrix.from_json(doc["design"]),
                           vqglm.GlmParams(b, doc["delta"], b.copy()))


class LoadedModel:
    """What a model directory holds, ready for counterfactual queries."""

    def __init__(self, directory, manifest, attributes, predictors, ladder_model=None, latent=None):
        self.directory = Path(directory)
        self.manifest = manifest
        self.attributes = attributes
        self.predictors = predictors
        self.ladder = ladder_model
        self.latent = latent

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def pi(self) -> float:
        return float(self.manifest.get("pi", 0.9))

    def image_scm(self) -> ImageScm:
        return ImageScm(self.attributes, self.ladder, pi=self.pi)


def write_model(directory, manifest: dict, attributes, predictors, ladder_model=None, latent=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = dict(manifest)
    doc["format"] = FORMAT
    doc["attributes"] = save_attributes(directory, attributes)
    doc["predictors"] = save_predictors(directory, predictors)
    if ladder_model is not None:
        doc["ladder"] = save_ladder(directory, ladder_model)
    if latent is not None:
        doc["latent"] = save_latent(directory, latent)
    fileio.dump_json(directory / MANIFEST, doc)
    return directory


def read_model(directory) -> LoadedModel:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{directory} is not a model directory (no {MANIFEST})")
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT:
        raise fileio.FormatError(f"{path}: unsupported model format {doc.get('format')!r}")
    attributes = load_attributes(directory, doc["attributes"])
    predictors = load_predictors(directory, doc["predictors"])
    lad = load_ladder(directory, doc["ladder"]) if "ladder" in doc else None
    lat = load_latent(directory, doc["latent"]) if "latent" in doc else None
    return LoadedModel(directory, doc, attributes, predictors, lad, lat)
