"""cfscm command line.

Exit codes: 0 ok, 2 usage or configuration error, 3 data or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from cfscm import cftrain, config, fileio, imagescm, ladder, modelio, scm, soundness, synthpop, vqglm
from cfscm.mechanisms import NonFiniteError
from cfscm.nets import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PARENT_KINDS = {"y": ("categorical", len(synthpop.CLASSES)), "t": ("continuous", 0), "i": ("continuous", 0)}


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- helpers ----------------------------------------------------------------------------------

def _read_data(path) -> synthpop.Dataset:
    if path is None:
        raise DataError("no dataset given (use --data or set 'data' in the config)")
    path = Path(path)
    if not (path / "images.cft").exists():
        raise DataError(f"{path}: no images.cft")
    # models never see the recorded noises
    return synthpop.read_dataset(path, with_noises=False)


def _trace_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def parse_do(text: str) -> dict:
    """``"t=2.0,y=ring"`` -> ``{"t": 2.0, "y": 2}``; the empty string is the null intervention."""
    out = {}
    text = (text or "").strip()
    if not text:
        return out
    for part in text.split(","):
        name, sep, value = part.partition("=")
        name, value = name.strip(), value.strip()
        if not sep or not name or not value:
            raise UsageError(f"cannot parse intervention {part!r}; expected name=value")
        if name in out:
            raise UsageError(f"variable {name!r} intervened twice")
        if name not in imagescm.ATTRIBUTES:
            raise scm.UnknownTarget(f"unknown variable {name!r}")
        if name == "y":
            if value in synthpop.CLASSES:
                out[name] = synthpop.CLASSES.index(value)
                continue
            try:
                out[name] = int(value)
            except ValueError:
                raise UsageError(f"y must be a class label {synthpop.CLASSES} or index, got {value!r}") from None
            if not 0 <= out[name] < len(synthpop.CLASSES):
                raise DataError(f"class index {out[name]} out of range")
        else:
            try:
                out[name] = float(value)
            except ValueError:
                raise UsageError(f"value for {name} is not a decimal number: {value!r}") from None
    return out


def _observations(model: modelio.LoadedModel, obs: str, data_override=None) -> tuple[np.ndarray, dict, np.ndarray]:
    """Resolve ``--obs``: a sample id in the model's dataset, or a dataset directory."""
    try:
        ident = int(obs)
    except ValueError:
        ds = _read_data(obs)
        return ds.images, ds.attributes, np.arange(len(ds))
    ds = _read_data(data_override or model.manifest.get("data"))
    if not 0 <= ident < len(ds):
        raise DataError(f"observation id {ident} not in dataset of {len(ds)} samples")
    sub = ds.subset([ident])
    return sub.images, sub.attributes, np.array([ident])


def _counterfactual(model: modelio.LoadedModel, x, values, targets, seed, index, pi):
    n = x.shape[0]
    per_row = {k: np.full(n, v, dtype=np.int64 if k == "y" else float) for k, v in targets.items()}
    helper = imagescm.ImageScm(model.attributes, model.ladder, pi=pi)
    values_cf = helper.per_row_intervention(values, per_row, seed, index) if per_row else dict(values)
    if model.kind == "vq-glm":
        x_cf = vqglm.latent_counterfactual(model.latent, x, values, values_cf)
    else:
        x_cf = helper.counterfactual_image(x, values, values_cf, seed, index, pi)
    return np.asarray(x_cf).reshape(n, synthpop.SIZE, synthpop.SIZE), values_cf


def _write_pgms(directory, x, x_cf):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k = min(len(x), 16)
    cols = min(k, 4)
    fileio.write_pgm(directory / "factual.pgm", fileio.image_grid(x[:k], cols))
    fileio.write_pgm(directory / "counterfactual.pgm", fileio.image_grid(x_cf[:k], cols))
    fileio.write_difference_pgm(directory / "difference.pgm", fileio.image_grid(x_cf[:k] - x[:k], cols))


# -- pipelines -------------------------------------------------------------------------------

def fit_predictors(cfg: config.RunConfig, ds: synthpop.Dataset):
    pc = cftrain.PredictorConfig(cfg.predictor.hidden, cfg.predictor.epochs, cfg.predictor.batch_size,
                                 cfg.predictor.lr, cfg.seed)
    return cftrain.fit_predictors(ds.images, ds.attributes, PARENT_KINDS, pc)


def train_pipeline(cfg: config.RunConfig, ds: synthpop.Dataset, log=None) -> dict:
    """Attribute SCM, then the image model, then the parent predictors."""
    if len(ds) == 0:
        raise DataError("cannot train on an empty dataset")
    attributes, _ = imagescm.fit_attributes(ds.attributes, seed=cfg.seed)
    helper = imagescm.ImageScm(attributes, None, pi=cfg.pi)
    out = {"attributes": attributes}
    if cfg.variant == "vq-glm":
        cb = cfg.codebook
        out["latent"] = vqglm.fit_latent_scm(ds.images, ds.attributes, {"y": len(synthpop.CLASSES)},
                                             cb.latent_dim, cb.size, cb.iterations, cb.delta, cfg.seed)
        out["trace"] = []
    else:
        pa = helper.features(ds.attributes)
        mean, std = imagescm.parent_feature_stats(helper, ds.attributes)
        spec = ladder.LadderSpec(cfg.variant, synthpop.SIZE ** 2, pa.shape[1], tuple(cfg.z_dims), cfg.h_dim,
                                 cfg.bu_dim, cfg.hidden)
        model = ladder.LadderModel.create(spec, cfg.seed, mean, std, ds.images.reshape(len(ds), -1).mean(axis=0))
        tc = ladder.TrainConfig(cfg.optimizer.epochs, cfg.optimizer.batch_size, cfg.optimizer.lr, seed=cfg.seed)
        res = ladder.train(model, ds.images, pa, tc, log)
        out["ladder"], out["trace"], out["c"] = res.model, res.trace, res.c
    out["predictors"], out["predictor_traces"] = fit_predictors(cfg, ds)
    return out


def _write_train(out_dir, cfg, data_path, result) -> None:
    out_dir = Path(out_dir)
    manifest = {"kind": cfg.variant, "config": cfg.to_json(), "data": str(Path(data_path).resolve()),
                "seed": cfg.seed, "pi": cfg.pi}
    if "c" in result:
        manifest["c"] = result["c"]
    modelio.write_model(out_dir, manifest, result["attributes"], result["predictors"],
                        result.get("ladder"), result.get("latent"))
    (out_dir / "train_trace.csv").write_text(_trace_csv(["epoch", "F_FE"], enumerate(result["trace"])))
    rows = [(name, e, v) for name, tr in result["predictor_traces"].items() for e, v in enumerate(tr)]
    (out_dir / "predictor_trace.csv").write_text(_trace_csv(["parent", "epoch", "nll"], rows))


# -- commands -----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = config.resolve_seed(args.seed, 0)
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    ds = synthpop.generate(seed, args.n)
    try:
        synthpop.write_dataset(ds, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from exc
    _log(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config.load(args.config, args.seed)
    data = args.data or cfg.data
    ds = _read_data(data)
    result = train_pipeline(cfg, ds, _log)
    _write_train(args.out, cfg, data, result)
    return EXIT_OK


def cmd_finetune(args) -> int:
    model = modelio.read_model(args.model)
    if model.kind != ladder.MEDIATOR and model.kind != ladder.EXOGENOUS:
        raise ladder.VariantError("fine-tuning needs a ladder model")
    cfg = (config.load(args.config, args.seed) if args.config
           else config.with_seed(config.from_json(model.manifest["config"]),
                                 config.resolve_seed(args.seed, model.manifest["seed"])))
    ds = _read_data(args.data or model.manifest["data"])
    lc = cfg.lagrangian
    lcfg = cftrain.LagrangeConfig(lc.epochs, cfg.optimizer.batch_size, lc.lr_model, lc.lr, lc.damping, lc.init,
                                  int(model.manifest["seed"]), lc.joint)
    res = cftrain.finetune_constrained(model.image_scm(), model.predictors, ds.images, ds.attributes,
                                       float(model.manifest["c"]), lcfg, log=_log)
    out = Path(args.out)
    manifest = {k: v for k, v in model.manifest.items() if k not in ("attributes", "predictors", "ladder", "format")}
    manifest["finetune"] = {"config": cfg.lagrangian.__dict__ | {"seed": lcfg.seed}, "final": list(res.trace[-1])}
    modelio.write_model(out, manifest, model.attributes, model.predictors, res.model)
    (out / "finetune_trace.csv").write_text(cftrain.trace_csv(res.trace))
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    model = modelio.read_model(args.model)
    targets = parse_do(args.do)
    x, values, index = _observations(model, args.obs, args.data)
    seed = config.resolve_seed(args.seed, int(model.manifest["seed"]))
    pi = model.pi if args.pi is None else args.pi
    x_cf, values_cf = _counterfactual(model, x, values, targets, seed, index, pi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_cft1(out / "x_cf.cft", x_cf)
    summary = {
        "model": model.kind,
        "null_intervention": not targets,
        "intervention": {k: (synthpop.CLASSES[v] if k == "y" else v) for k, v in targets.items()},
        "n": int(len(x)),
        "counterfactual_parents": {k: [float(v) for v in np.asarray(values_cf[k])] for k in imagescm.ATTRIBUTES},
        "effect_l1": float(np.abs(x_cf - x).reshape(len(x), -1).sum(axis=1).mean()) if len(x) else 0.0,
    }
    if model.kind == ladder.MEDIATOR:
        helper = model.image_scm()
        rep = ladder.effects(model.ladder, x, helper.features(values), helper.features(values_cf), pi, seed, index)
        summary["effect_norms"] = rep.norms
    if args.pgm:
        _write_pgms(args.pgm, x, x_cf)
    fileio.dump_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_effects(args) -> int:
    model = modelio.read_model(args.model)
    if model.kind != ladder.MEDIATOR:
        raise ladder.VariantError(f"effects need a mediator model, {args.model} is {model.kind!r}")
    targets = parse_do(args.do)
    x, values, index = _observations(model, args.obs, args.data)
    seed = config.resolve_seed(args.seed, int(model.manifest["seed"]))
    pi = model.pi if args.pi is None else args.pi
    helper = model.image_scm()
    n = x.shape[0]
    per_row = {k: np.full(n, v, dtype=np.int64 if k == "y" else float) for k, v in targets.items()}
    values_cf = helper.per_row_intervention(values, per_row, seed, index) if per_row else dict(values)
    pa, pa_cf = helper.features(values), helper.features(values_cf)
    rep = ladder.effects(model.ladder, x, pa, pa_cf, pi, seed, index)
    gap = rep.telescoping_gap()
    if gap > 1e-9:
        raise DivergenceError(f"telescoping identity violated by {gap:.3e}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = (n, synthpop.SIZE, synthpop.SIZE)
    for name in ("de", "ie", "te"):
        fileio.write_cft1(out / f"{name}.cft", getattr(rep, name).reshape(shape))
    norms = {k: float(v) for k, v in rep.norms.items()}
    fileio.dump_json(out / "norms.json", norms)
    print(json.dumps(norms, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.suite != "soundness":
        raise UsageError(f"unknown suite {args.suite!r}")
    ds = _read_data(args.dataset)
    models = [modelio.read_model(m) for m in args.models]
    if not models:
        raise UsageError("need at least one --models entry")
    adapters = []
    for path, m in zip(args.models, models):
        name = Path(path).name
        if m.kind == "vq-glm":
            a = soundness.VqGlmAdapter(m.latent, m.attributes)
        else:
            a = soundness.LadderAdapter(m.image_scm())
        a.name = name
        adapters.append(a)
    seed = config.resolve_seed(args.seed, int(models[0].manifest["seed"]))
    reports = soundness.evaluate_suite(adapters, models[0].predictors, ds.images, ds.attributes, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(soundness.reports_json(reports))
    (out / "report.csv").write_text(soundness.reports_csv(reports))
    for r in reports:
        for flag in r.flags:
            _log(f"warning [{r.model}]: {flag}")
    return EXIT_OK


def _read_matrix_csv(path) -> np.ndarray:
    rows = [r for r in csv.reader(Path(path).read_text().splitlines()) if r]
    if not rows:
        raise DataError(f"{path}: empty CSV")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_tensor(path) -> np.ndarray:
    arr = fileio.read_cft1(path)
    return arr[:, None] if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)


def cmd_glm(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.glm_cmd == "fit":
        delta = args.delta if args.jitter else 0.0
        params = vqglm.glm_fit(_read_tensor(args.z), _read_matrix_csv(args.p), delta)
        fileio.write_cft1(out, params.b)
    elif args.glm_cmd == "abduct":
        b = _read_tensor(args.b)
        fileio.write_cft1(out, vqglm.glm_abduct(vqglm.GlmParams(b), _read_tensor(args.z), _read_matrix_csv(args.p)))
    elif args.glm_cmd == "predict":
        b = _read_tensor(args.b)
        fileio.write_cft1(out, vqglm.glm_predict(vqglm.GlmParams(b), _read_tensor(args.u), _read_matrix_csv(args.p_cf)))
    else:
        params = vqglm.GlmParams(_read_tensor(args.b))
        u = vqglm.glm_abduct(params, _read_tensor(args.z), _read_matrix_csv(args.p))
        fileio.write_cft1(out, vqglm.glm_predict(params, u, _read_matrix_csv(args.p_cf)))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfscm", description=__doc__,
                                epilog=config.defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic ground-truth dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000, help="number of samples (default 2000)")
    s.add_argument("--seed", type=int, default=None, help="default: $CFSCM_SEED or 0")
    s.set_defaults(func=cmd_synth)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help="overrides $CFSCM_SEED and the config seed")

    s = sub.add_parser("train", help="fit the attribute SCM, the image model and the parent predictors",
                       epilog=config.defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", default=None, help="RunConfig JSON (defaults below)")
    s.add_argument("--data", default=None)
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="constrained counterfactual fine-tuning of a ladder model")
    s.add_argument("--model", required=True)
    s.add_argument("--config", default=None, help="default: the config stored with the model")
    s.add_argument("--data", default=None, help="default: the dataset the model was trained on")
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_finetune)

    for name, func, helptext in (("counterfactual", cmd_counterfactual, "counterfactual images under do(...)"),
                                 ("effects", cmd_effects, "direct / indirect / total effects (mediator models)")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--model", required=True)
        s.add_argument("--obs", required=True, help="sample id in the model's dataset, or a dataset directory")
        s.add_argument("--do", required=True, help='e.g. "t=2.0,y=ring"; "" is the null intervention')
        s.add_argument("--pi", type=float, default=None, help="mixture weight (default: the model's)")
        s.add_argument("--data", default=None)
        s.add_argument("--out", required=True)
        if name == "counterfactual":
            s.add_argument("--pgm", default=None, help="directory for PGM image grids")
        seeded(s)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="soundness report over model directories")
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--suite", default="soundness")
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("glm", help="closed-form GLM steps on CFT1 tensors and CSV design matrices")
    gs = g.add_subparsers(dest="glm_cmd", required=True)
    f = gs.add_parser("fit", help="B from Z and P")
    f.add_argument("--z", required=True)
    f.add_argument("--p", required=True)
    f.add_argument("--jitter", action="store_true", help="allow the ridge jitter on singular systems")
    f.add_argument("--delta", type=float, default=1e-8)
    f.add_argument("--out", required=True)
    a = gs.add_parser("abduct", help="U_Z = Z - P B")
    a.add_argument("--b", required=True)
    a.add_argument("--z", required=True)
    a.add_argument("--p", required=True)
    a.add_argument("--out", required=True)
    pr = gs.add_parser("predict", help="Z_cf = U_Z + P_cf B")
    pr.add_argument("--b", required=True)
    pr.add_argument("--u", required=True)
    pr.add_argument("--p-cf", required=True)
    pr.add_argument("--out", required=True)
    c = gs.add_parser("counterfactual", help="abduct then predict")
    c.add_argument("--b", required=True)
    c.add_argument("--z", required=True)
    c.add_argument("--p", required=True)
    c.add_argument("--p-cf", required=True)
    c.add_argument("--out", required=True)
    g.set_defaults(func=cmd_glm)
    return p


_USAGE = (UsageError, config.ConfigError, ladder.VariantError)
_DATA = (DataError, OSError, fileio.FormatError, scm.UnknownTarget, scm.MissingEvidence, scm.EvidenceError,
         synthpop.UnknownId, KeyError)
_NUMERIC = (DivergenceError, vqglm.SingularMatrix, NonFiniteError, FloatingPointError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("cfscm: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except Exception as exc:  # mapped onto the exit-code contract below
        code, kind = _classify(exc)
        print(f"cfscm: {kind}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, _USAGE):
        return EXIT_USAGE, "usage error"
    if isinstance(exc, _NUMERIC):
        return EXIT_NUMERIC, "numerical failure"
    if isinstance(exc, _DATA + (ValueError,)):
        return EXIT_DATA, "data error"
    raise exc

if __name__ == "__main__":
    sys.exit(main())
