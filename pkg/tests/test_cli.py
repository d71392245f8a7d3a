import json

import numpy as np
import pytest

from cfscm import cli, fileio

TINY = {"z_dims": [2, 3], "h_dim": 4, "bu_dim": 4, "hidden": 6,
        "optimizer": {"epochs": 1, "batch_size": 16},
        "predictor": {"hidden": 6, "epochs": 1, "batch_size": 16},
        "lagrangian": {"epochs": 1},
        "codebook": {"latent_dim": 4, "size": 8, "iterations": 3}}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--n", 48, "--seed", 4) == 0
    for variant in ("mediator", "exogenous", "vq-glm"):
        cfg = root / f"{variant}.json"
        cfg.write_text(json.dumps(dict(TINY, variant=variant)))
        assert run("train", "--config", cfg, "--data", root / "data", "--out", root / variant) == 0
    return root


def test_synth(tmp_path):
    assert run("synth", "--out", tmp_path / "a", "--n", 0) == 0
    assert fileio.read_cft1(tmp_path / "a" / "images.cft").shape == (0, 16, 16)
    run("synth", "--out", tmp_path / "b", "--n", 5, "--seed", 1)
    run("synth", "--out", tmp_path / "c", "--n", 5, "--seed", 1)
    assert (tmp_path / "b" / "images.cft").read_bytes() == (tmp_path / "c" / "images.cft").read_bytes()
    assert run("synth", "--n", 5) == 2


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("CFSCM_SEED", "9")
    run("synth", "--out", tmp_path / "env", "--n", 3)
    run("synth", "--out", tmp_path / "nine", "--n", 3, "--seed", 9)
    run("synth", "--out", tmp_path / "flag", "--n", 3, "--seed", 2)
    env = (tmp_path / "env" / "images.cft").read_bytes()
    assert env == (tmp_path / "nine" / "images.cft").read_bytes()
    assert env != (tmp_path / "flag" / "images.cft").read_bytes()


def test_train_is_reproducible(work, tmp_path):
    assert run("train", "--config", work / "mediator.json", "--data", work / "data", "--out", tmp_path / "m") == 0
    for f in ("ladder.cft", "attr_t.cft", "predictor_y.cft"):
        assert (tmp_path / "m" / f).read_bytes() == (work / "mediator" / f).read_bytes()
    assert (work / "mediator" / "train_trace.csv").read_text().startswith("epoch,F_FE")


def test_config_errors(work, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"variant": "nope"}))
    assert run("train", "--config", bad, "--data", work / "data", "--out", tmp_path / "x") == 2
    bad.write_text(json.dumps({"mystery": 1}))
    assert run("train", "--config", bad, "--data", work / "data", "--out", tmp_path / "x") == 2
    assert run("train", "--config", work / "mediator.json", "--data", tmp_path / "missing", "--out", tmp_path / "x") == 3
    assert run("--threads", 0, "synth", "--out", tmp_path / "t") == 2


def test_finetune_writes_lambda_trace(work, tmp_path):
    assert run("finetune", "--model", work / "mediator", "--out", tmp_path / "ft") == 0
    lines = (tmp_path / "ft" / "finetune_trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,L_CT,F_FE,lambda" and len(lines) == 3
    assert run("finetune", "--model", work / "vq-glm", "--out", tmp_path / "ft2") == 2


def test_counterfactual(work, tmp_path, capsys):
    out = tmp_path / "cf"
    assert run("counterfactual", "--model", work / "mediator", "--obs", 3, "--do", "t=2.0,y=ring",
               "--out", out, "--pgm", tmp_path / "pgm") == 0
    assert fileio.read_cft1(out / "x_cf.cft").shape == (1, 16, 16)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["intervention"] == {"t": 2.0, "y": "ring"}
    assert (tmp_path / "pgm" / "difference.pgm").read_bytes().startswith(b"P5")
    assert run("counterfactual", "--model", work / "exogenous", "--obs", 0, "--do", "", "--out", out) == 0
    assert json.loads((out / "summary.json").read_text())["null_intervention"] is True
    assert run("counterfactual", "--model", work / "vq-glm", "--obs", work / "data", "--do", "i=120",
               "--out", out) == 0
    capsys.readouterr()
    assert run("counterfactual", "--model", work / "mediator", "--obs", 0, "--do", "q=1", "--out", out) == 3
    assert "'q'" in capsys.readouterr().err
    assert run("counterfactual", "--model", work / "mediator", "--obs", 0, "--do", "t", "--out", out) == 2
    assert run("counterfactual", "--model", work / "mediator", "--obs", 999, "--do", "", "--out", out) == 3


def test_counterfactual_is_deterministic(work, tmp_path):
    for d in ("a", "b"):
        run("counterfactual", "--model", work / "mediator", "--obs", 5, "--do", "i=200", "--out", tmp_path / d)
    assert (tmp_path / "a" / "x_cf.cft").read_bytes() == (tmp_path / "b" / "x_cf.cft").read_bytes()


def test_effects(work, tmp_path):
    out = tmp_path / "fx"
    assert run("effects", "--model", work / "mediator", "--obs", 2, "--do", "", "--out", out) == 0
    assert json.loads((out / "norms.json").read_text()) == {"de": 0.0, "ie": 0.0, "te": 0.0}
    assert not fileio.read_cft1(out / "te.cft").any()
    assert run("effects", "--model", work / "mediator", "--obs", 2, "--do", "t=3", "--out", out) == 0
    assert set(json.loads((out / "norms.json").read_text())) == {"de", "ie", "te"}
    assert run("effects", "--model", work / "exogenous", "--obs", 2, "--do", "t=3", "--out", out) == 2


def test_evaluate(work, tmp_path):
    args = ["evaluate", "--models", work / "mediator", work / "vq-glm", "--dataset", work / "data"]
    assert run(*args, "--out", tmp_path / "r1") == 0
    assert run(*args, "--out", tmp_path / "r2") == 0
    a = (tmp_path / "r1" / "report.json").read_text()
    assert a == (tmp_path / "r2" / "report.json").read_text()
    doc = json.loads(a)
    assert [r["model"] for r in doc] == ["oracle", "identity", "mediator", "vq-glm"]
    assert all(v == 0.0 for v in doc[0]["composition_l1"].values())
    assert run("evaluate", "--models", work / "mediator", "--dataset", work / "data", "--suite", "x",
               "--out", tmp_path / "r3") == 2


def test_glm(tmp_path):
    fileio.write_cft1(tmp_path / "z.cft", np.array([[2.0], [4.0]]))
    (tmp_path / "p.csv").write_text("c0,c1\n1,0\n1,1\n")
    assert run("glm", "fit", "--z", tmp_path / "z.cft", "--p", tmp_path / "p.csv", "--out", tmp_path / "b.cft") == 0
    assert np.allclose(fileio.read_cft1(tmp_path / "b.cft"), [[2.0], [2.0]], atol=1e-12)
    assert run("glm", "abduct", "--b", tmp_path / "b.cft", "--z", tmp_path / "z.cft", "--p", tmp_path / "p.csv",
               "--out", tmp_path / "u.cft") == 0
    assert run("glm", "predict", "--b", tmp_path / "b.cft", "--u", tmp_path / "u.cft", "--p-cf", tmp_path / "p.csv",
               "--out", tmp_path / "z2.cft") == 0
    assert np.allclose(fileio.read_cft1(tmp_path / "z2.cft"), [[2.0], [4.0]], atol=1e-12)
    fileio.write_cft1(tmp_path / "z3.cft", np.arange(6.0).reshape(3, 2))
    (tmp_path / "dup.csv").write_text("1,1,1\n1,2,2\n1,3,3\n")
    args = ["glm", "fit", "--z", tmp_path / "z3.cft", "--p", tmp_path / "dup.csv", "--out", tmp_path / "bd.cft"]
    assert run(*args) == 4
    assert run(*args, "--jitter") == 0
