import numpy as np
import pytest

from cfscm import synthpop


def test_generate_is_seed_deterministic(tmp_path):
    a = synthpop.write_dataset(synthpop.generate(5, 40), tmp_path / "a")
    b = synthpop.write_dataset(synthpop.generate(5, 40), tmp_path / "b")
    for name in ("images.cft", "attributes.csv", "noises.cft"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert synthpop.generate(6, 40).t[0] != synthpop.generate(5, 40).t[0]
    assert len(synthpop.generate(0, 0)) == 0


def test_marginals_and_bounds():
    ds = synthpop.generate(0, 100_000)
    assert abs(ds.t.mean() / synthpop.lognormal_t_mean() - 1.0) < 0.01
    assert np.all(ds.t > 0)
    assert np.all((ds.i > synthpop.I_MIN) & (ds.i < synthpop.I_MAX))
    assert set(np.unique(ds.y)) == {0, 1, 2}


def test_read_back(tmp_path):
    ds = synthpop.generate(2, 12)
    back = synthpop.read_dataset(synthpop.write_dataset(ds, tmp_path))
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.t, ds.t)
    assert np.array_equal(back.noises, ds.noises)
    blind = synthpop.read_dataset(tmp_path, with_noises=False)
    assert np.all(np.isnan(blind.noises))


def test_oracle_counterfactuals():
    ds = synthpop.generate(1, 20)
    null = synthpop.oracle_counterfactual(ds, [3, 4], {})
    assert np.array_equal(null.counterfactual.images, null.factual.images)
    same = synthpop.oracle_counterfactual(ds, [3, 4], {"t": ds.t[[3, 4]]})
    assert np.array_equal(same.counterfactual.images, same.factual.images)
    up = synthpop.oracle_counterfactual(ds, np.arange(20), {"t": 2 * ds.t})
    assert np.all(up.counterfactual.i > up.factual.i)
    di = synthpop.oracle_counterfactual(ds, np.arange(20), {"i": 100.0})
    assert np.array_equal(di.counterfactual.t, ds.t)
    with pytest.raises(synthpop.UnknownId):
        synthpop.oracle_counterfactual(ds, [20], {})
    with pytest.raises(KeyError):
        synthpop.oracle_counterfactual(ds, [0], {"x": 1.0})


def test_render_properties():
    s = synthpop.stroke([0], [1.0])[0]
    assert np.all(s[8, 2:14] == 1.0)
    lo = synthpop.render([1], [1.5], [64.0])
    hi = synthpop.render([1], [1.5], [255.0])
    assert np.allclose(hi, lo * 255.0 / 64.0)
    counts = [int((synthpop.render([k], [t], [200.0]) > 0).sum()) for k in range(3) for t in np.linspace(0.5, 4, 15)]
    for k in range(3):
        seq = counts[15 * k: 15 * (k + 1)]
        assert all(b >= a for a, b in zip(seq, seq[1:]))
    for bad in (([3], [1.0], [100.0]), ([0], [0.0], [100.0]), ([0], [1.0], [300.0])):
        with pytest.raises(ValueError):
            synthpop.render(*bad)
