"""Synthetic ground-truth population: class y, thickness t, intensity i -> image x.

    y ~ uniform{bar, cross, ring}
    t := exp(0.4 + 0.3 u_t)
    i := 64 + 191 sigmoid(2 t - 5 + 0.5 u_i)
    x := render(y, t, i) + (2/255) u_x          (16 x 16)

Every noise is drawn from a counter-based stream keyed by (seed, variable,
sample id), and the full noise record is kept so oracle counterfactuals are
exact re-evaluations.  Models must only ever see images and attributes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cfscm import fileio, rng

SIZE = 16
CLASSES = ("bar", "cross", "ring")
PIXEL_SIGMA = 2.0 / 255.0
I_MIN, I_MAX = 64.0, 255.0
HALF_WIDTH_PER_T = 0.5

_STREAM_Y, _STREAM_T, _STREAM_I, _STREAM_X = 0, 1, 2, 3
_N_NOISE = 3 + SIZE * SIZE

_rows, _cols = np.meshgrid(np.arange(SIZE, dtype=float), np.arange(SIZE, dtype=float), indexing="ij")


class UnknownId(KeyError):
    pass


def _segment_distance(a, b):
    (r0, c0), (r1, c1) = a, b
    dr, dc = r1 - r0, c1 - c0
    s = np.clip(((_rows - r0) * dr + (_cols - c0) * dc) / (dr * dr + dc * dc), 0.0, 1.0)
    return np.hypot(_rows - (r0 + s * dr), _cols - (c0 + s * dc))


# distance of every pixel centre to each class's stroke skeleton
_SKELETON_DISTANCE = np.stack([
    _segment_distance((8, 2), (8, 13)),
    np.minimum(_segment_distance((3, 3), (12, 12)), _segment_distance((3, 12), (12, 3))),
    np.abs(np.hypot(_rows - 7.5, _cols - 7.5) - 4.5),
])

_BINOMIAL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def stroke(y, t) -> np.ndarray:
    """Unsmoothed unit-peak stroke: coverage 1 on the skeleton, linear one-pixel ramp at the edge."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    hw = HALF_WIDTH_PER_T * t
    return np.clip(1.0 + hw[:, None, None] - _SKELETON_DISTANCE[y], 0.0, 1.0)


def smooth(images: np.ndarray) -> np.ndarray:
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(images)
    for dr in range(3):
        for dc in range(3):
            out += _BINOMIAL[dr, dc] * padded[:, dr: dr + SIZE, dc: dc + SIZE]
    return out


def render(y, t, i) -> np.ndarray:
    """Deterministic noiseless images, shape (n, 16, 16), values in [0, 1]."""
    y = np.atleast_1d(np.asarray(y))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    i = np.atleast_1d(np.asarray(i, dtype=float))
    if np.any((y < 0) | (y >= len(CLASSES)) | (y != np.round(y))):
        raise ValueError("class out of range")
    if np.any(~np.isfinite(t) | (t <= 0)):
        raise ValueError("thickness must be positive")
    if np.any(~np.isfinite(i) | (i < I_MIN) | (i > I_MAX)):
        raise ValueError(f"intensity must lie in [{I_MIN}, {I_MAX}]")
    return smooth(stroke(y, t) * (i / 255.0)[:, None, None])


def thickness(u_t):
    return np.exp(0.4 + 0.3 * np.asarray(u_t, dtype=float))


def intensity(t, u_i):
    z = 2.0 * np.asarray(t, dtype=float) - 5.0 + 0.5 * np.asarray(u_i, dtype=float)
    return I_MIN + (I_MAX - I_MIN) * 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray     # (n, 16, 16)
    y: np.ndarray          # (n,) int
    t: np.ndarray
    i: np.ndarray
    noises: np.ndarray     # (n, 3 + 256): u_y (uniform), u_t, u_i, u_x

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def attributes(self) -> dict[str, np.ndarray]:
        return {"y": self.y, "t": self.t, "i": self.i}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.y[idx], self.t[idx], self.i[idx], self.noises[idx])


def generate(seed: int, n: int) -> Dataset:
    ids = np.arange(n)
    u_y = rng.uniforms(seed, _STREAM_Y, ids, 1)[:, 0]
    u_t = rng.normals(seed, _STREAM_T, ids, 1)[:, 0]
    u_i = rng.normals(seed, _STREAM_I, ids, 1)[:, 0]
    u_x = rng.normals(seed, _STREAM_X, ids, SIZE * SIZE).reshape(n, SIZE, SIZE)
    noises = np.concatenate([u_y[:, None], u_t[:, None], u_i[:, None], u_x.reshape(n, SIZE * SIZE)], axis=1)
    return _evaluate(noises)


def _evaluate(noises: np.ndarray, do: dict | None = None) -> Dataset:
    do = do or {}
    n = noises.shape[0]
    y = np.minimum((noises[:, 0] * len(CLASSES)).astype(np.int64), len(CLASSES) - 1)
    if "y" in do:
        y = np.broadcast_to(np.asarray(do["y"], dtype=np.int64), (n,)).copy()
    t = thickness(noises[:, 1])
    if "t" in do:
        t = np.broadcast_to(np.asarray(do["t"], dtype=float), (n,)).copy()
    i = intensity(t, noises[:, 2])
    if "i" in do:
        i = np.broadcast_to(np.asarray(do["i"], dtype=float), (n,)).copy()
    u_x = noises[:, 3:].reshape(n, SIZE, SIZE)
    images = render(y, t, i) + PIXEL_SIGMA * u_x
    return Dataset(images, y, t, i, noises)


@dataclass(frozen=True)
class OraclePair:
    factual: Dataset
    counterfactual: Dataset
    intervention: dict


def oracle_counterfactual(dataset: Dataset, ids, intervention: dict) -> OraclePair:
    """Re-run the fixed mechanisms on the recorded noises under ``do(intervention)``.

    ``intervention`` maps any of y, t, i to a scalar or a per-id array.  Downstream
    attributes are recomputed (do(t) moves i through the sigmoid).
    """
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if np.any((ids < 0) | (ids >= len(dataset))):
        bad = ids[(ids < 0) | (ids >= len(dataset))][0]
        raise UnknownId(int(bad))
    unknown = set(intervention) - {"y", "t", "i"}
    if unknown:
        raise KeyError(f"cannot intervene on {sorted(unknown)}")
    noises = dataset.noises[ids]
    factual = dataset.subset(ids)
    if not intervention:
        return OraclePair(factual, factual, {})
    return OraclePair(factual, _evaluate(noises, intervention), dict(intervention))


def attributes_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "y", "t", "i"])
    for k in range(len(ds)):
        w.writerow([k, int(ds.y[k]), fileio.fmt(ds.t[k]), fileio.fmt(ds.i[k])])
    return buf.getvalue()


def write_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_cft1(out / "images.cft", ds.images.reshape(len(ds), SIZE, SIZE))
    (out / "attributes.csv").write_text(attributes_csv(ds))
    fileio.write_cft1(out / "noises.cft", ds.noises.reshape(len(ds), _N_NOISE))
    return out


def read_attributes(path) -> dict[str, np.ndarray]:
    rows = list(csv.DictReader(Path(path).read_text().splitlines()))
    return {
        "id": np.array([int(r["id"]) for r in rows], dtype=np.int64),
        "y": np.array([int(r["y"]) for r in rows], dtype=np.int64),
        "t": np.array([float(r["t"]) for r in rows]),
        "i": np.array([float(r["i"]) for r in rows]),
    }


def read_dataset(path, with_noises: bool = True) -> Dataset:
    path = Path(path)
    images = fileio.read_cft1(path / "images.cft").reshape(-1, SIZE, SIZE)
    attrs = read_attributes(path / "attributes.csv")
    n = len(attrs["y"])
    if images.shape[0] != n:
        raise fileio.FormatError("images.cft and attributes.csv disagree on the sample count")
    noise_path = path / "noises.cft"
    if with_noises and noise_path.exists():
        noises = fileio.read_cft1(noise_path).reshape(n, _N_NOISE)
    else:
        noises = np.full((n, _N_NOISE), np.nan)
    return Dataset(images, attrs["y"], attrs["t"], attrs["i"], noises)


def lognormal_t_mean() -> float:
    return float(np.exp(0.4 + 0.3 ** 2 / 2))
