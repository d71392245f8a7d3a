"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, index, slot)``: no generator
state is carried between calls, so samples can be produced in any order (or in
parallel) and still agree bit-for-bit.  The mixing function is SplitMix64's
finalizer applied to a running hash of the key words.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_words(*words) -> np.ndarray:
    """Hash a sequence of integer words (scalars or broadcastable arrays) to uint64."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x6A09E667F3BCC909)
        for w in words:
            w = np.asarray(w).astype(np.uint64)
            h = _mix(h + _GOLDEN + w)
        return np.asarray(h, dtype=np.uint64)


def uniforms(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Open-interval uniforms of shape ``index.shape + (n_slots,)`` in (0, 1)."""
    index = np.asarray(index, dtype=np.int64)
    slots = np.arange(n_slots, dtype=np.int64)
    bits = hash_words(seed, stream, index[..., None], slots)
    # 53 high bits, shifted by half an ulp so 0 and 1 never occur
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def normals(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Standard normals via Box-Muller on paired counter uniforms."""
    half = (n_slots + 1) // 2
    u = uniforms(seed, stream, index, 2 * half)
    u1, u2 = u[..., :half], u[..., half:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)], axis=-1)
    return z[..., :n_slots]


def gumbels(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    return -np.log(-np.log(uniforms(seed, stream, index, n_slots)))


def derive_seed(seed: int, *tags: int) -> int:
    """Child seed for a sub-computation, e.g. one training epoch."""
    return int(hash_words(seed, *tags) >> np.uint64(1))


def sample_rows(seed: int, stream: int, n_rows: int, n_draws: int) -> np.ndarray:
    """Indices in ``[0, n_rows)``, one per draw (resampling from an empirical marginal)."""
    u = uniforms(seed, stream, np.arange(n_draws), 1)[:, 0]
    return np.minimum((u * n_rows).astype(np.int64), n_rows - 1)


def permutation(seed: int, stream: int, n: int) -> np.ndarray:
    keys = hash_words(seed, stream, np.arange(n, dtype=np.int64))
    return np.argsort(keys, kind="stable")
