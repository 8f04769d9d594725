"""Dense vector arithmetic and seeded sampling primitives.

Every reduction in this module accumulates in ascending index order, so
repeated runs produce bitwise-identical results no matter how many worker
threads the simulator uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "as_params",
    "dot",
    "l2_norm",
    "l2_norm_sq",
    "softmax",
    "sample_categorical",
]


@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by (seed, stream key).

    Streams are backed by numpy's counter-based Philox generator, seeded
    through ``SeedSequence(entropy=seed, spawn_key=stream)``.  Identical
    (seed, stream) pairs yield identical draw sequences on any platform and
    under any thread schedule; numpy guarantees the Philox bit stream stays
    fixed across versions.  The stream key is a tuple so that device, round
    and replay sub-streams can be derived without ever colliding.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def child(self, *key: int) -> "RngStream":
        """Derive a disjoint sub-stream by extending the stream key."""
        return RngStream(self.seed, self.stream + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def as_params(values) -> np.ndarray:
    """Coerce to a 1-D float64 parameter vector, rejecting NaN/Inf entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector contains NaN or Inf")
    return arr


def dot(a, b) -> float:
    """Inner product accumulated left to right in double precision."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    acc = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        acc += x * y
    return acc


def l2_norm_sq(a) -> float:
    """Squared Euclidean norm, accumulated in index order."""
    return dot(a, a)


def l2_norm(a) -> float:
    return float(np.sqrt(l2_norm_sq(a)))


def softmax(z, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction before exponentiation)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty array")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sample_categorical(p, count: int, rng) -> np.ndarray:
    """Draw ``count`` indices with replacement from the distribution ``p``.

    Sampling uses CDF inversion on uniforms from ``rng``, which may be an
    :class:`RngStream` (a fresh generator is derived, so the same stream
    always yields the same multiset) or an already-positioned
    ``numpy.random.Generator`` for sequential draws.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be nonempty and 1-D")
    if np.any(p < 0.0):
        raise ValueError("probability entries must be nonnegative")
    total = float(np.sum(p))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    if count < 0:
        raise ValueError("count must be nonnegative")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    cdf = np.cumsum(p)
    cdf[-1] = 1.0  # guard inversion against accumulated rounding at the top
    u = gen.random(int(count))
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, p.size - 1).astype(np.int64)
