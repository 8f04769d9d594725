"""Loss models with analytic gradients, plus the proximal local objective.

Two model kinds share one flat-parameter convention:

* ``mlr``  -- multinomial logistic regression, blocks ``[W (C x d_in), b (C)]``
* ``mlp1`` -- one tanh hidden layer,
  blocks ``[W1 (H x d_in), b1 (H), W2 (C x H), b2 (C)]``

Blocks are row-major, so checkpoints are portable across implementations
that follow the same layout header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import DataShard
from .numerics import RngStream, l2_norm_sq, softmax

KINDS = ("mlr", "mlp1")

_CKPT_MAGIC = b"FSPARAM1"
_KIND_CODE = {"mlr": 0, "mlp1": 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def _check_shard(shard: DataShard, d_in: int, n_classes: int):
    if len(shard) == 0:
        raise ValueError("empty shard")
    if shard.d_in != d_in:
        raise ValueError(f"shard has {shard.d_in} features, model expects {d_in}")
    if shard.labels.min() < 0 or shard.labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")


@dataclass(frozen=True)
class LossModel:
    """Cross-entropy classifier over a flat parameter vector."""

    kind: str
    d_in: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.d_in < 1 or self.n_classes < 2:
            raise ValueError("need d_in >= 1 and n_classes >= 2")
        if self.kind == "mlp1" and self.hidden < 1:
            raise ValueError("mlp1 requires a positive hidden width")

    @property
    def param_count(self) -> int:
        d, c, h = self.d_in, self.n_classes, self.hidden
        if self.kind == "mlr":
            return c * d + c
        return h * d + h + c * h + c

    @property
    def is_convex(self) -> bool:
        return self.kind == "mlr"

    def init_params(self, rng: RngStream | None = None) -> np.ndarray:
        """Zero start for mlr; small random hidden weights for mlp1
        (an all-zero mlp1 would never move its first layer)."""
        if self.kind == "mlr" or rng is None:
            return np.zeros(self.param_count)
        gen = rng.generator()
        d, c, h = self.d_in, self.n_classes, self.hidden
        w1 = gen.normal(0.0, 1.0 / np.sqrt(d), size=(h, d))
        w2 = gen.normal(0.0, 1.0 / np.sqrt(h), size=(c, h))
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def _unpack(self, w: np.ndarray):
        d, c, h = self.d_in, self.n_classes, self.hidden
        if w.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {w.shape}")
        if self.kind == "mlr":
            return w[: c * d].reshape(c, d), w[c * d :]
        o1 = h * d
        o2 = o1 + h
        o3 = o2 + c * h
        return (
            w[:o1].reshape(h, d),
            w[o1:o2],
            w[o2:o3].reshape(c, h),
            w[o3:],
        )

    def logits(self, w: np.ndarray, features: np.ndarray) -> np.ndarray:
        if self.kind == "mlr":
            wm, b = self._unpack(w)
            return features @ wm.T + b
        w1, b1, w2, b2 = self._unpack(w)
        hidden = np.tanh(features @ w1.T + b1)
        return hidden @ w2.T + b2

    def loss(self, w: np.ndarray, shard: DataShard) -> float:
        """Mean cross-entropy over the shard (stable log-sum-exp)."""
        _check_shard(shard, self.d_in, self.n_classes)
        z = self.logits(w, shard.features)
        m = np.max(z, axis=1)
        lse = m + np.log(np.sum(np.exp(z - m[:, None]), axis=1))
        picked = z[np.arange(len(shard)), shard.labels]
        return float(np.mean(lse - picked))

    def gradient(self, w: np.ndarray, shard: DataShard) -> np.ndarray:
        """Analytic gradient of :meth:`loss`, same layout as ``w``."""
        _check_shard(shard, self.d_in, self.n_classes)
        x, y = shard.features, shard.labels
        n = len(shard)
        if self.kind == "mlr":
            wm, b = self._unpack(w)
            p = softmax(x @ wm.T + b, axis=1)
            p[np.arange(n), y] -= 1.0
            g = p / n
            return np.concatenate([(g.T @ x).ravel(), g.sum(axis=0)])
        w1, b1, w2, b2 = self._unpack(w)
        a = np.tanh(x @ w1.T + b1)
        p = softmax(a @ w2.T + b2, axis=1)
        p[np.arange(n), y] -= 1.0
        g = p / n
        g_w2 = g.T @ a
        g_b2 = g.sum(axis=0)
        back = (g @ w2) * (1.0 - a * a)
        g_w1 = back.T @ x
        g_b1 = back.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def accuracy(self, w: np.ndarray, shard: DataShard) -> float:
        """Fraction of argmax-correct predictions; ties pick the lowest class."""
        _check_shard(shard, self.d_in, self.n_classes)
        pred = np.argmax(self.logits(w, shard.features), axis=1)
        return float(np.mean(pred == shard.labels))


@dataclass(frozen=True)
class ProximalObjective:
    """Local loss plus the quadratic pull toward the round's center.

    With ``mu == 0`` this is exactly the base loss, and at ``w == center``
    the gradient equals the base gradient.
    """

    base: LossModel
    center: np.ndarray
    mu: float

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")

    def value(self, w: np.ndarray, shard: DataShard) -> float:
        diff = w - self.center
        return self.base.loss(w, shard) + 0.5 * self.mu * l2_norm_sq(diff)

    def gradient(self, w: np.ndarray, shard: DataShard) -> np.ndarray:
        return self.base.gradient(w, shard) + self.mu * (w - self.center)

    def value_and_gradient(self, w: np.ndarray, shard: DataShard) -> tuple[float, np.ndarray]:
        return self.value(w, shard), self.gradient(w, shard)


def finite_diff_gradient(model, w: np.ndarray, shard: DataShard, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle; ``model`` needs only a loss method."""
    if h <= 0:
        raise ValueError("step h must be positive")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = h
        grad[i] = (model.loss(w + step, shard) - model.loss(w - step, shard)) / (2.0 * h)
    return grad


def save_params(path, model: LossModel, w: np.ndarray):
    """Write parameters as little-endian float64 behind a layout header."""
    if w.shape != (model.param_count,):
        raise ValueError("parameter vector does not match model layout")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<BIIIQ",
                _KIND_CODE[model.kind],
                model.d_in,
                model.n_classes,
                model.hidden,
                w.size,
            )
        )
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_params(path) -> tuple[LossModel, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        code, d_in, n_classes, hidden, count = struct.unpack("<BIIIQ", fh.read(21))
        model = LossModel(_CODE_KIND[code], d_in, n_classes, hidden)
        if count != model.param_count:
            raise ValueError(f"{path}: checkpoint holds {count} values, layout wants {model.param_count}")
        w = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    return model, w
