"""Synthetic non-IID data generation, label partitioning, CSV ingestion.

The synthetic family follows the common federated-benchmark convention:
``alpha`` controls how much the per-device labeling models differ and
``beta`` controls how much the per-device feature distributions differ.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, softmax

logger = logging.getLogger(__name__)

_GEN_STREAM = 101
_PART_STREAM = 102
_SPLIT_STREAM = 103

_SHARD_MAGIC = b"FSSHARD1"

# device id used for the held-out test shard in serialized containers
HOLDOUT_ID = -1


@dataclass(frozen=True)
class DataShard:
    """One device's local dataset: a feature matrix and integer labels."""

    device_id: int
    features: np.ndarray  # (n, d_in) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labs.ndim != 1 or feats.shape[0] != labs.shape[0]:
            raise ValueError("features must be (n, d) with n matching labels")
        if feats.shape[0] < 1:
            raise ValueError("shard must contain at least one sample")
        if not np.all(np.isfinite(feats)):
            raise ValueError("shard features contain NaN or Inf")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DataShard":
        idx = np.asarray(idx, dtype=np.int64)
        return DataShard(self.device_id, self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class Dataset:
    """A flat labeled dataset, prior to any per-device partitioning."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic Gaussian classification family.

    ``alpha`` is the variance of the per-device mean of the labeling weights,
    ``beta`` the variance of the per-device feature-mean offset.  ``iid``
    forces one shared labeling model and one shared feature mean for all
    devices.  Per-device sample counts are Pareto draws with tail index
    ``size_exponent``, rescaled to sum to ``total_samples``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    iid: bool = False
    n_devices: int = 30
    d_in: int = 60
    n_classes: int = 10
    total_samples: int = 10000
    size_exponent: float = 1.5
    seed: int = 0
    test_fraction: float = 0.2  # fraction of all generated data held out

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.n_devices < 1 or self.d_in < 1 or self.n_classes < 2:
            raise ValueError("need at least one device, one feature, two classes")
        if self.total_samples < 2 * self.n_devices:
            raise ValueError(
                f"total_samples={self.total_samples} cannot give every one of "
                f"{self.n_devices} devices at least 2 samples"
            )
        if not (0.0 <= self.test_fraction < 1.0):
            raise ValueError("test_fraction must be in [0, 1)")
        if self.size_exponent <= 0:
            raise ValueError("size_exponent must be positive")


def _apportion(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Split ``total`` into integer parts proportional to ``weights``.

    Largest-remainder rounding, then a deterministic pass that tops parts up
    to ``minimum`` by taking from the currently largest part.
    """
    w = np.asarray(weights, dtype=np.float64)
    ideal = w / w.sum() * total
    parts = np.floor(ideal).astype(np.int64)
    short = total - int(parts.sum())
    order = np.argsort(-(ideal - parts), kind="stable")
    for i in range(short):
        parts[order[i % len(parts)]] += 1
    while True:
        low = int(np.argmin(parts))
        if parts[low] >= minimum:
            break
        high = int(np.argmax(parts))
        if parts[high] <= minimum:
            raise ValueError("total too small to satisfy per-part minimum")
        parts[high] -= 1
        parts[low] += 1
    return parts


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[DataShard], DataShard]:
    """Generate per-device shards plus a pooled held-out test shard.

    Per device k: labeling weights (W_k, b_k) have entries N(u_k, 1) with
    u_k ~ N(0, alpha); features are N(v_k, diag(j^-1.2)) with v_k entries
    N(B_k, 1), B_k ~ N(0, beta); labels are argmax softmax(W_k x + b_k).
    With ``iid`` one (W, b) and one v are drawn and shared by all devices.
    The test shard pools extra draws from every device's distribution, sized
    so it holds ``test_fraction`` of all generated samples.
    """
    gen = RngStream(spec.seed, (_GEN_STREAM,)).generator()
    n, d, c = spec.n_devices, spec.d_in, spec.n_classes

    raw = 1.0 + gen.pareto(spec.size_exponent, size=n)
    sizes = _apportion(spec.total_samples, raw, minimum=2)

    # diagonal feature covariance, decaying with coordinate index
    scale = np.sqrt(np.arange(1, d + 1, dtype=np.float64) ** -1.2)

    def draw_model():
        u = gen.normal(0.0, math.sqrt(spec.alpha)) if spec.alpha > 0 else 0.0
        w = gen.normal(u, 1.0, size=(c, d))
        b = gen.normal(u, 1.0, size=c)
        return w, b

    def draw_mean():
        big_b = gen.normal(0.0, math.sqrt(spec.beta)) if spec.beta > 0 else 0.0
        return gen.normal(big_b, 1.0, size=d)

    if spec.iid:
        shared_model = draw_model()
        shared_mean = draw_mean()
        models = [shared_model] * n
        means = [shared_mean] * n
    else:
        models = []
        means = []
        for _ in range(n):
            models.append(draw_model())
            means.append(draw_mean())

    if spec.test_fraction > 0:
        test_sizes = np.maximum(
            1, np.rint(sizes * spec.test_fraction / (1.0 - spec.test_fraction))
        ).astype(np.int64)
    else:
        test_sizes = np.zeros(n, dtype=np.int64)

    def draw_samples(k: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        w, b = models[k]
        x = means[k] + gen.normal(size=(count, d)) * scale
        y = np.argmax(softmax(x @ w.T + b, axis=1), axis=1).astype(np.int64)
        return x, y

    shards = []
    test_x, test_y = [], []
    for k in range(n):
        x, y = draw_samples(k, int(sizes[k]))
        shards.append(DataShard(k, x, y))
        if test_sizes[k] > 0:
            tx, ty = draw_samples(k, int(test_sizes[k]))
            test_x.append(tx)
            test_y.append(ty)
    if not test_x:
        raise ValueError("test_fraction too small to produce a holdout shard")
    test = DataShard(HOLDOUT_ID, np.concatenate(test_x), np.concatenate(test_y))
    return shards, test


def labeling_weights(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Re-derive each device's labeling model (W_k, b_k) for a given spec.

    Replays the generation stream without drawing samples; useful for
    checking that the iid flag really shares one labeling function.
    """
    gen = RngStream(spec.seed, (_GEN_STREAM,)).generator()
    n, d, c = spec.n_devices, spec.d_in, spec.n_classes
    gen.pareto(spec.size_exponent, size=n)

    def draw_model():
        u = gen.normal(0.0, math.sqrt(spec.alpha)) if spec.alpha > 0 else 0.0
        w = gen.normal(u, 1.0, size=(c, d))
        b = gen.normal(u, 1.0, size=c)
        return w, b

    def skip_mean():
        if spec.beta > 0:
            gen.normal(0.0, math.sqrt(spec.beta))
        gen.normal(0.0, 1.0, size=d)

    out = []
    if spec.iid:
        shared = draw_model()
        skip_mean()
        return [shared] * n
    for _ in range(n):
        out.append(draw_model())
        skip_mean()
    return out


def partition_by_label(
    dataset: Dataset,
    n_devices: int,
    classes_per_device: int,
    power_law: float = 1.5,
    seed: int = 0,
) -> list[DataShard]:
    """Partition a dataset so each device sees at most ``classes_per_device``
    distinct labels, with power-law shard sizes.

    Every sample is assigned to exactly one device, so the multiset union of
    shard labels equals the dataset's labels.
    """
    if not (1 <= classes_per_device <= dataset.n_classes):
        raise ValueError("classes_per_device must be in [1, n_classes]")
    labels = np.asarray(dataset.labels, dtype=np.int64)
    present = np.unique(labels)
    if n_devices * classes_per_device < len(present):
        raise ValueError(
            f"{n_devices} devices x {classes_per_device} classes cannot cover "
            f"{len(present)} present classes"
        )
    gen = RngStream(seed, (_PART_STREAM,)).generator()

    # deal shuffled classes round-robin so every present class has an owner
    shuffled = gen.permutation(present)
    owned: list[set[int]] = [set() for _ in range(n_devices)]
    for i, cls in enumerate(shuffled):
        owned[i % n_devices].add(int(cls))
    # top up devices to exactly classes_per_device distinct classes
    for k in range(n_devices):
        missing = classes_per_device - len(owned[k])
        if missing > 0:
            pool = np.array([c for c in present if int(c) not in owned[k]])
            extra = gen.choice(pool, size=min(missing, len(pool)), replace=False)
            owned[k].update(int(c) for c in np.atleast_1d(extra))

    weights = 1.0 + gen.pareto(power_law, size=n_devices)
    assigned: list[list[np.ndarray]] = [[] for _ in range(n_devices)]
    for cls in present:
        cls_idx = gen.permutation(np.flatnonzero(labels == cls))
        owners = [k for k in range(n_devices) if int(cls) in owned[k]]
        if len(owners) == 1:
            assigned[owners[0]].append(cls_idx)
            continue
        parts = _apportion(len(cls_idx), weights[owners], minimum=0)
        start = 0
        for k, cnt in zip(owners, parts):
            if cnt > 0:
                assigned[k].append(cls_idx[start : start + cnt])
            start += cnt

    # an unlucky device may have been rounded down to zero samples everywhere
    for k in range(n_devices):
        if not assigned[k] or sum(len(a) for a in assigned[k]) == 0:
            donors = sorted(
                range(n_devices),
                key=lambda j: -sum(len(a) for a in assigned[j]),
            )
            donor = donors[0]
            chunk = max(assigned[donor], key=len)
            assigned[donor].remove(chunk)
            assigned[k].append(chunk[:1])
            if len(chunk) > 1:
                assigned[donor].append(chunk[1:])

    shards = []
    for k in range(n_devices):
        idx = np.concatenate(assigned[k])
        shards.append(DataShard(k, dataset.features[idx], labels[idx]))
    return shards


def holdout_split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, DataShard]:
    """Split off a global test shard before any per-device partitioning."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("holdout fraction must be in (0, 1)")
    gen = RngStream(seed, (_SPLIT_STREAM,)).generator()
    n = len(dataset)
    n_test = max(1, int(round(n * fraction)))
    if n_test >= n:
        raise ValueError("holdout would consume the entire dataset")
    perm = gen.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    train = Dataset(dataset.features[train_idx], dataset.labels[train_idx], dataset.n_classes)
    test = DataShard(HOLDOUT_ID, dataset.features[test_idx], dataset.labels[test_idx])
    return train, test


def load_csv(path, label_column: int) -> tuple[Dataset, int]:
    """Load a headerless numeric CSV; returns (dataset, rejected_row_count).

    Rows containing NaN are dropped and counted.  Any other malformed content
    raises ValueError naming the offending line.
    """
    rows: list[list[float]] = []
    rejected = 0
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if width is None:
                width = len(values)
                if not (-width <= label_column < width):
                    raise ValueError(
                        f"label column {label_column} out of range for {width} columns"
                    )
            elif len(values) != width:
                raise ValueError(
                    f"{path}:{lineno}: expected {width} columns, got {len(values)}"
                )
            if any(math.isnan(v) for v in values):
                rejected += 1
                continue
            label = values[label_column]
            if label != int(label) or label < 0:
                raise ValueError(
                    f"{path}:{lineno}: label must be a nonnegative integer, got {label!r}"
                )
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no usable rows")
    if rejected:
        logger.info("load_csv: %d row(s) rejected for NaN values", rejected)
    arr = np.asarray(rows, dtype=np.float64)
    col = label_column % width
    labels = arr[:, col].astype(np.int64)
    features = np.delete(arr, col, axis=1)
    return Dataset(features, labels, int(labels.max()) + 1), rejected


def save_shards(path, shards: list[DataShard], n_classes: int, test: DataShard | None = None):
    """Serialize shards to a length-prefixed little-endian binary container.

    Layout: magic, u32 shard count, u32 d_in, u32 n_classes, u64 sizes,
    then per shard an i64 device id, labels as i64 and features as f64.
    A held-out test shard, when given, is stored last with device id -1.
    """
    entries = list(shards) + ([test] if test is not None else [])
    d_in = entries[0].d_in
    with open(path, "wb") as fh:
        fh.write(_SHARD_MAGIC)
        fh.write(struct.pack("<III", len(entries), d_in, n_classes))
        for shard in entries:
            fh.write(struct.pack("<Q", len(shard)))
        for shard in entries:
            if shard.d_in != d_in:
                raise ValueError("all shards must share one feature dimension")
            fh.write(struct.pack("<q", shard.device_id))
            fh.write(shard.labels.astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(shard.features, dtype="<f8").tobytes())


def load_shards(path) -> tuple[list[DataShard], DataShard | None, int]:
    """Read a shard container; returns (shards, test_shard_or_None, n_classes)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_SHARD_MAGIC))
        if magic != _SHARD_MAGIC:
            raise ValueError(f"{path}: not a shard container")
        count, d_in, n_classes = struct.unpack("<III", fh.read(12))
        sizes = [struct.unpack("<Q", fh.read(8))[0] for _ in range(count)]
        shards = []
        test = None
        for n in sizes:
            (device_id,) = struct.unpack("<q", fh.read(8))
            labels = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
            feats = np.frombuffer(fh.read(8 * n * d_in), dtype="<f8").astype(np.float64)
            shard = DataShard(device_id, feats.reshape(n, d_in), labels)
            if device_id == HOLDOUT_ID:
                test = shard
            else:
                shards.append(shard)
    return shards, test, n_classes
