"""Datasets, client partitioning, and trigger poisoning."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import rng_for

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be an N x D matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{x.shape[0]} inputs but {y.size} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    blend: float
    target_class: int

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        pat = np.asarray(self.pattern, dtype=np.float64)
        if m.ndim != 1 or pat.shape != m.shape:
            raise ValueError("mask and pattern must be vectors of equal length")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be 0/1")
        if not m.any():
            raise ValueError("trigger mask selects no coordinates")
        if np.any(pat < 0) or np.any(pat > 1):
            raise ValueError("pattern entries must lie in [0, 1]")
        if not 0 < self.blend <= 1:
            raise ValueError("blend must lie in (0, 1]")
        if self.target_class < 0:
            raise ValueError("target_class must be nonnegative")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "pattern", pat)

    @property
    def coords(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def with_mask(self, mask) -> "TriggerSpec":
        return TriggerSpec(mask, self.pattern, self.blend, self.target_class)

    def retarget(self, target_class: int) -> "TriggerSpec":
        return TriggerSpec(self.mask, self.pattern, self.blend, target_class)


def visible_trigger(dim: int, target_class: int, start: int = 0, width: int = 4, value: float = 1.0) -> TriggerSpec:
    """Patch of ``width`` contiguous coordinates set to ``value``."""
    mask = np.zeros(dim)
    mask[start : start + width] = 1
    return TriggerSpec(mask, np.full(dim, float(value)), 1.0, target_class)


def invisible_trigger(dim: int, target_class: int, blend: float = 0.2, seed: int = 0) -> TriggerSpec:
    """Full-support random pattern blended into the input."""
    pattern = rng_for(seed, "itba-pattern").uniform(0.0, 1.0, size=dim)
    return TriggerSpec(np.ones(dim), pattern, blend, target_class)


def apply_trigger_all(inputs: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    w = trig.blend * trig.mask
    return (1.0 - w) * x + w * trig.pattern


def poison(data: Dataset, trig: TriggerSpec, ratio: float, seed: int) -> tuple[Dataset, np.ndarray]:
    """Trigger and relabel ``floor(ratio * N)`` uniformly chosen samples.

    Returns the poisoned dataset and the sorted poisoned indices.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    if trig.target_class >= data.num_classes:
        raise ValueError("trigger target class outside the label range")
    n_poison = math.floor(ratio * len(data))
    if n_poison == 0:
        return data, np.zeros(0, dtype=np.int64)
    idx = np.sort(rng_for(seed, "poison").choice(len(data), size=n_poison, replace=False))
    return _poison_at(data, trig, idx), idx


def _poison_at(data: Dataset, trig: TriggerSpec, idx: np.ndarray) -> Dataset:
    x = data.inputs.copy()
    y = data.labels.copy()
    x[idx] = apply_trigger_all(x[idx], trig)
    y[idx] = trig.target_class
    return Dataset(x, y, data.num_classes)


# ---------------------------------------------------------------------------
# generators and loaders


def gen_synthetic(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    seed: int,
    noise: float = 0.05,
    background: int = 0,
) -> Dataset:
    """Gaussian class blobs in [0, 1]^dim.

    Class means are ``0.5 + separation * noise * u_c`` for random unit
    directions ``u_c``; samples add isotropic noise of std ``noise`` and are
    clipped. The first ``background`` coordinates carry no signal and are
    always 0, like the empty border of a digit image.
    """
    if num_classes <= 0 or dim <= 0 or samples_per_class < 0:
        raise ValueError("num_classes and dim must be positive, samples_per_class nonnegative")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if not 0 <= background < dim:
        raise ValueError("background must lie in [0, dim)")
    rng = rng_for(seed, "synthetic")
    d_sig = dim - background
    dirs = rng.normal(size=(num_classes, d_sig))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = np.clip(0.5 + separation * noise * dirs, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = np.zeros((labels.size, dim))
    x[:, background:] = np.clip(means[labels] + rng.normal(0.0, noise, size=(labels.size, d_sig)), 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], num_classes)


def _read_header(buf: bytes, name: str, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise TruncatedPayloadError(f"{name}: header needs {need} bytes, file has {len(buf)}")
    got = struct.unpack(">i", buf[:4])[0]
    if got != magic:
        raise BadMagicError(f"{name}: magic number {got}, expected {magic}")
    return struct.unpack(f">{n_dims}i", buf[4:need])


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into a Dataset scaled to [0, 1]."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(ib, str(images_path), IDX_IMAGE_MAGIC, 3)
    (n_lab,) = _read_header(lb, str(labels_path), IDX_LABEL_MAGIC, 1)
    pixels = np.frombuffer(ib, dtype=np.uint8, offset=16)
    if pixels.size < n_img * rows * cols:
        raise TruncatedPayloadError(f"{images_path}: expected {n_img * rows * cols} pixels, found {pixels.size}")
    labels = np.frombuffer(lb, dtype=np.uint8, offset=8)
    if labels.size < n_lab:
        raise TruncatedPayloadError(f"{labels_path}: expected {n_lab} labels, found {labels.size}")
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    x = pixels[: n_img * rows * cols].reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, labels[:n_lab].astype(np.int64), num_classes)


def coerce_to(data: Dataset, dim: int, num_classes: int) -> Dataset:
    """Fit an out-of-distribution dataset to a model's input width and label range.

    Wider inputs are center-cropped, narrower ones zero-padded on both sides;
    labels are taken modulo ``num_classes``.
    """
    d = data.dim
    x = data.inputs
    if d > dim:
        start = (d - dim) // 2
        x = x[:, start : start + dim]
    elif d < dim:
        left = (dim - d) // 2
        x = np.pad(x, ((0, 0), (left, dim - d - left)))
    return Dataset(x, data.labels % num_classes, num_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = rng_for(seed, "split").permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple[tuple[int, ...], ...]
    # non-IID plans only: the indices each client received through its class groups
    dedicated: tuple[tuple[int, ...], ...] = ()

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def _split_even(idx: np.ndarray, n: int) -> list[np.ndarray]:
    return np.array_split(idx, n)


def partition_iid(data: Dataset, n_clients: int, seed: int) -> PartitionPlan:
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    order = rng_for(seed, "iid").permutation(len(data))
    parts = _split_even(order, n_clients)
    return PartitionPlan(tuple(tuple(int(i) for i in np.sort(p)) for p in parts))


def partition_noniid(data: Dataset, n_clients: int, alpha: float, group_fraction: float, seed: int) -> PartitionPlan:
    """Label-skewed split: a fraction ``alpha`` of each class goes to that class's client group.

    Class ``c``'s group is ``ceil(group_fraction * n_clients)`` consecutive
    client ids starting at ``(c * group_size) mod n_clients``. The rest of
    every class is pooled and split IID across all clients.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    if not 0 < group_fraction < 1:
        raise ValueError("group_fraction must be in (0, 1)")
    rng = rng_for(seed, "noniid")
    group_size = max(1, math.ceil(group_fraction * n_clients - 1e-9))
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    dedicated: list[list[int]] = [[] for _ in range(n_clients)]
    pooled = []
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        n_group = int(round(alpha * idx.size))
        start = (c * group_size) % n_clients
        group = [(start + j) % n_clients for j in range(group_size)]
        for client, part in zip(group, _split_even(idx[:n_group], group_size)):
            buckets[client].extend(int(i) for i in part)
            dedicated[client].extend(int(i) for i in part)
        pooled.append(idx[n_group:])
    rest = rng.permutation(np.concatenate(pooled)) if pooled else np.zeros(0, dtype=np.int64)
    for client, part in enumerate(_split_even(rest, n_clients)):
        buckets[client].extend(int(i) for i in part)
    return PartitionPlan(tuple(tuple(sorted(b)) for b in buckets), tuple(tuple(sorted(d)) for d in dedicated))
