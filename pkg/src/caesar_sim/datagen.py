"""Synthetic Gaussian-blob data and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import UsageError, make_rng
from .learner import DatasetShard

TEST_FRACTION = 0.1


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    dim: int = 32
    per_class: int = 1000
    class_sep: float = 1.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.classes, self.dim) < 1 or self.per_class < 2:
            raise UsageError("need classes, dim >= 1 and per_class >= 2")
        if self.noise <= 0:
            raise UsageError("noise must be positive")


@dataclass(frozen=True)
class PartitionSpec:
    n_devices: int
    p: float = 0.0
    min_per_device: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 1 or self.min_per_device < 1:
            raise UsageError("need n_devices >= 1 and min_per_device >= 1")
        if self.p < 0:
            raise UsageError("heterogeneity p must be non-negative")


def class_directions(classes: int, dim: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, 1)
    u = rng.standard_normal((classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def synth_dataset(spec: SynthSpec) -> tuple[DatasetShard, DatasetShard]:
    """Isotropic Gaussian blobs around ``class_sep * u_h``; stratified 90/10 split."""
    centers = spec.class_sep * class_directions(spec.classes, spec.dim, spec.seed)
    rng = make_rng(spec.seed, 2)
    n_test = max(1, int(round(spec.per_class * TEST_FRACTION)))
    parts = {"train": ([], []), "test": ([], [])}
    for h in range(spec.classes):
        x = centers[h] + spec.noise * rng.standard_normal((spec.per_class, spec.dim))
        split = {"train": x[n_test:], "test": x[:n_test]}
        for name, rows in split.items():
            parts[name][0].append(rows)
            parts[name][1].append(np.full(len(rows), h))
    shards = []
    for name in ("train", "test"):
        x = np.concatenate(parts[name][0])
        y = np.concatenate(parts[name][1])
        shards.append(DatasetShard(x, y, indices=np.arange(len(y))))
    return shards[0], shards[1]


def subset(data: DatasetShard, indices) -> DatasetShard:
    indices = np.asarray(indices, dtype=np.int64)
    return DatasetShard(data.features[indices], data.labels[indices], indices=indices)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # biggest fractional parts first, lower index on ties
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_indices(labels: np.ndarray, ps: PartitionSpec) -> list[np.ndarray]:
    m = labels.size
    n = ps.n_devices
    if m < n * ps.min_per_device:
        raise UsageError(f"{m} samples cannot give {n} devices at least {ps.min_per_device} each")
    rng = make_rng(ps.seed, 3)
    if ps.p == 0:
        return [np.sort(part) for part in np.array_split(rng.permutation(m), n)]

    concentration = 1.0 / ps.p
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    for h in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == h))
        props = rng.dirichlet(np.full(n, concentration))
        if not np.all(np.isfinite(props)):
            # every gamma draw underflowed: the whole class lands on one device
            props = np.zeros(n)
            props[rng.integers(n)] = 1.0
        counts = _largest_remainder(props, idx.size)
        for dev, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[dev].append(chunk)
    shards = [list(np.concatenate(b)) if b else [] for b in buckets]

    sizes = np.array([len(s) for s in shards])
    while sizes.min() < ps.min_per_device:
        donor = int(np.argmax(sizes))
        taker = int(np.argmin(sizes))
        shards[taker].append(shards[donor].pop())
        sizes[donor] -= 1
        sizes[taker] += 1
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def dirichlet_partition(train: DatasetShard, ps: PartitionSpec) -> list[DatasetShard]:
    """Split ``train`` across devices.

    ``p == 0`` gives equal IID shards. Otherwise each class is spread over the
    devices with proportions drawn from a symmetric Dirichlet with
    concentration ``1 / p``, so larger ``p`` means stronger label and volume
    skew. Devices short of ``min_per_device`` samples are topped up one sample
    at a time from the largest shard.
    """
    return [subset(train, idx) for idx in partition_indices(train.labels, ps)]


def label_distribution(shard: DatasetShard, classes: int) -> np.ndarray:
    if len(shard) == 0:
        raise UsageError("empty shard")
    counts = np.bincount(shard.labels, minlength=classes).astype(np.float64)
    return counts / counts.sum()


def export_partition(shards: list[DatasetShard], path) -> None:
    """Write ``device_id,sample_index`` rows, one per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "sample_index"])
        for dev, shard in enumerate(shards):
            for idx in shard.indices:
                writer.writerow([dev, int(idx)])


def import_partition(path, train: DatasetShard, n_devices: Optional[int] = None) -> list[DatasetShard]:
    rows: dict[int, list[int]] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.setdefault(int(row["device_id"]), []).append(int(row["sample_index"]))
    n = n_devices if n_devices is not None else (max(rows) + 1 if rows else 0)
    return [subset(train, sorted(rows.get(dev, []))) for dev in range(n)]
