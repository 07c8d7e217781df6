"""Synthetic labeled corpus, IDX ingestion and the non-IID device partition.

Partitioning follows the target-label elimination recipe: every device draws
a uniform random subset of the training corpus, picks a few labels uniformly
at random as its *target labels*, and keeps only a handful of samples of each.
"""

from __future__ import annotations

import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Corpus:
    features: np.ndarray  # (N, d), values in [0, 1]
    labels: np.ndarray  # (N,), ints in [0, num_labels)
    num_labels: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples_per_label(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_labels)
        return {ell: int(c) for ell, c in enumerate(counts)}


def generate_corpus(
    num_labels: int,
    per_label: int,
    feature_dim: int,
    seed: int,
    separation: float = 0.25,
    noise: float = 0.5,
) -> Corpus:
    """``per_label`` samples per label around a seeded per-label prototype.

    Prototypes are a shared base plus a label-specific offset of size
    ``separation``; each sample adds uniform noise in [-noise, noise] and is
    clipped to [0, 1]. Smaller separation or larger noise makes labels
    overlap more.
    """
    if num_labels < 2 or per_label < 1 or feature_dim < 2:
        raise ValueError("need num_labels >= 2, per_label >= 1, feature_dim >= 2")
    proto_rng = stream(seed, "corpus-prototypes")
    base = proto_rng.uniform(0.3, 0.7, size=feature_dim)
    offsets = proto_rng.uniform(-1.0, 1.0, size=(num_labels, feature_dim)) * separation
    feats, labels = [], []
    for ell in range(num_labels):
        rng = stream(seed, "corpus-samples", ell)
        x = base + offsets[ell] + rng.uniform(-noise, noise, size=(per_label, feature_dim))
        feats.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(per_label, ell, dtype=np.int64))
    return Corpus(np.concatenate(feats), np.concatenate(labels), num_labels)


def split_holdout(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified (train, test) split; ``fraction`` of each label goes to test."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = stream(seed, "holdout")
    test_idx = []
    for ell in range(corpus.num_labels):
        idx = np.flatnonzero(corpus.labels == ell)
        k = int(round(fraction * len(idx)))
        test_idx.append(rng.choice(idx, size=k, replace=False))
    mask = np.zeros(len(corpus), dtype=bool)
    mask[np.concatenate(test_idx)] = True
    train = Corpus(corpus.features[~mask], corpus.labels[~mask], corpus.num_labels)
    test = Corpus(corpus.features[mask], corpus.labels[mask], corpus.num_labels)
    return train, test


_IDX_DTYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file (optionally gzipped) into an array of its stated shape."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX dtype 0x{code:02x}")
    dims = [int.from_bytes(raw[4 + 4 * k : 8 + 4 * k], "big") for k in range(ndim)]
    dtype = _IDX_DTYPES[code]
    offset = 4 + 4 * ndim
    n = math.prod(dims)
    if len(raw) - offset != n * dtype.itemsize:
        raise ValueError(f"{path}: header says {dims}, payload has {len(raw) - offset} bytes")
    return np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(dims)


def load_idx_corpus(images: str | Path, labels: str | Path, num_labels: int | None = None) -> Corpus:
    """MNIST-style image/label IDX pair; unsigned-byte pixels are scaled to [0, 1]."""
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64).ravel()
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    x = x.reshape(len(x), -1).astype(np.float64)
    if x.size and x.max() > 1.0:
        x = x / 255.0
    L = num_labels if num_labels is not None else int(y.max()) + 1
    return Corpus(x, y, L)


@dataclass(frozen=True)
class PartitionSpec:
    num_devices: int
    per_device_draw: int = 2000
    num_target_labels: int = 3
    target_keep_count: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        if self.num_target_labels < 0:
            raise ValueError("num_target_labels must be >= 0")
        if self.target_keep_count < 1:
            raise ValueError("target_keep_count must be >= 1")
        if self.per_device_draw < 1:
            raise ValueError("per_device_draw must be >= 1")


@dataclass
class DeviceDataset:
    device_id: int
    features: np.ndarray
    labels: np.ndarray
    num_labels: int
    target_labels: frozenset[int] = frozenset()
    # row index into the source corpus; -1 marks a synthetic sample
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def synthetic(self) -> np.ndarray:
        return self.indices < 0

    @property
    def label_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_labels)
        return {ell: int(c) for ell, c in enumerate(counts)}


def partition_non_iid(corpus: Corpus, spec: PartitionSpec) -> list[DeviceDataset]:
    """Independent uniform draws per device, then target-label elimination.

    Draws are without replacement within a device but independent across
    devices, so two devices may hold the same corpus row. Each device uses its
    own RNG stream keyed on ``(seed, device_id)``.
    """
    L = corpus.num_labels
    if spec.num_target_labels >= L:
        raise ValueError(f"num_target_labels={spec.num_target_labels} must be < num_labels={L}")
    if spec.per_device_draw > len(corpus):
        raise ValueError(f"per_device_draw={spec.per_device_draw} exceeds corpus size {len(corpus)}")
    return [_partition_device(corpus, spec, i) for i in range(spec.num_devices)]


def _partition_device(corpus: Corpus, spec: PartitionSpec, device_id: int) -> DeviceDataset:
    rng = stream(spec.seed, "partition", device_id)
    L = corpus.num_labels
    drawn = np.sort(rng.choice(len(corpus), size=spec.per_device_draw, replace=False))
    drawn_labels = corpus.labels[drawn]
    counts = np.bincount(drawn_labels, minlength=L)

    targets = rng.choice(L, size=spec.num_target_labels, replace=False)
    if spec.num_target_labels and (counts[targets] < spec.target_keep_count).any():
        eligible = np.flatnonzero(counts >= spec.target_keep_count)
        if len(eligible) < spec.num_target_labels:
            raise ValueError(f"device {device_id}: too few labels with {spec.target_keep_count} samples")
        log.info("device %d: target labels %s under-drawn, re-drawing among present labels",
                 device_id, sorted(targets.tolist()))
        targets = rng.choice(eligible, size=spec.num_target_labels, replace=False)

    keep = np.ones(len(drawn), dtype=bool)
    for ell in targets:
        pos = np.flatnonzero(drawn_labels == ell)
        kept = rng.choice(pos, size=spec.target_keep_count, replace=False)
        keep[pos] = False
        keep[kept] = True
    idx = drawn[keep]
    return DeviceDataset(
        device_id=device_id,
        features=corpus.features[idx],
        labels=corpus.labels[idx],
        num_labels=L,
        target_labels=frozenset(int(t) for t in targets),
        indices=idx,
    )


def is_iid(ds: DeviceDataset, tolerance: float) -> bool:
    """True iff max label count <= (1 + tolerance) * min label count."""
    counts = list(ds.label_counts.values())
    return max(counts) <= (1.0 + tolerance) * min(counts)


def partition_manifest(datasets: list[DeviceDataset], spec: PartitionSpec) -> dict:
    return {
        "draw_policy": "independent uniform draws per device; devices may share samples",
        "spec": {
            "num_devices": spec.num_devices,
            "per_device_draw": spec.per_device_draw,
            "num_target_labels": spec.num_target_labels,
            "target_keep_count": spec.target_keep_count,
            "seed": spec.seed,
        },
        "devices": [
            {
                "device_id": ds.device_id,
                "num_samples": len(ds),
                "target_labels": sorted(ds.target_labels),
                "label_counts": {str(k): v for k, v in ds.label_counts.items()},
            }
            for ds in datasets
        ],
    }


def write_manifest(path: str | Path, datasets: list[DeviceDataset], spec: PartitionSpec) -> None:
    Path(path).write_text(json.dumps(partition_manifest(datasets, spec), indent=2, sort_keys=True) + "\n")
