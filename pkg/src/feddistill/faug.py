"""Federated augmentation.

Devices find the labels they are short of (target labels), upload a few seed
samples of them together with samples of some redundant labels, and the
server oversamples the pooled seeds and fits a label-conditioned generator.
Every device then downloads the generator and tops up its short labels until
its label histogram is balanced.

Two generator backends exist: a small conditional GAN trained with plain SGD,
and a per-label diagonal Gaussian that is fast and fully deterministic.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, DeviceDataset, is_iid
from .metrics import GENERATOR_PARAMS
from .nn import ModelWeights, dense_backward, dense_forward, init_weights, sgd_step
from .seeding import stream

log = logging.getLogger(__name__)

BACKENDS = ("oracle-gaussian", "conditional-gan")
NOISE_FLOOR = 1e-6


class LabelNotGenerable(ValueError):
    def __init__(self, label: int):
        self.label = label
        super().__init__(f"label {label} is needed but the generator cannot produce it")


@dataclass
class SeedUpload:
    """Samples a device sends to the server.

    ``target_labels`` and ``redundant_labels`` stay on the device; the wire
    form carries only the device id and the samples.
    """

    device_id: int
    features: np.ndarray
    labels: np.ndarray
    target_labels: frozenset[int] = frozenset()
    redundant_labels: frozenset[int] = frozenset()

    def __len__(self) -> int:
        return len(self.labels)

    def to_bytes(self) -> bytes:
        n = len(self.labels)
        d = self.features.shape[1] if n else 0
        out = [struct.pack("<III", self.device_id, n, d)]
        feats = np.ascontiguousarray(self.features, dtype="<f4")
        for j in range(n):
            out.append(struct.pack("<H", int(self.labels[j])))
            out.append(feats[j].tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SeedUpload":
        device_id, n, d = struct.unpack_from("<III", raw, 0)
        rec = 2 + 4 * d
        if len(raw) != 12 + n * rec:
            raise ValueError(f"upload declares {n} samples of dim {d} but has {len(raw)} bytes")
        labels = np.empty(n, dtype=np.int64)
        feats = np.empty((n, d), dtype=np.float64)
        pos = 12
        for j in range(n):
            (labels[j],) = struct.unpack_from("<H", raw, pos)
            feats[j] = np.frombuffer(raw, dtype="<f4", count=d, offset=pos + 2)
            pos += rec
        return cls(device_id, feats, labels)


def detect_target_labels(ds: DeviceDataset, threshold_ratio: float = 0.5) -> frozenset[int]:
    """Labels whose count is below ``threshold_ratio`` times the median count."""
    if not 0.0 < threshold_ratio < 1.0:
        raise ValueError("threshold_ratio must be in (0, 1)")
    counts = ds.label_counts
    cutoff = threshold_ratio * float(np.median(list(counts.values())))
    return frozenset(ell for ell, c in counts.items() if c < cutoff)


def build_seed_upload(
    ds: DeviceDataset,
    targets: frozenset[int] | set[int],
    redundant_count: int = 0,
    seeds_per_label: int = 5,
    seed: int = 0,
) -> SeedUpload:
    """Seed samples of every target label plus ``redundant_count`` decoy labels."""
    targets = frozenset(int(t) for t in targets)
    L = ds.num_labels
    if redundant_count < 0 or redundant_count > L - len(targets):
        raise ValueError(f"redundant_count={redundant_count} must be in [0, {L - len(targets)}]")
    if seeds_per_label < 1:
        raise ValueError("seeds_per_label must be >= 1")
    rng = stream(seed, "seed-upload", ds.device_id)
    real = ~ds.synthetic
    by_label = {ell: np.flatnonzero(real & (ds.labels == ell)) for ell in range(L)}

    for ell in sorted(targets):
        if len(by_label[ell]) == 0:
            raise ValueError(f"device {ds.device_id} has no samples of target label {ell}")
    candidates = [ell for ell in range(L) if ell not in targets and len(by_label[ell]) > 0]
    if redundant_count > len(candidates):
        raise ValueError(f"device {ds.device_id}: only {len(candidates)} non-target labels have samples")
    redundant = frozenset(int(x) for x in rng.choice(candidates, size=redundant_count, replace=False))

    picked = []
    for ell in sorted(targets | redundant):
        pool = by_label[ell]
        k = min(seeds_per_label, len(pool))
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    idx = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    d = ds.features.shape[1]
    return SeedUpload(
        ds.device_id,
        ds.features[idx].reshape(len(idx), d),
        ds.labels[idx],
        targets,
        redundant,
    )


def jitter(x: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise in [-amplitude, amplitude], clamped to [0, 1]."""
    if amplitude == 0.0:
        return x.copy()
    return np.clip(x + rng.uniform(-amplitude, amplitude, size=x.shape), 0.0, 1.0)


def server_oversample(
    uploads: list[SeedUpload],
    factor: int = 20,
    seed: int = 0,
    amplitude: float = 0.05,
    num_labels: int | None = None,
) -> Corpus:
    """Replicate every uploaded sample ``factor`` times with bounded jitter."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    rng = stream(seed, "oversample")
    feats, labels = [], []
    for up in sorted(uploads, key=lambda u: u.device_id):
        if len(up) == 0:
            continue
        reps = np.repeat(up.features, factor, axis=0)
        feats.append(jitter(reps, amplitude, rng))
        labels.append(np.repeat(up.labels, factor))
    if not feats:
        return Corpus(np.empty((0, 0)), np.empty(0, dtype=np.int64), num_labels or 0)
    y = np.concatenate(labels).astype(np.int64)
    L = num_labels if num_labels is not None else int(y.max()) + 1
    return Corpus(np.concatenate(feats), y, L)


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "oracle-gaussian"
    seed: int = 0
    declared_param_count: int = GENERATOR_PARAMS
    # conditional-gan only
    noise_dim: int = 8
    hidden_dims: tuple[int, ...] = (32, 32, 32)
    steps: int = 2000
    batch_size: int = 64
    eta_generator: float = 0.05
    eta_discriminator: float = 0.05

    def __post_init__(self):
        if self.kind not in BACKENDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; expected one of {BACKENDS}")


@dataclass
class GaussianBackend:
    """Per-label diagonal Gaussian fitted to the server's training corpus."""

    means: dict[int, np.ndarray]
    stds: dict[int, np.ndarray]
    declared_param_count: int = GENERATOR_PARAMS
    kind: str = field(default="oracle-gaussian", init=False)

    @property
    def generable_labels(self) -> frozenset[int]:
        return frozenset(self.means)

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        if label not in self.means:
            raise LabelNotGenerable(label)
        mu, sd = self.means[label], self.stds[label]
        return np.clip(mu + sd * rng.standard_normal((n, len(mu))), 0.0, 1.0)

    def to_checkpoint(self) -> dict:
        labels = sorted(self.means)
        flat = np.concatenate([np.concatenate([self.means[l], self.stds[l]]) for l in labels]) if labels else []
        dim = len(self.means[labels[0]]) if labels else 0
        return {"kind": self.kind, "dims": [len(labels), dim], "generable_labels": labels,
                "declared_param_count": self.declared_param_count, "params": np.asarray(flat).tolist()}


@dataclass
class CGanBackend:
    """Generator half of a conditional GAN: G([noise, onehot(label)]) in [0, 1]^d."""

    generator: ModelWeights
    noise_dim: int
    num_labels: int
    labels: frozenset[int]
    declared_param_count: int = GENERATOR_PARAMS
    kind: str = field(default="conditional-gan", init=False)

    @property
    def generable_labels(self) -> frozenset[int]:
        return self.labels

    def generate(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((len(labels), self.noise_dim))
        out, _ = dense_forward(self.generator, np.hstack([z, _one_hot(labels, self.num_labels)]))
        return _sigmoid(out)

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        if label not in self.labels:
            raise LabelNotGenerable(label)
        return self.generate(np.full(n, label), rng)

    def to_checkpoint(self) -> dict:
        doc = self.generator.to_flat()
        doc.update({"kind": self.kind, "generable_labels": sorted(self.labels), "noise_dim": self.noise_dim,
                    "num_labels": self.num_labels, "declared_param_count": self.declared_param_count})
        return doc


GenerativeBackend = GaussianBackend | CGanBackend


def load_generator(doc: dict) -> GenerativeBackend:
    labels = [int(x) for x in doc["generable_labels"]]
    if doc["kind"] == "oracle-gaussian":
        n, dim = doc["dims"]
        flat = np.asarray(doc["params"], dtype=np.float64).reshape(n, 2 * dim) if n else np.empty((0, 0))
        return GaussianBackend(
            {l: flat[k, :dim].copy() for k, l in enumerate(labels)},
            {l: flat[k, dim:].copy() for k, l in enumerate(labels)},
            int(doc["declared_param_count"]),
        )
    if doc["kind"] == "conditional-gan":
        return CGanBackend(ModelWeights.from_flat(doc), int(doc["noise_dim"]), int(doc["num_labels"]),
                           frozenset(labels), int(doc["declared_param_count"]))
    raise ValueError(f"unknown generator kind {doc['kind']!r}")


def _one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    out = np.zeros((len(labels), num_labels))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def train_generator(train: Corpus, cfg: GeneratorConfig = GeneratorConfig()) -> GenerativeBackend:
    if len(train) == 0:
        raise ValueError("empty training corpus")
    counts = train.samples_per_label
    present = sorted(ell for ell, c in counts.items() if c > 0)
    short = [ell for ell in present if counts[ell] < 2]
    if short:
        raise ValueError(f"labels {short} have fewer than 2 samples")
    if cfg.kind == "oracle-gaussian":
        means, stds = {}, {}
        for ell in present:
            x = train.features[train.labels == ell]
            means[ell] = x.mean(axis=0)
            stds[ell] = np.maximum(x.std(axis=0), NOISE_FLOOR)
        return GaussianBackend(means, stds, cfg.declared_param_count)
    return _train_cgan(train, present, cfg)


def _train_cgan(train: Corpus, present: list[int], cfg: GeneratorConfig) -> CGanBackend:
    # non-saturating GAN loss, one discriminator step per generator step
    L, d = train.num_labels, train.feature_dim
    rng = stream(cfg.seed, "cgan")
    gen = init_weights((cfg.noise_dim + L, *cfg.hidden_dims, d), rng)
    disc = init_weights((d + L, *cfg.hidden_dims, 1), rng)
    B = cfg.batch_size
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(train), size=B)
        x_real = train.features[idx]
        c = _one_hot(train.labels[idx], L)
        z = rng.standard_normal((B, cfg.noise_dim))
        g_out, g_cache = dense_forward(gen, np.hstack([z, c]))
        x_fake = _sigmoid(g_out)

        s_real, cache_r = dense_forward(disc, np.hstack([x_real, c]))
        s_fake, cache_f = dense_forward(disc, np.hstack([x_fake, c]))
        grad_r, _ = dense_backward(disc, cache_r, (_sigmoid(s_real) - 1.0) / B)
        grad_f, _ = dense_backward(disc, cache_f, _sigmoid(s_fake) / B)
        grad_d = ModelWeights(
            tuple((a + c_, b + d_) for (a, b), (c_, d_) in zip(grad_r.layers, grad_f.layers)),
            disc.activation,
        )
        disc = sgd_step(disc, grad_d, cfg.eta_discriminator)

        s_fake, cache_f = dense_forward(disc, np.hstack([x_fake, c]))
        _, d_in = dense_backward(disc, cache_f, (_sigmoid(s_fake) - 1.0) / B)
        d_x = d_in[:, :d] * x_fake * (1.0 - x_fake)
        grad_g, _ = dense_backward(gen, g_cache, d_x)
        gen = sgd_step(gen, grad_g, cfg.eta_generator)
    return CGanBackend(gen, cfg.noise_dim, L, frozenset(present), cfg.declared_param_count)


def _iid_floor(max_count: int, tolerance: float) -> int:
    m = max(1, math.ceil(max_count / (1.0 + tolerance)))
    while max_count > (1.0 + tolerance) * m:
        m += 1
    while m > 1 and max_count <= (1.0 + tolerance) * (m - 1):
        m -= 1
    return m


def augment_to_iid(
    ds: DeviceDataset,
    gen: GenerativeBackend,
    tolerance: float = 0.05,
    seed: int = 0,
    amplitude: float = 0.05,
) -> DeviceDataset:
    """Top up every short label until ``is_iid(ds, tolerance)`` holds.

    Labels the generator covers are filled with generated samples. A short
    non-target label the generator does not cover is filled with jittered
    copies of the device's own samples of it; a short target label the
    generator does not cover is an error. Real samples are kept as-is and
    precede all synthetic ones.
    """
    missing = sorted(ds.target_labels - gen.generable_labels)
    if missing:
        raise LabelNotGenerable(missing[0])
    if is_iid(ds, tolerance):
        return ds
    counts = ds.label_counts
    floor = _iid_floor(max(counts.values()), tolerance)
    rng = stream(seed, "augment", ds.device_id)
    new_x, new_y = [ds.features], [ds.labels]
    for ell in range(ds.num_labels):
        need = floor - counts[ell]
        if need <= 0:
            continue
        if ell in gen.generable_labels:
            x = gen.sample(ell, need, rng)
        else:
            own = np.flatnonzero((ds.labels == ell) & ~ds.synthetic)
            if ell in ds.target_labels or len(own) == 0:
                raise LabelNotGenerable(ell)
            x = jitter(ds.features[rng.choice(own, size=need)], amplitude, rng)
        new_x.append(x)
        new_y.append(np.full(need, ell, dtype=np.int64))
    added = sum(len(y) for y in new_y[1:])
    log.debug("device %d: added %d synthetic samples", ds.device_id, added)
    return DeviceDataset(
        ds.device_id,
        np.concatenate(new_x),
        np.concatenate(new_y),
        ds.num_labels,
        ds.target_labels,
        np.concatenate([ds.indices, np.full(added, -1, dtype=np.int64)]),
    )
