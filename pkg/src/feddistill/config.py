"""Experiment configuration: an INI document with one section per component.

Every key is optional; defaults reproduce the reference experimental setup
(2,000 draws per device, 3 target labels keeping 5 samples, 250 local steps
per round, 16 rounds, batch 64) on the synthetic corpus.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .faug import BACKENDS
from .metrics import FL_MODEL_PARAMS, GENERATOR_PARAMS, MNIST_PIXELS
from .nn import ACTIVATIONS

ARMS = ("fd", "fd-faug", "fl", "fl-faug", "standalone")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class CorpusConfig:
    num_labels: int = 10
    per_label: int = 6100
    feature_dim: int = 32
    separation: float = 0.35
    noise: float = 0.5
    test_fraction: float = 0.1
    idx_images: str = ""
    idx_labels: str = ""


@dataclass(frozen=True)
class PartitionConfig:
    num_devices: int = 10
    per_device_draw: int = 2000
    num_target_labels: int = 3
    target_keep_count: int = 5


@dataclass(frozen=True)
class TrainingConfig:
    local_steps: int = 250
    global_rounds: int = 16
    batch_size: int = 64
    gamma: float = 1.0
    eta: float = 0.05
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"


@dataclass(frozen=True)
class FaugConfig:
    threshold_ratio: float = 0.5
    redundant_count: int = 0
    seeds_per_label: int = 5
    backend: str = "oracle-gaussian"
    tolerance: float = 0.05
    oversample_factor: int = 20
    jitter: float = 0.05
    gan_steps: int = 2000
    gan_noise_dim: int = 8
    gan_hidden_dims: tuple[int, ...] = (32, 32, 32)
    gan_batch_size: int = 64
    gan_eta: float = 0.05


@dataclass(frozen=True)
class AccountingConfig:
    model_params: int = FL_MODEL_PARAMS
    generator_params: int = GENERATOR_PARAMS
    pixels_per_sample: int = MNIST_PIXELS


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    faug: FaugConfig = field(default_factory=FaugConfig)
    accounting: AccountingConfig = field(default_factory=AccountingConfig)
    arm: str = "fd"
    seed: int = 0
    repeats: int = 1
    workers: int = 1
    output_dir: str = "out"

    @property
    def uses_faug(self) -> bool:
        return self.arm.endswith("-faug")

    def replace(self, **changes) -> "ExperimentConfig":
        """Top-level or dotted (``"partition.num_devices"``) overrides."""
        nested: dict[str, dict] = {}
        top = {}
        for key, value in changes.items():
            if "." in key:
                sec, name = key.split(".", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(self, sec), **vals)
        out = dataclasses.replace(self, **top)
        validate(out)
        return out


SECTIONS = {
    "corpus": CorpusConfig,
    "partition": PartitionConfig,
    "training": TrainingConfig,
    "faug": FaugConfig,
    "accounting": AccountingConfig,
}
_EXPERIMENT_KEYS = ("arm", "seed", "repeats", "workers", "output_dir")


def _coerce(path: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _section(cls, items: dict[str, str], name: str):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        values[key] = _coerce(f"{name}.{key}", raw, getattr(defaults, key))
    return cls(**values)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    kwargs = {}
    for sec in cp.sections():
        if sec in SECTIONS:
            kwargs[sec] = _section(SECTIONS[sec], dict(cp[sec]), sec)
        elif sec == "experiment":
            defaults = ExperimentConfig()
            for key, raw in cp[sec].items():
                if key not in _EXPERIMENT_KEYS:
                    raise ConfigError(f"experiment.{key}", "unknown key")
                kwargs[key] = _coerce(f"experiment.{key}", raw, getattr(defaults, key))
        else:
            raise ConfigError(sec, "unknown section")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), exc.strerror or "unreadable") from None
    return parse_config(text)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: ExperimentConfig) -> None:
    c, p, t, f, a = cfg.corpus, cfg.partition, cfg.training, cfg.faug, cfg.accounting
    _require(cfg.arm in ARMS, "experiment.arm", f"must be one of {', '.join(ARMS)}")
    _require(cfg.seed >= 0, "experiment.seed", "must be >= 0")
    _require(cfg.repeats >= 1, "experiment.repeats", "must be >= 1")
    _require(cfg.workers >= 1, "experiment.workers", "must be >= 1")

    _require(c.num_labels >= 2, "corpus.num_labels", "must be >= 2")
    _require(c.per_label >= 1, "corpus.per_label", "must be >= 1")
    _require(c.feature_dim >= 2, "corpus.feature_dim", "must be >= 2")
    _require(0.0 <= c.test_fraction < 1.0, "corpus.test_fraction", "must be in [0, 1)")
    _require(bool(c.idx_images) == bool(c.idx_labels), "corpus.idx_labels",
             "idx_images and idx_labels must be given together")

    _require(p.num_devices >= 1, "partition.num_devices", "must be >= 1")
    _require(p.per_device_draw >= 1, "partition.per_device_draw", "must be >= 1")
    _require(0 <= p.num_target_labels < c.num_labels, "partition.num_target_labels",
             f"must be in [0, {c.num_labels})")
    _require(p.target_keep_count >= 1, "partition.target_keep_count", "must be >= 1")
    if not c.idx_images:
        train_size = c.num_labels * (c.per_label - round(c.test_fraction * c.per_label))
        _require(p.per_device_draw <= train_size, "partition.per_device_draw",
                 f"exceeds training corpus size {train_size}")

    for name in ("local_steps", "global_rounds"):
        _require(getattr(t, name) >= 0, f"training.{name}", "must be >= 0")
    _require(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _require(t.eta > 0, "training.eta", "must be > 0")
    _require(t.gamma >= 0, "training.gamma", "must be >= 0")
    _require(all(h >= 1 for h in t.hidden_dims), "training.hidden_dims", "sizes must be >= 1")
    _require(t.activation in ACTIVATIONS, "training.activation", f"must be one of {ACTIVATIONS}")

    if cfg.uses_faug:
        _require(0.0 < f.threshold_ratio < 1.0, "faug.threshold_ratio", "must be in (0, 1)")
        _require(0 <= f.redundant_count <= c.num_labels - p.num_target_labels, "faug.redundant_count",
                 f"must be in [0, {c.num_labels - p.num_target_labels}]")
        _require(f.seeds_per_label >= 1, "faug.seeds_per_label", "must be >= 1")
        _require(f.backend in BACKENDS, "faug.backend", f"must be one of {BACKENDS}")
        _require(f.tolerance >= 0, "faug.tolerance", "must be >= 0")
        _require(f.oversample_factor >= 1, "faug.oversample_factor", "must be >= 1")
        _require(0.0 <= f.jitter <= 1.0, "faug.jitter", "must be in [0, 1]")

    _require(a.model_params >= 1, "accounting.model_params", "must be positive")
    _require(a.generator_params >= 1, "accounting.generator_params", "must be positive")
    _require(a.pixels_per_sample >= 1, "accounting.pixels_per_sample", "must be positive")


def render_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for fld in dataclasses.fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), fld.name)
            lines.append(f"{fld.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        lines.append("")
    lines.append("[experiment]")
    for key in _EXPERIMENT_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    return "\n".join(lines) + "\n"
