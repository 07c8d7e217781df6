"""Experiment orchestration for the FD / FL arms with optional augmentation.

A run is a pure function of its :class:`ExperimentConfig`: corpus, holdout
split, partition, augmentation and training all draw from named streams of
the master seed, so arms sharing a seed see the same device datasets.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .data import (
    Corpus,
    DeviceDataset,
    PartitionSpec,
    generate_corpus,
    load_idx_corpus,
    partition_manifest,
    partition_non_iid,
    split_holdout,
)
from .faug import (
    GaussianBackend,
    GeneratorConfig,
    SeedUpload,
    augment_to_iid,
    build_seed_upload,
    detect_target_labels,
    server_oversample,
    train_generator,
)
from .fd import FdConfig, run_fd
from .fl import FlConfig, run_fl, run_standalone
from .metrics import (
    CostLedger,
    LabelInventory,
    charge_faug,
    charge_fd_round,
    charge_fl_round,
    device_server_pl,
    inter_device_pl,
    write_cost_csv,
)
from .nn import DivergenceError
from .seeding import stream
from .training import TrainingLog

log = logging.getLogger(__name__)

METHOD_NAMES = {
    "fd": "FD (non-IID)",
    "fd-faug": "FD + FAug",
    "fl": "FL (non-IID)",
    "fl-faug": "FL + FAug",
    "standalone": "Standalone (non-IID)",
}

SUMMARY_COLUMNS = (
    "method", "arm", "devices", "num_target_labels", "redundant_count", "runs", "seed",
    "mean_final_accuracy", "reference_device", "reference_accuracy", "reference_target_accuracy",
    "logits", "model_parameters", "samples", "total_bits",
    "device_server_pl", "inter_device_pl", "final_accuracy_per_device",
)


@dataclass
class Prepared:
    train: Corpus
    test: Corpus
    spec: PartitionSpec
    datasets: list[DeviceDataset]
    reference_device: int


@dataclass
class FaugOutcome:
    datasets: list[DeviceDataset]
    uploads: list[SeedUpload]
    inventory: LabelInventory
    generator: object
    ledgers: dict[int, CostLedger]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    log: TrainingLog
    ledger: CostLedger  # reference device
    aggregate_ledger: CostLedger  # all devices
    pl: dict
    summary: dict
    manifest: dict
    datasets: list[DeviceDataset] = field(repr=False, default_factory=list)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    c = cfg.corpus
    if c.idx_images:
        return load_idx_corpus(c.idx_images, c.idx_labels, c.num_labels)
    return generate_corpus(c.num_labels, c.per_label, c.feature_dim, cfg.seed, c.separation, c.noise)


def prepare(cfg: ExperimentConfig) -> Prepared:
    train, test = split_holdout(build_corpus(cfg), cfg.corpus.test_fraction, cfg.seed)
    p = cfg.partition
    spec = PartitionSpec(p.num_devices, p.per_device_draw, p.num_target_labels, p.target_keep_count, cfg.seed)
    datasets = partition_non_iid(train, spec)
    ref = int(stream(cfg.seed, "reference-device").integers(p.num_devices))
    return Prepared(train, test, spec, datasets, ref)


def run_faug(datasets: list[DeviceDataset], cfg: ExperimentConfig) -> FaugOutcome:
    """Seed upload, server-side generator fit and per-device augmentation."""
    f, a = cfg.faug, cfg.accounting
    L = datasets[0].num_labels
    uploads = []
    inv = LabelInventory(L)
    ledgers = {}
    for ds in datasets:
        targets = detect_target_labels(ds, f.threshold_ratio)
        up = build_seed_upload(ds, targets, f.redundant_count, f.seeds_per_label, cfg.seed)
        uploads.append(up)
        inv.add_device(ds.device_id, up.target_labels, up.redundant_labels)
        ledgers[ds.device_id] = CostLedger()
        charge_faug(ledgers[ds.device_id], len(up), a.pixels_per_sample, a.generator_params)

    # the server only ever sees decoded wire forms
    received = [SeedUpload.from_bytes(up.to_bytes()) for up in uploads]
    pooled = server_oversample(received, f.oversample_factor, cfg.seed, f.jitter, L)
    if len(pooled) == 0:
        gen = GaussianBackend({}, {}, a.generator_params)
    else:
        gen = train_generator(pooled, GeneratorConfig(
            kind=f.backend, seed=cfg.seed, declared_param_count=a.generator_params,
            noise_dim=f.gan_noise_dim, hidden_dims=f.gan_hidden_dims, steps=f.gan_steps,
            batch_size=f.gan_batch_size, eta_generator=f.gan_eta, eta_discriminator=f.gan_eta,
        ))
    augmented = [augment_to_iid(ds, gen, f.tolerance, cfg.seed, f.jitter) for ds in datasets]
    return FaugOutcome(augmented, uploads, inv, gen, ledgers)


def _pl_report(inv: LabelInventory | None, ref: int) -> dict:
    if inv is None:
        return {"device_server_pl": None, "inter_device_pl": None, "per_device": {}}
    per_device = {}
    for i in inv.devices:
        ds_pl = device_server_pl(inv, i) if inv.targets.get(i) else None
        per_device[i] = {"device_server_pl": ds_pl, "inter_device_pl": inter_device_pl(inv, i) if inv.uploaded_union() else None}
    ref_row = per_device.get(ref, {"device_server_pl": None, "inter_device_pl": None})
    return {**ref_row, "per_device": per_device}


def train_arm(cfg: ExperimentConfig, datasets: list[DeviceDataset], test: Corpus, ledger: CostLedger) -> TrainingLog:
    t = cfg.training
    base = cfg.arm.removesuffix("-faug")
    if base == "fd":
        fc = FdConfig(t.local_steps, t.global_rounds, t.batch_size, t.gamma, t.eta, cfg.seed, t.hidden_dims, t.activation)
        return run_fd(datasets, fc, ledger, test, cfg.workers)
    lc = FlConfig(t.local_steps, t.global_rounds, t.batch_size, t.eta, cfg.seed, t.hidden_dims, t.activation,
                  cfg.accounting.model_params)
    if base == "fl":
        return run_fl(datasets, lc, ledger, test, cfg.workers)
    return run_standalone(datasets, lc, test, cfg.workers)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Partition, optionally augment, train one arm and tabulate costs and leakage."""
    prep = prepare(cfg)
    datasets = prep.datasets
    faug = None
    if cfg.uses_faug:
        faug = run_faug(datasets, cfg)
        datasets = faug.datasets

    aggregate = CostLedger()
    tlog = train_arm(cfg, datasets, prep.test, aggregate)
    ref = prep.reference_device
    ledger = tlog.device_ledgers[ref] + (faug.ledgers[ref] if faug else CostLedger())
    if faug:
        for led in faug.ledgers.values():
            aggregate = aggregate + led
    pl = _pl_report(faug.inventory if faug else None, ref)

    ref_ds = prep.datasets[ref]
    per_label = tlog.per_label_accuracy.get(ref, [])
    targets = sorted(ref_ds.target_labels)
    target_acc = statistics.fmean(per_label[t] for t in targets) if targets and per_label else None
    finals = [tlog.final_accuracy[ds.device_id] for ds in datasets]
    summary = {
        "method": METHOD_NAMES[cfg.arm],
        "arm": cfg.arm,
        "devices": cfg.partition.num_devices,
        "num_target_labels": cfg.partition.num_target_labels,
        "redundant_count": cfg.faug.redundant_count if cfg.uses_faug else 0,
        "runs": 1,
        "seed": cfg.seed,
        "mean_final_accuracy": statistics.fmean(finals) if finals else None,
        "reference_device": ref,
        "reference_accuracy": tlog.final_accuracy.get(ref),
        "reference_target_accuracy": target_acc,
        **ledger.as_row(),
        "device_server_pl": pl["device_server_pl"],
        "inter_device_pl": pl["inter_device_pl"],
        "final_accuracy_per_device": finals,
    }
    return ExperimentResult(cfg, tlog, ledger, aggregate, pl, summary,
                            partition_manifest(prep.datasets, prep.spec), datasets)


def merge_summaries(rows: list[dict]) -> dict:
    """Mean accuracy/leakage over repeats; costs from the first run."""
    out = dict(rows[0])
    out["runs"] = len(rows)
    for key in ("mean_final_accuracy", "reference_accuracy", "reference_target_accuracy",
                "device_server_pl", "inter_device_pl"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = statistics.fmean(vals) if vals else None
    out["final_accuracy_per_device"] = [
        statistics.fmean(col) for col in zip(*(r["final_accuracy_per_device"] for r in rows))
    ]
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if v != v else format(v, ".10g")
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def per_label_csv(results: list[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("seed", "device_id", "label", "accuracy", "is_target"))
    for res in results:
        targets = {ds.device_id: ds.target_labels for ds in res.datasets}
        for dev, accs in sorted(res.log.per_label_accuracy.items()):
            for ell, acc in enumerate(accs):
                w.writerow((res.config.seed, dev, ell, _fmt(acc), int(ell in targets[dev])))
    return buf.getvalue()


def log_jsonl(results: list[ExperimentResult], extra: dict | None = None) -> str:
    lines = []
    for res in results:
        for rec in res.log.records:
            lines.append(json.dumps({**rec, "seed": res.config.seed, **(extra or {})}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def write_outputs(out_dir: str | Path, results: list[ExperimentResult], summary: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary_csv([summary]))
    (out / "log.jsonl").write_text(log_jsonl(results))
    (out / "per_label_accuracy.csv").write_text(per_label_csv(results))
    write_cost_csv(out / "cost.csv", [(summary["method"], results[0].ledger)])
    (out / "partition_manifest.json").write_text(json.dumps(results[0].manifest, indent=2, sort_keys=True) + "\n")
    pl_doc = {str(k): v for k, v in results[0].pl["per_device"].items()}
    (out / "privacy_leakage.json").write_text(json.dumps(pl_doc, indent=2, sort_keys=True) + "\n")


def run_repeated(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[list[ExperimentResult], dict]:
    """``cfg.repeats`` runs on consecutive seeds; writes outputs when ``out_dir`` is set."""
    results = []
    try:
        for r in range(cfg.repeats):
            results.append(run_experiment(cfg.replace(seed=cfg.seed + r)))
    except DivergenceError as exc:
        partial = getattr(exc, "partial_log", None)
        if out_dir is not None and partial is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "log.jsonl").write_text(log_jsonl(results) + partial.to_jsonl())
        raise
    summary = merge_summaries([res.summary for res in results])
    if out_dir is not None:
        write_outputs(out_dir, results, summary)
    return results, summary


def sweep(
    cfg: ExperimentConfig,
    devices: list[int],
    redundant_counts: list[int] | None = None,
    target_counts: list[int] | None = None,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Grid over device count, redundant labels and target labels; one summary row each."""
    redundant_counts = redundant_counts or [cfg.faug.redundant_count]
    target_counts = target_counts or [cfg.partition.num_target_labels]
    rows, logs = [], []
    for m in devices:
        for nt in target_counts:
            for nr in redundant_counts:
                sub = cfg.replace(**{"partition.num_devices": m, "partition.num_target_labels": nt,
                                     "faug.redundant_count": nr})
                results, summary = run_repeated(sub)
                rows.append(summary)
                logs.append(log_jsonl(results, {"devices": m, "num_target_labels": nt, "redundant_count": nr}))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary_csv(rows))
        (out / "log.jsonl").write_text("".join(logs))
    return rows


def cost_calculator(
    arm: str,
    rounds: int,
    num_labels: int = 10,
    model_params: int = 1_199_648,
    generator_params: int = 1_493_520,
    seed_samples: int = 0,
    pixels_per_sample: int = 784,
) -> CostLedger:
    """Per-device cost of one arm assuming every label is exchanged every round."""
    if arm not in METHOD_NAMES:
        raise ValueError(f"unknown arm {arm!r}")
    ledger = CostLedger()
    base = arm.removesuffix("-faug")
    for _ in range(rounds):
        if base == "fd":
            charge_fd_round(ledger, 1, num_labels, num_labels, num_labels)
        elif base == "fl":
            charge_fl_round(ledger, 1, model_params)
    if arm.endswith("-faug"):
        charge_faug(ledger, seed_samples, pixels_per_sample, generator_params)
    return ledger


def table1_costs(cfg: ExperimentConfig | None = None) -> list[tuple[str, CostLedger]]:
    """The four cost rows for the configured schedule and declared sizes."""
    cfg = cfg or ExperimentConfig()
    seeds = cfg.partition.num_target_labels * cfg.faug.seeds_per_label + cfg.faug.redundant_count * cfg.faug.seeds_per_label
    a = cfg.accounting
    return [
        (METHOD_NAMES[arm], cost_calculator(arm, cfg.training.global_rounds, cfg.corpus.num_labels, a.model_params,
                                            a.generator_params, seeds, a.pixels_per_sample))
        for arm in ("fd-faug", "fd", "fl-faug", "fl")
    ]
