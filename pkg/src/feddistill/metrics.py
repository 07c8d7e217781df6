"""Communication-cost ledger and privacy-leakage ratios.

All cost arithmetic is integer-only. Costs default to the per-device view: a
single device's uplink and downlink traffic, which is how the reference-device
cost columns are tabulated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

BITS_PER_LOGIT = 32
BITS_PER_PARAMETER = 32
BITS_PER_PIXEL = 8

MNIST_PIXELS = 28 * 28
FL_MODEL_PARAMS = 1_199_648
GENERATOR_PARAMS = 1_493_520


@dataclass
class CostLedger:
    logit_scalars: int = 0
    model_parameters: int = 0
    sample_pixels: int = 0
    samples: int = 0

    @property
    def total_bits(self) -> int:
        return (
            BITS_PER_LOGIT * self.logit_scalars
            + BITS_PER_PARAMETER * self.model_parameters
            + BITS_PER_PIXEL * self.sample_pixels
        )

    def __add__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_row(self) -> dict[str, int]:
        return {
            "logits": self.logit_scalars,
            "model_parameters": self.model_parameters,
            "samples": self.samples,
            "total_bits": self.total_bits,
        }


def _nonneg(**kw: int) -> None:
    for name, v in kw.items():
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")


def charge_fd_round(ledger: CostLedger, num_devices: int, labels_up: int, labels_down: int, num_labels: int) -> None:
    """One logit exchange: each label carries a length-L logit vector."""
    _nonneg(num_devices=num_devices, labels_up=labels_up, labels_down=labels_down, num_labels=num_labels)
    ledger.logit_scalars += num_devices * (labels_up + labels_down) * num_labels


def charge_fl_round(ledger: CostLedger, num_devices: int, declared_params: int) -> None:
    """One parameter exchange: full model up plus full model down."""
    _nonneg(num_devices=num_devices, declared_params=declared_params)
    ledger.model_parameters += 2 * num_devices * declared_params


def charge_faug(ledger: CostLedger, num_seed_samples: int, pixels_per_sample: int, generator_params: int) -> None:
    """Seed-sample upload plus one generator download, for one device."""
    _nonneg(num_seed_samples=num_seed_samples, pixels_per_sample=pixels_per_sample,
            generator_params=generator_params)
    ledger.samples += num_seed_samples
    ledger.sample_pixels += num_seed_samples * pixels_per_sample
    ledger.model_parameters += generator_params


COST_COLUMNS = ("method", "logits", "model_parameters", "samples", "total_bits")


def write_cost_csv(path: str | Path, rows: list[tuple[str, CostLedger]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COST_COLUMNS)
        for method, ledger in rows:
            r = ledger.as_row()
            w.writerow([method, r["logits"], r["model_parameters"], r["samples"], r["total_bits"]])


@dataclass
class LabelInventory:
    """Per-device target and redundant label sets over ``num_labels`` labels."""

    num_labels: int
    targets: dict[int, frozenset[int]] = field(default_factory=dict)
    redundant: dict[int, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.targets = {i: frozenset(s) for i, s in self.targets.items()}
        self.redundant = {i: frozenset(s) for i, s in self.redundant.items()}
        for i in set(self.targets) | set(self.redundant):
            t, r = self.targets.get(i, frozenset()), self.redundant.get(i, frozenset())
            if t & r:
                raise ValueError(f"device {i}: labels {sorted(t & r)} are both target and redundant")
            bad = [ell for ell in t | r if not 0 <= ell < self.num_labels]
            if bad:
                raise ValueError(f"device {i}: labels {bad} outside [0, {self.num_labels})")

    @property
    def devices(self) -> list[int]:
        return sorted(set(self.targets) | set(self.redundant))

    def add_device(self, device_id: int, targets, redundant=()) -> None:
        if set(targets) & set(redundant):
            raise ValueError("target and redundant labels overlap")
        self.targets[device_id] = frozenset(targets)
        self.redundant[device_id] = frozenset(redundant)

    def uploaded_union(self) -> frozenset[int]:
        out: set[int] = set()
        for i in self.devices:
            out |= self.targets.get(i, frozenset()) | self.redundant.get(i, frozenset())
        return frozenset(out)


def device_server_pl(inv: LabelInventory, device: int, exact: bool = False) -> float | Fraction:
    """|targets| / (|targets| + |redundant|) for one device."""
    t = len(inv.targets.get(device, ()))
    r = len(inv.redundant.get(device, ()))
    if t == 0:
        raise ValueError(f"device {device} has no target labels; device-server leakage undefined")
    v = Fraction(t, t + r)
    return v if exact else float(v)


def inter_device_pl(inv: LabelInventory, device: int, exact: bool = False) -> float | Fraction:
    """|targets of device| / |union over all devices of (targets | redundant)|.

    Assumes every uploaded label is generable by the shared generator.
    """
    union = inv.uploaded_union()
    if not union:
        raise ValueError("no labels uploaded by any device")
    v = Fraction(len(inv.targets.get(device, ())), len(union))
    return v if exact else float(v)
