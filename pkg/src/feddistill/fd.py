"""Federated distillation: per-label logit exchange with leave-one-out teachers.

Each round has two phases. Devices train locally with a distillation
regularizer pulling their output toward the teacher vector for the sample's
label, while accumulating their own post-update outputs per label. The server
then gives every device, for every label, the mean of all *other* devices'
per-label averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, DeviceDataset
from .metrics import CostLedger, charge_fd_round
from .nn import DivergenceError, ModelWeights, init_weights
from .seeding import stream
from .training import TrainingLog, evaluate, finalize, local_sgd, map_devices


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FdConfig:
    local_steps: int = 250
    global_rounds: int = 16
    batch_size: int = 64
    gamma: float = 1.0
    eta: float = 0.05
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"

    def __post_init__(self):
        for name in ("local_steps", "global_rounds", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size == 0:
            raise ValueError("batch_size must be > 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass
class DeviceState:
    device_id: int
    weights: ModelWeights
    logit_acc: np.ndarray  # (L, L): row l is the running sum of outputs on label l
    counts: np.ndarray  # (L,)
    global_avgs: dict[int, np.ndarray | None] = field(default_factory=dict)

    @classmethod
    def fresh(cls, device_id: int, weights: ModelWeights) -> "DeviceState":
        L = weights.num_labels
        return cls(device_id, weights, np.zeros((L, L)), np.zeros(L, dtype=np.int64))

    def teacher(self, label: int) -> np.ndarray | None:
        return self.global_avgs.get(label)


@dataclass(frozen=True)
class LocalReport:
    device_id: int
    round: int
    num_labels: int
    per_label: dict[int, np.ndarray]  # only labels seen this round


def initial_weights(feature_dim: int, num_labels: int, cfg: FdConfig, device_id: int) -> ModelWeights:
    dims = (feature_dim, *cfg.hidden_dims, num_labels)
    return init_weights(dims, stream(cfg.seed, "init", device_id), cfg.activation)


def local_training_phase(
    state: DeviceState,
    ds: DeviceDataset,
    cfg: FdConfig,
    round_: int = 0,
    trace: list | None = None,
) -> tuple[DeviceState, LocalReport]:
    """Distillation-regularized local SGD; returns the new state and its report.

    Accumulators are reset first. ``trace``, if given, receives every
    (label, post-update output) pair in visiting order.
    """
    L = state.weights.num_labels
    acc = np.zeros((L, L))
    counts = np.zeros(L, dtype=np.int64)

    def record(label: int, p: np.ndarray) -> None:
        acc[label] += p
        counts[label] += 1
        if trace is not None:
            trace.append((label, p))

    rng = stream(cfg.seed, "fd-batches", state.device_id, round_)
    w = local_sgd(state.weights, ds, cfg.local_steps, cfg.batch_size, cfg.eta, rng,
                  teacher_for=state.teacher, gamma=cfg.gamma, on_output=record)
    new_state = DeviceState(state.device_id, w, acc, counts, dict(state.global_avgs))
    per_label = {ell: acc[ell] / counts[ell] for ell in range(L) if counts[ell] > 0}
    return new_state, LocalReport(state.device_id, round_, L, per_label)


def global_ensembling_phase(reports: list[LocalReport]) -> dict[int, dict[int, np.ndarray | None]]:
    """Leave-one-out per-label averages for every reporting device.

    For device i and label l the teacher is the mean of the other devices'
    reports for l; it is None when no other device reported l.
    """
    if len(reports) < 2:
        raise ProtocolError(f"need at least 2 reports, got {len(reports)}")
    ids = [r.device_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate device reports")
    L = reports[0].num_labels
    if any(r.num_labels != L for r in reports):
        raise ProtocolError("reports disagree on the number of labels")
    ordered = sorted(reports, key=lambda r: r.device_id)

    totals = np.zeros((L, L))
    n_reporting = np.zeros(L, dtype=np.int64)
    for r in ordered:
        for ell, v in r.per_label.items():
            totals[ell] += v
            n_reporting[ell] += 1

    out: dict[int, dict[int, np.ndarray | None]] = {}
    for r in ordered:
        teachers: dict[int, np.ndarray | None] = {}
        for ell in range(L):
            own = r.per_label.get(ell)
            denom = n_reporting[ell] - (1 if own is not None else 0)
            if denom == 0:
                teachers[ell] = None
                continue
            s = totals[ell] - own if own is not None else totals[ell].copy()
            teachers[ell] = np.maximum(s / denom, 0.0)
        out[r.device_id] = teachers
    return out


def run_fd(
    datasets: list[DeviceDataset],
    cfg: FdConfig,
    ledger: CostLedger | None = None,
    test: Corpus | None = None,
    workers: int = 1,
) -> TrainingLog:
    """Alternate local training and ensembling for ``cfg.global_rounds`` rounds.

    ``ledger`` is charged with the traffic of all devices; per-device ledgers
    are kept on the returned log.
    """
    if len(datasets) < 2:
        raise ProtocolError("federated distillation needs at least 2 devices")
    ledger = ledger if ledger is not None else CostLedger()
    L = datasets[0].num_labels
    d = datasets[0].features.shape[1]
    states = [DeviceState.fresh(ds.device_id, initial_weights(d, L, cfg, ds.device_id)) for ds in datasets]
    log = TrainingLog(device_ledgers={ds.device_id: CostLedger() for ds in datasets})

    try:
        for k in range(1, cfg.global_rounds + 1):
            results = map_devices(
                lambda pair: local_training_phase(pair[0], pair[1], cfg, k),
                list(zip(states, datasets)),
                workers,
            )
            states = [s for s, _ in results]
            reports = [r for _, r in results]
            teachers = global_ensembling_phase(reports)
            for s, r in zip(states, reports):
                s.global_avgs = teachers[s.device_id]
                up = len(r.per_label)
                down = sum(v is not None for v in s.global_avgs.values())
                charge_fd_round(ledger, 1, up, down, L)
                dev_ledger = log.device_ledgers[s.device_id]
                charge_fd_round(dev_ledger, 1, up, down, L)
                log.records.append({
                    "round": k,
                    "device_id": s.device_id,
                    "test_accuracy": evaluate(s.weights, test),
                    "labels_reported": up,
                    "cumulative_logit_scalars": dev_ledger.logit_scalars,
                })
    except DivergenceError as exc:
        exc.partial_log = log
        raise
    finalize(log, {s.device_id: s.weights for s in states}, test)
    return log
