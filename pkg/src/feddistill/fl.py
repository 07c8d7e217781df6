"""Federated averaging baseline, plus a no-communication standalone reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, DeviceDataset
from .fd import ProtocolError
from .metrics import FL_MODEL_PARAMS, CostLedger, charge_fl_round
from .nn import DivergenceError, ModelWeights, init_weights
from .seeding import stream
from .training import TrainingLog, evaluate, finalize, local_sgd, map_devices


@dataclass(frozen=True)
class FlConfig:
    local_steps: int = 250
    global_rounds: int = 16
    batch_size: int = 64
    eta: float = 0.05
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"
    # accounting size, independent of the trained model's real size
    declared_params: int = FL_MODEL_PARAMS

    def __post_init__(self):
        for name in ("local_steps", "global_rounds", "declared_params"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")


def fl_local_phase(w: ModelWeights, ds: DeviceDataset, cfg: FlConfig, round_: int = 0) -> ModelWeights:
    """Plain cross-entropy SGD, one update per visited sample."""
    rng = stream(cfg.seed, "fl-batches", ds.device_id, round_)
    return local_sgd(w, ds, cfg.local_steps, cfg.batch_size, cfg.eta, rng)


def fl_average(models: list[ModelWeights]) -> ModelWeights:
    """Unweighted element-wise mean, summed in list order."""
    if not models:
        raise ValueError("no models to average")
    ref = models[0]
    for j, m in enumerate(models[1:], 1):
        if m.dims != ref.dims:
            raise ValueError(f"model {j} has dims {m.dims}, expected {ref.dims}")
    n = len(models)
    layers = []
    for t in range(len(ref.layers)):
        w_sum = np.zeros_like(ref.layers[t][0])
        b_sum = np.zeros_like(ref.layers[t][1])
        for m in models:
            w_sum += m.layers[t][0]
            b_sum += m.layers[t][1]
        layers.append((w_sum / n, b_sum / n))
    return ModelWeights(tuple(layers), ref.activation)


def run_fl(
    datasets: list[DeviceDataset],
    cfg: FlConfig,
    ledger: CostLedger | None = None,
    test: Corpus | None = None,
    workers: int = 1,
) -> TrainingLog:
    """Rounds of broadcast, local training and averaging from one shared init."""
    if len(datasets) < 2:
        raise ProtocolError("federated averaging needs at least 2 devices")
    ledger = ledger if ledger is not None else CostLedger()
    L = datasets[0].num_labels
    d = datasets[0].features.shape[1]
    global_w = init_weights((d, *cfg.hidden_dims, L), stream(cfg.seed, "fl-init"), cfg.activation)
    ids = [ds.device_id for ds in datasets]
    log = TrainingLog(device_ledgers={i: CostLedger() for i in ids})

    try:
        for k in range(1, cfg.global_rounds + 1):
            locals_ = map_devices(lambda ds: fl_local_phase(global_w, ds, cfg, k), datasets, workers)
            order = np.argsort(ids, kind="stable")
            global_w = fl_average([locals_[j] for j in order])
            acc = evaluate(global_w, test)
            for i in ids:
                charge_fl_round(ledger, 1, cfg.declared_params)
                dev_ledger = log.device_ledgers[i]
                charge_fl_round(dev_ledger, 1, cfg.declared_params)
                log.records.append({
                    "round": k,
                    "device_id": i,
                    "test_accuracy": acc,
                    "cumulative_parameters": dev_ledger.model_parameters,
                })
    except DivergenceError as exc:
        exc.partial_log = log
        raise
    finalize(log, {i: global_w for i in ids}, test)
    return log


def run_standalone(
    datasets: list[DeviceDataset],
    cfg: FlConfig,
    test: Corpus | None = None,
    workers: int = 1,
) -> TrainingLog:
    """Each device trains alone for the same budget; nothing is exchanged."""
    L = datasets[0].num_labels
    d = datasets[0].features.shape[1]
    weights = {
        ds.device_id: init_weights((d, *cfg.hidden_dims, L), stream(cfg.seed, "init", ds.device_id), cfg.activation)
        for ds in datasets
    }
    log = TrainingLog(device_ledgers={ds.device_id: CostLedger() for ds in datasets})
    try:
        for k in range(1, cfg.global_rounds + 1):
            new = map_devices(lambda ds: fl_local_phase(weights[ds.device_id], ds, cfg, k), datasets, workers)
            for ds, w in zip(datasets, new):
                weights[ds.device_id] = w
                log.records.append({"round": k, "device_id": ds.device_id, "test_accuracy": evaluate(w, test)})
    except DivergenceError as exc:
        exc.partial_log = log
        raise
    finalize(log, weights, test)
    return log
