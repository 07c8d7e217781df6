"""Pieces shared by the FD, FL and standalone training loops."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np

from .data import Corpus, DeviceDataset
from .metrics import CostLedger
from .nn import DivergenceError, ModelWeights, Trainer, accuracy, per_label_accuracy

T = TypeVar("T")
R = TypeVar("R")


def batch_indices(n: int, steps: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """``steps`` batches drawn without replacement, reshuffling each epoch."""
    if n == 0:
        raise ValueError("empty dataset")
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        out = []
        need = batch_size
        while need:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(need, n - pos)
            out.append(order[pos : pos + take])
            pos += take
            need -= take
        yield np.concatenate(out)


def local_sgd(
    weights: ModelWeights,
    ds: DeviceDataset,
    steps: int,
    batch_size: int,
    eta: float,
    rng: np.random.Generator,
    teacher_for: Callable[[int], np.ndarray | None] | None = None,
    gamma: float = 0.0,
    on_output: Callable[[int, np.ndarray], None] | None = None,
) -> ModelWeights:
    """Per-sample SGD over ``steps`` batches.

    ``teacher_for(label)`` supplies the distillation target (or None), and
    ``on_output(label, probs)`` receives the post-update output for every
    visited sample.
    """
    if steps == 0:
        return weights
    tr = Trainer(weights, eta)
    for step, batch in enumerate(batch_indices(len(ds), steps, batch_size, rng)):
        for j in batch:
            x = ds.features[j]
            y = int(ds.labels[j])
            teacher = teacher_for(y) if teacher_for is not None else None
            try:
                tr.step(x, y, teacher, gamma)
            except DivergenceError as exc:
                raise DivergenceError("non-finite gradient", ds.device_id, step) from exc
            if on_output is not None:
                p = tr.probs(x)
                if not np.isfinite(p).all():
                    raise DivergenceError("non-finite output", ds.device_id, step)
                on_output(y, p)
    out = tr.weights()
    if not out.is_finite():
        raise DivergenceError("non-finite weights", ds.device_id, steps - 1)
    return out


def map_devices(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Order-preserving map, optionally on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class TrainingLog:
    """Per-(round, device) records plus end-of-run state."""

    records: list[dict] = field(default_factory=list)
    device_ledgers: dict[int, CostLedger] = field(default_factory=dict)
    final_accuracy: dict[int, float] = field(default_factory=dict)
    per_label_accuracy: dict[int, list[float]] = field(default_factory=dict)
    final_weights: dict[int, ModelWeights] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def accuracies(self, round_: int) -> dict[int, float]:
        return {r["device_id"]: r["test_accuracy"] for r in self.records if r["round"] == round_}


def evaluate(w: ModelWeights, test: Corpus | None) -> float | None:
    if test is None or len(test) == 0:
        return None
    return accuracy(w, test.features, test.labels)


def finalize(log: TrainingLog, weights: dict[int, ModelWeights], test: Corpus | None) -> None:
    log.final_weights = dict(weights)
    for i, w in sorted(weights.items()):
        acc = evaluate(w, test)
        log.final_accuracy[i] = acc if acc is not None else float("nan")
        if test is not None and len(test):
            log.per_label_accuracy[i] = per_label_accuracy(w, test.features, test.labels, test.num_labels)
