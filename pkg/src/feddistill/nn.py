"""Dense feedforward classifier with softmax output, cross-entropy and SGD.

This is the only training engine in the package. Weights are plain numpy
arrays held in a :class:`ModelWeights` value; every public function here is
pure (returns new arrays, never mutates its inputs) so device simulations can
share it freely across threads.

The batched helpers :func:`dense_forward` / :func:`dense_backward` are also
used by the conditional GAN in :mod:`feddistill.faug`, which needs raw
(pre-softmax) outputs and input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

EPS = 1e-12

ACTIVATIONS = ("relu", "tanh")


class DimensionError(ValueError):
    """Input or layer shapes do not chain."""

    def __init__(self, layer: int, expected: int, got: int):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer}: expected input of size {expected}, got {got}")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, message: str, device_id: int | None = None, step: int | None = None):
        self.device_id = device_id
        self.step = step
        where = []
        if device_id is not None:
            where.append(f"device={device_id}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class ModelWeights:
    """Ordered (weight, bias) pairs; weight matrices are (fan_in, fan_out)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for t, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(t, w.shape[1] if w.ndim == 2 else -1, b.shape[0])
            if t > 0:
                prev = self.layers[t - 1][0].shape[1]
                if w.shape[0] != prev:
                    raise DimensionError(t, w.shape[0], prev)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_labels(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def copy(self) -> "ModelWeights":
        return ModelWeights(tuple((w.copy(), b.copy()) for w, b in self.layers), self.activation)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def to_flat(self) -> dict:
        """Checkpoint form: dimension header plus one flat list of reals."""
        flat = np.concatenate([a.ravel() for a in self.arrays()]) if self.layers else np.empty(0)
        return {"dims": list(self.dims), "activation": self.activation, "params": flat.tolist()}

    @classmethod
    def from_flat(cls, doc: dict) -> "ModelWeights":
        dims = [int(d) for d in doc["dims"]]
        flat = np.asarray(doc["params"], dtype=np.float64)
        expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        if flat.size != expected:
            raise ValueError(f"checkpoint holds {flat.size} params, dims {dims} need {expected}")
        layers, pos = [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos : pos + fan_out].copy()
            pos += fan_out
            layers.append((w.copy(), b))
        return cls(tuple(layers), doc.get("activation", "relu"))


def init_weights(dims: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> ModelWeights:
    """Glorot-uniform weights, zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-r, r, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelWeights(tuple(layers), activation)


def zeros_like(w: ModelWeights) -> ModelWeights:
    return ModelWeights(tuple((np.zeros_like(a), np.zeros_like(b)) for a, b in w.layers), w.activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return z > 0.0
    return 1.0 - h * h


def dense_forward(w: ModelWeights, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Raw output of the last layer for a batch ``x`` of shape (B, input_dim).

    Returns the output and a cache for :func:`dense_backward`. Hidden layers
    use ``w.activation``; the last layer is linear.
    """
    if x.shape[-1] != w.input_dim:
        raise DimensionError(0, w.input_dim, x.shape[-1])
    cache = []
    h = x
    last = len(w.layers) - 1
    for t, (wt, bt) in enumerate(w.layers):
        z = h @ wt + bt
        if t < last:
            a = _act(z, w.activation)
            cache.append((h, z, a))
            h = a
        else:
            cache.append((h, z, None))
            h = z
    return h, cache


def dense_backward(w: ModelWeights, cache: list, dout: np.ndarray) -> tuple[ModelWeights, np.ndarray]:
    """Gradients w.r.t. all weights (summed over the batch) and w.r.t. the input."""
    grads = [None] * len(w.layers)
    delta = dout
    for t in range(len(w.layers) - 1, -1, -1):
        h_in, z, a = cache[t]
        if a is not None:
            delta = delta * _act_grad(z, a, w.activation)
        wt = w.layers[t][0]
        grads[t] = (h_in.T @ delta, delta.sum(axis=0))
        delta = delta @ wt.T
    return ModelWeights(tuple(grads), w.activation), delta


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(w: ModelWeights, features: np.ndarray) -> np.ndarray:
    """Class-probability vector for one input (or a batch of rows)."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    out, _ = dense_forward(w, x[None, :] if single else x)
    p = softmax(out)
    return p[0] if single else p


def predict(w: ModelWeights, features: np.ndarray) -> np.ndarray:
    out, _ = dense_forward(w, np.atleast_2d(features))
    return out.argmax(axis=1)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """-sum(target * log(pred + EPS)); ``target`` weights the log."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: pred {pred.shape}, target {target.shape}")
    return float(-np.sum(target * np.log(pred + EPS)))


def _ce_logit_grad(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    # exact d/dz of -sum t log(softmax(z) + EPS)
    r = t * p / (p + EPS)
    return p * r.sum(axis=-1, keepdims=True) - r


def one_hot(label: int, num_labels: int) -> np.ndarray:
    v = np.zeros(num_labels)
    v[label] = 1.0
    return v


def fd_loss(w: ModelWeights, b: Sample, teacher: np.ndarray | None = None, gamma: float = 0.0) -> float:
    p = forward(w, b.features)
    loss = cross_entropy(p, one_hot(b.label, w.num_labels))
    if teacher is not None and gamma != 0.0:
        loss += gamma * cross_entropy(p, teacher)
    return loss


def fd_loss_gradient(
    w: ModelWeights, b: Sample, teacher: np.ndarray | None = None, gamma: float = 0.0
) -> ModelWeights:
    """Gradient of CE(F(w,b), y_b) + gamma * CE(F(w,b), teacher).

    The distillation term is dropped when ``teacher`` is None.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    x = np.asarray(b.features, dtype=np.float64)[None, :]
    out, cache = dense_forward(w, x)
    p = softmax(out)
    dz = _ce_logit_grad(p, one_hot(b.label, w.num_labels)[None, :])
    if teacher is not None and gamma != 0.0:
        dz = dz + gamma * _ce_logit_grad(p, np.asarray(teacher, dtype=np.float64)[None, :])
    grad, _ = dense_backward(w, cache, dz)
    return grad


def sgd_step(w: ModelWeights, grad: ModelWeights, eta: float) -> ModelWeights:
    """w - eta * grad, element-wise."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    if not grad.is_finite():
        raise DivergenceError("non-finite gradient")
    return ModelWeights(
        tuple((wt - eta * gw, bt - eta * gb) for (wt, bt), (gw, gb) in zip(w.layers, grad.layers)),
        w.activation,
    )


def accuracy(w: ModelWeights, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(w, features) == labels))


def per_label_accuracy(w: ModelWeights, features: np.ndarray, labels: np.ndarray, num_labels: int) -> list[float]:
    hits = predict(w, features) == labels
    out = []
    for ell in range(num_labels):
        mask = labels == ell
        out.append(float(hits[mask].mean()) if mask.any() else float("nan"))
    return out


class Trainer:
    """Mutable per-sample SGD on a private copy of ``w``.

    Equivalent to repeated ``sgd_step(w, fd_loss_gradient(w, ...), eta)`` but
    updates arrays in place, which matters for per-sample loops.
    """

    def __init__(self, w: ModelWeights, eta: float):
        if eta <= 0:
            raise ValueError("eta must be > 0")
        self.eta = eta
        self.activation = w.activation
        self.num_labels = w.num_labels
        self._w = [wt.copy() for wt, _ in w.layers]
        self._b = [bt.copy() for _, bt in w.layers]

    def weights(self) -> ModelWeights:
        return ModelWeights(tuple((w.copy(), b.copy()) for w, b in zip(self._w, self._b)), self.activation)

    def probs(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self._w) - 1
        for t in range(len(self._w)):
            h = h @ self._w[t] + self._b[t]
            if t < last:
                h = _act(h, self.activation)
        return softmax(h)

    def step(self, x: np.ndarray, label: int, teacher: np.ndarray | None = None, gamma: float = 0.0) -> None:
        last = len(self._w) - 1
        hs, zs = [x], []
        h = x
        for t in range(len(self._w)):
            z = h @ self._w[t] + self._b[t]
            zs.append(z)
            h = _act(z, self.activation) if t < last else z
            hs.append(h)
        e = np.exp(h - h.max())
        p = e / e.sum()
        r = p / (p + EPS)
        dz = p * r[label]
        dz[label] -= r[label]
        if teacher is not None and gamma != 0.0:
            rt = teacher * r
            dz += gamma * (p * rt.sum() - rt)
        # finite output error + finite activations => finite weight gradients
        if not np.isfinite(dz).all():
            raise DivergenceError("non-finite gradient")
        updates = []
        delta = dz
        for t in range(last, -1, -1):
            if t < last:
                delta = delta * _act_grad(zs[t], hs[t + 1], self.activation)
            step = self.eta * delta
            updates.append((t, step))
            if t > 0:
                delta = self._w[t] @ delta
        for t, step in updates:
            self._w[t] -= hs[t][:, None] * step
            self._b[t] -= step
