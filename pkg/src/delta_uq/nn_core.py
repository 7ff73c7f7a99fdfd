"""Dense feed-forward classifier with analytic derivatives.

Parameters live in one flat float64 vector.  Layers are ordered input to
output; each layer contributes its weight matrix ``W`` of shape
``(T_l, T_{l-1})`` flattened row-major, followed by its bias ``b`` of length
``T_l``.  Hidden layers use ReLU, the output layer softmax, and the cost is
mean cross-entropy plus ``(l2_rate / 2) * ||omega||^2``.

Everything here is a pure function of its arguments.  Functions that reduce
over examples accept ``chunk_size``; chunks are reduced in index order so the
result only depends on the chunk size, never on scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "NetworkConfig",
    "Dataset",
    "Sensitivity",
    "param_count",
    "layer_slices",
    "unflatten",
    "flatten",
    "init_params",
    "logits",
    "forward",
    "cost",
    "grad",
    "per_example_grads",
    "hvp",
    "sensitivity",
    "sensitivities",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Dense layer stack ``layer_sizes = [T_1, ..., T_L]``.

    ``l2_rate`` is the rate ``lambda`` of the regulariser ``(lambda/2)||w||^2``.
    """

    layer_sizes: tuple[int, ...]
    l2_rate: float = 0.01
    hidden_activation: str = "relu"
    output_activation: str = "softmax"

    def __post_init__(self):
        sizes = tuple(int(t) for t in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(t < 1 for t in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.l2_rate < 0:
            raise ValueError("l2_rate must be nonnegative")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "softmax":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return param_count(self)

    def with_l2_rate(self, l2_rate: float) -> "NetworkConfig":
        return NetworkConfig(self.layer_sizes, l2_rate, self.hidden_activation, self.output_activation)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "l2_rate": float(self.l2_rate),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            tuple(d["layer_sizes"]),
            float(d.get("l2_rate", 0.01)),
            d.get("hidden_activation", "relu"),
            d.get("output_activation", "softmax"),
        )


@dataclass(frozen=True)
class Dataset:
    """Labelled examples: ``inputs`` (N, T_1) and one-hot ``targets`` (N, T_L)."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if x.shape[0] < 1:
            raise ValueError("dataset is empty")
        if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
            raise ValueError("targets must be one-hot rows")
        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (x.shape[0],):
            raise ValueError("ids must have one entry per example")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_labels(cls, inputs, labels, n_classes: int, ids=None) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        targets = np.zeros((labels.shape[0], n_classes))
        targets[np.arange(labels.shape[0]), labels] = 1.0
        return cls(inputs, targets, ids)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.targets[index], self.ids[index])


@dataclass(frozen=True)
class Sensitivity:
    """Jacobian ``F`` (T_L, P) of the class probabilities at one input."""

    matrix: np.ndarray
    input_id: int | None = None


def param_count(config: NetworkConfig) -> int:
    s = config.layer_sizes
    return sum(s[i - 1] * s[i] + s[i] for i in range(1, len(s)))


def layer_slices(config: NetworkConfig) -> list[tuple[slice, tuple[int, int], slice]]:
    """Per layer: (weight slice, weight shape, bias slice) into the flat vector."""
    out = []
    offset = 0
    s = config.layer_sizes
    for i in range(1, len(s)):
        shape = (s[i], s[i - 1])
        nw = shape[0] * shape[1]
        out.append((slice(offset, offset + nw), shape, slice(offset + nw, offset + nw + s[i])))
        offset += nw + s[i]
    return out


def _check_omega(config: NetworkConfig, omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (param_count(config),):
        raise ValueError(f"parameter vector has shape {omega.shape}, expected ({param_count(config)},)")
    return omega


def unflatten(config: NetworkConfig, omega) -> list[tuple[np.ndarray, np.ndarray]]:
    omega = _check_omega(config, omega)
    return [(omega[ws].reshape(shape), omega[bs]) for ws, shape, bs in layer_slices(config)]


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).reshape(-1))
        parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return np.concatenate(parts)


def init_params(config: NetworkConfig, seed: int = 0) -> np.ndarray:
    """Normal weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    s = config.layer_sizes
    layers = []
    for i in range(1, len(s)):
        w = rng.standard_normal((s[i], s[i - 1])) / np.sqrt(s[i - 1])
        layers.append((w, np.zeros(s[i])))
    return flatten(layers)


def _as_batch(config: NetworkConfig, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != config.n_inputs:
        raise ValueError(f"input has shape {x.shape}, expected trailing dimension {config.n_inputs}")
    return x2, single


def _forward_pass(layers, x):
    """Return activations ``[x, a_2, ..., a_{L-1}]``, hidden ReLU masks and output logits."""
    acts = [x]
    masks = []
    a = x
    for w, b in layers[:-1]:
        z = a @ w.T + b
        mask = z > 0.0
        a = np.where(mask, z, 0.0)
        acts.append(a)
        masks.append(mask)
    w, b = layers[-1]
    z_out = a @ w.T + b
    return acts, masks, z_out


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


def logits(config: NetworkConfig, omega, x) -> np.ndarray:
    x2, single = _as_batch(config, x)
    _, _, z = _forward_pass(unflatten(config, omega), x2)
    return z[0] if single else z


def forward(config: NetworkConfig, omega, x) -> np.ndarray:
    """Class probabilities for one input (T_1,) or a batch (n, T_1)."""
    z = logits(config, omega, x)
    return np.exp(_log_softmax(z))


def _chunks(n: int, chunk_size: int | None):
    step = n if not chunk_size else int(chunk_size)
    for start in range(0, n, step):
        yield slice(start, min(start + step, n))


def _backward_sum(layers, acts, masks, dz):
    """Gradient summed over rows, given d(loss)/d(logits) rows ``dz``."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        a_prev = acts[i]
        grads[i] = (dz.T @ a_prev, dz.sum(axis=0))
        if i > 0:
            dz = (dz @ layers[i][0]) * masks[i - 1]
    return grads


def _backward_rows(layers, acts, masks, dz):
    """Per-row gradients, shape (rows, P), given d(loss_row)/d(logits) rows ``dz``."""
    rows = dz.shape[0]
    pieces = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        a_prev = acts[i]
        dw = (dz[:, :, None] * a_prev[:, None, :]).reshape(rows, -1)
        pieces[i] = (dw, dz)
        if i > 0:
            dz = (dz @ layers[i][0]) * masks[i - 1]
    return np.concatenate([p for pair in pieces for p in pair], axis=1)


def _data_cost_sum(layers, x, y):
    _, _, z = _forward_pass(layers, x)
    return float(-(y * _log_softmax(z)).sum())


def cost(config: NetworkConfig, omega, data: Dataset, chunk_size: int | None = None) -> float:
    """Mean cross-entropy plus the L2 penalty."""
    omega = _check_omega(config, omega)
    layers = unflatten(config, omega)
    total = 0.0
    for sl in _chunks(len(data), chunk_size):
        total += _data_cost_sum(layers, data.inputs[sl], data.targets[sl])
    return total / len(data) + 0.5 * config.l2_rate * float(omega @ omega)


def _data_grad_sum(layers, x, y):
    acts, masks, z = _forward_pass(layers, x)
    p = np.exp(_log_softmax(z))
    return flatten(_backward_sum(layers, acts, masks, p - y)), float(-(y * _log_softmax(z)).sum())


def cost_and_grad(config: NetworkConfig, omega, data: Dataset, chunk_size: int | None = None):
    omega = _check_omega(config, omega)
    layers = unflatten(config, omega)
    g = np.zeros_like(omega)
    c = 0.0
    for sl in _chunks(len(data), chunk_size):
        gs, cs = _data_grad_sum(layers, data.inputs[sl], data.targets[sl])
        g += gs
        c += cs
    n = len(data)
    lam = config.l2_rate
    return c / n + 0.5 * lam * float(omega @ omega), g / n + lam * omega


def grad(config: NetworkConfig, omega, data: Dataset, chunk_size: int | None = None) -> np.ndarray:
    """Gradient of :func:`cost` with respect to the flat parameter vector."""
    return cost_and_grad(config, omega, data, chunk_size)[1]


def per_example_grads(config: NetworkConfig, omega, data: Dataset, batch=None) -> np.ndarray:
    """Rows ``g_n = dC_n/d omega`` of the data term only (no L2 contribution).

    ``batch`` is a slice or index array into ``data``; default is all examples.
    """
    omega = _check_omega(config, omega)
    if batch is None:
        batch = slice(None)
    x = data.inputs[batch]
    y = data.targets[batch]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    layers = unflatten(config, omega)
    acts, masks, z = _forward_pass(layers, x)
    p = np.exp(_log_softmax(z))
    return _backward_rows(layers, acts, masks, p - y)


def _data_hvp_sum(layers, vlayers, x, y):
    # forward pass with tangents (R-operator), then the reverse sweep differentiated along v
    acts, masks = [x], []
    r_acts = [np.zeros_like(x)]
    a, ra = x, r_acts[0]
    for (w, b), (vw, vb) in zip(layers[:-1], vlayers[:-1]):
        z = a @ w.T + b
        rz = ra @ w.T + a @ vw.T + vb
        mask = z > 0.0
        a = np.where(mask, z, 0.0)
        ra = np.where(mask, rz, 0.0)
        acts.append(a)
        r_acts.append(ra)
        masks.append(mask)
    (w, b), (vw, vb) = layers[-1], vlayers[-1]
    z = a @ w.T + b
    rz = ra @ w.T + a @ vw.T + vb
    p = np.exp(_log_softmax(z))
    rp = p * (rz - (p * rz).sum(axis=1, keepdims=True))

    dz = p - y
    rdz = rp
    out = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        a_prev, ra_prev = acts[i], r_acts[i]
        out[i] = (rdz.T @ a_prev + dz.T @ ra_prev, rdz.sum(axis=0))
        if i > 0:
            w_i, vw_i = layers[i][0], vlayers[i][0]
            m = masks[i - 1]
            rdz = (rdz @ w_i + dz @ vw_i) * m
            dz = (dz @ w_i) * m
    return flatten(out)


def hvp(config: NetworkConfig, omega, data: Dataset, v, chunk_size: int | None = None) -> np.ndarray:
    """Exact product ``H v`` with ``H`` the Hessian of :func:`cost` (data term + l2_rate * I)."""
    omega = _check_omega(config, omega)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != omega.shape:
        raise ValueError(f"direction has shape {v.shape}, expected {omega.shape}")
    layers = unflatten(config, omega)
    vlayers = unflatten(config, v)
    out = np.zeros_like(omega)
    for sl in _chunks(len(data), chunk_size):
        out += _data_hvp_sum(layers, vlayers, data.inputs[sl], data.targets[sl])
    return out / len(data) + config.l2_rate * v


def sensitivities(config: NetworkConfig, omega, x) -> np.ndarray:
    """Jacobians of the class probabilities for a batch of inputs, shape (n, T_L, P)."""
    x2, _ = _as_batch(config, x)
    layers = unflatten(config, _check_omega(config, omega))
    acts, masks, z = _forward_pass(layers, x2)
    p = np.exp(_log_softmax(z))
    n, t = p.shape
    # row i of the softmax Jacobian seeds the reverse pass for class i
    seeds = p[:, :, None] * (np.eye(t)[None, :, :] - p[:, None, :])
    rep = lambda arr: np.repeat(arr, t, axis=0)
    rows = _backward_rows(
        layers, [rep(a) for a in acts], [rep(m) for m in masks], seeds.reshape(n * t, t)
    )
    return rows.reshape(n, t, -1)


def sensitivity(config: NetworkConfig, omega, x0, input_id: int | None = None) -> Sensitivity:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("sensitivity expects a single input vector")
    return Sensitivity(sensitivities(config, omega, x0)[0], input_id)
