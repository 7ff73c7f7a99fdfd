"""Deterministic mini-batch Adam training towards a stationary point of the cost."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .nn_core import Dataset, NetworkConfig

DEFAULT_SCHEDULE = ((0, 1e-3), (4000, 1e-4), (6000, 1e-5))


class TrainingError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite cost {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    schedule: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE
    max_steps: int = 8000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = False
    log_every: int = 100
    chunk_size: int | None = None

    def __post_init__(self):
        sched = tuple((int(s), float(r)) for s, r in self.schedule)
        object.__setattr__(self, "schedule", sched)
        steps = [s for s, _ in sched]
        if not steps or steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must start at 0 and increase strictly")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")

    def learning_rate(self, step: int) -> float:
        rate = self.schedule[0][1]
        for s, r in self.schedule:
            if step >= s:
                rate = r
        return rate


@dataclass
class TrainReport:
    omega: np.ndarray
    steps_run: int
    cost: float
    grad_norm: float
    train_accuracy: float
    test_accuracy: float | None = None
    log: list[tuple[int, float, float, float]] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "steps_run": self.steps_run,
            "cost": self.cost,
            "grad_norm": self.grad_norm,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
        }


def accuracy(network: NetworkConfig, omega, data: Dataset) -> float:
    """Fraction of examples whose arg-max prediction equals the target class."""
    pred = np.argmax(nn_core.forward(network, omega, data.inputs), axis=1)
    return float(np.mean(pred == data.labels))


def _batches(n: int, batch_size: int, rng, shuffle: bool):
    while True:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def train(
    network: NetworkConfig,
    data: Dataset,
    cfg: TrainConfig,
    omega0=None,
    test_data: Dataset | None = None,
) -> TrainReport:
    """Run Adam for ``cfg.max_steps`` mini-batch steps.

    Mini-batches are consecutive slices of the data in their stored order
    unless ``cfg.shuffle`` is set.  ``omega0`` defaults to
    :func:`nn_core.init_params` with ``cfg.seed``.  The returned gradient norm
    and cost are for the full training set.
    """
    omega = nn_core.init_params(network, cfg.seed) if omega0 is None else np.array(omega0, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    batch_cache: dict[tuple[int, int], Dataset] = {}
    m = np.zeros_like(omega)
    v = np.zeros_like(omega)
    b1, b2 = cfg.beta1, cfg.beta2
    log = []
    batches = _batches(len(data), cfg.batch_size, rng, cfg.shuffle)
    for step in range(cfg.max_steps):
        idx = next(batches)
        if cfg.shuffle:
            batch = data.subset(idx)
        else:
            key = (int(idx[0]), int(idx[-1]))
            batch = batch_cache.get(key)
            if batch is None:
                batch = batch_cache[key] = data.subset(idx)
        c, g = nn_core.cost_and_grad(network, omega, batch, cfg.chunk_size)
        if not np.isfinite(c):
            raise TrainingError(step, c)
        lr = cfg.learning_rate(step)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t = step + 1
        omega = omega - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + cfg.eps)
        if cfg.log_every and (t % cfg.log_every == 0 or t == cfg.max_steps):
            full_c, full_g = nn_core.cost_and_grad(network, omega, data, cfg.chunk_size)
            if not np.isfinite(full_c):
                raise TrainingError(t, full_c)
            log.append((t, lr, full_c, float(np.linalg.norm(full_g))))

    full_c, full_g = nn_core.cost_and_grad(network, omega, data, cfg.chunk_size)
    return TrainReport(
        omega,
        cfg.max_steps,
        full_c,
        float(np.linalg.norm(full_g)),
        accuracy(network, omega, data),
        None if test_data is None else accuracy(network, omega, test_data),
        log,
    )
