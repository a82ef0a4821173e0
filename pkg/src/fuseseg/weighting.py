"""Convergence-rate-driven loss weighting and learning-rate schedules.

The alternating trainer balances the fusion and segmentation objectives with
per-task weights recomputed at epoch boundaries: each task's convergence rate
is the ratio of its last two epoch-mean losses, and the weights are a
temperature-softened softmax of those rates scaled by per-task preferences:

    r_i = L_i(n-1) / L_i(n-2)
    lambda_i = eta_i * exp(r_i / T) / sum_k exp(r_k / T)

A task whose loss stalls (rate near 1) receives more weight than one that is
still dropping quickly.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ConfigError, NumericalError

TASKS = ("fusion", "seg")
RATE_FLOOR = 1e-12


@dataclass
class RateHistory:
    """Ring buffer of the last two epoch-mean losses per task."""

    values: dict[str, deque] = field(
        default_factory=lambda: {t: deque(maxlen=2) for t in TASKS}
    )

    def record(self, task: str, epoch_mean: float) -> None:
        if task not in self.values:
            raise ConfigError(f"unknown task {task!r}")
        if not math.isfinite(epoch_mean):
            raise NumericalError(f"non-finite epoch-mean loss for task {task!r}")
        self.values[task].append(float(epoch_mean))

    def rate(self, task: str) -> float:
        return convergence_rate(self, task)

    def as_lists(self) -> dict[str, list[float]]:
        return {t: list(v) for t, v in self.values.items()}

    @classmethod
    def from_lists(cls, data: dict[str, Sequence[float]]) -> "RateHistory":
        h = cls()
        for t, vals in data.items():
            for v in vals:
                h.record(t, v)
        return h


def convergence_rate(history: RateHistory, task: str) -> float:
    """Ratio of the two most recent epoch means; bootstraps to 1.0."""
    if task not in history.values:
        raise ConfigError(f"unknown task {task!r}")
    vals = history.values[task]
    if len(vals) < 2:
        return 1.0
    prev, last = vals[0], vals[1]
    if prev <= RATE_FLOOR:
        raise NumericalError(f"task {task!r}: denominator loss {prev} at or below {RATE_FLOOR}")
    return last / prev


def dynamic_weights(
    rates: Sequence[float],
    eta_pref: Sequence[float] | None = None,
    temperature: float = 2.0,
) -> tuple[float, ...]:
    """Preference-scaled softmax of convergence rates (max-subtracted for stability)."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if eta_pref is None:
        eta_pref = [1.0] * len(rates)
    if len(eta_pref) != len(rates):
        raise ConfigError("eta_pref length must match rates length")
    for r in rates:
        if not math.isfinite(r):
            raise NumericalError(f"non-finite convergence rate {r}")
    m = max(rates)
    exps = [math.exp((r - m) / temperature) for r in rates]
    denom = sum(exps)
    return tuple(eta * e / denom for eta, e in zip(eta_pref, exps))


def poly_lr(step: int, total: int, lr_start: float, lr_end: float, power: float = 0.9) -> float:
    """Polynomial decay from lr_start to lr_end over ``total`` steps."""
    if total < 1:
        raise ConfigError("total steps must be >= 1")
    if not (0 <= step <= total):
        raise ConfigError(f"step {step} outside [0, {total}]")
    frac = 1.0 - step / total
    return lr_end + (lr_start - lr_end) * frac**power


@dataclass
class WeightState:
    """Current task weights plus the knobs that produced them."""

    lambdas: tuple[float, ...]
    eta_pref: tuple[float, ...]
    temperature: float


Strategy = Callable[[Sequence[float]], tuple[float, ...]]


def weighting_strategy(
    name: str,
    eta_pref: Sequence[float] = (1.0, 1.0),
    temperature: float = 2.0,
    manual_lambdas: Sequence[float] = (1.0, 1.0),
) -> Strategy:
    """Build a rates -> lambdas function for the requested strategy.

    ``dynamic`` is the preference-scaled rate softmax; ``uniform`` always
    returns 1/K; ``manual`` returns fixed constants; ``dwa`` is the K-scaled
    rate softmax (each weight is K * softmax term), so equal rates give 1.0
    for every task.
    """
    eta_pref = tuple(float(e) for e in eta_pref)
    manual = tuple(float(v) for v in manual_lambdas)

    if name == "dynamic":
        def strategy(rates: Sequence[float]) -> tuple[float, ...]:
            return dynamic_weights(rates, eta_pref, temperature)
    elif name == "uniform":
        def strategy(rates: Sequence[float]) -> tuple[float, ...]:
            k = len(rates)
            return tuple(1.0 / k for _ in range(k))
    elif name == "manual":
        def strategy(rates: Sequence[float]) -> tuple[float, ...]:
            if len(manual) != len(rates):
                raise ConfigError("manual_lambdas length must match number of tasks")
            return manual
    elif name == "dwa":
        def strategy(rates: Sequence[float]) -> tuple[float, ...]:
            base = dynamic_weights(rates, None, temperature)
            k = len(rates)
            return tuple(k * b for b in base)
    else:
        raise ConfigError(f"unknown weighting strategy {name!r}")
    return strategy
