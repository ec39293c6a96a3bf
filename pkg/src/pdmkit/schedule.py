"""Beta schedules and the per-timestep coefficients derived from them.

Timesteps are 1-based throughout the package: ``beta[0]`` holds beta_1.
``alpha_bar_prev[0]`` is the convention alpha_bar_0 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

MAX_BETA = 0.999


class ScheduleError(ConfigError):
    """Invalid schedule parameters or step subset."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BetaSchedule:
    kind: str
    beta: np.ndarray
    # original timestep of each entry; 1..T unless the schedule was respaced
    timesteps: np.ndarray = None  # type: ignore[assignment]
    # respacing pins alpha_bar to the kept values instead of re-multiplying
    alpha_bar: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        beta = _frozen(np.asarray(self.beta, dtype=np.float64))
        if beta.ndim != 1 or beta.size == 0:
            raise ScheduleError("beta must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0) or np.any(beta >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")

        ts = np.arange(1, beta.size + 1) if self.timesteps is None else self.timesteps
        ts = _frozen(np.asarray(ts, dtype=np.int64))
        if ts.shape != beta.shape:
            raise ScheduleError("timesteps and beta differ in length")

        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha) if self.alpha_bar is None else np.asarray(self.alpha_bar, dtype=np.float64)
        if alpha_bar.shape != beta.shape:
            raise ScheduleError("alpha_bar and beta differ in length")
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        post_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        # beta_tilde_1 = 0; borrow beta_tilde_2 so log-variance interpolation stays finite
        clipped = post_var.copy()
        clipped[0] = post_var[1] if beta.size > 1 else beta[0]
        derived = {
            "beta": beta,
            "timesteps": ts,
            "alpha": alpha,
            "alpha_bar": alpha_bar,
            "alpha_bar_prev": alpha_bar_prev,
            "posterior_variance": post_var,
            "log_beta": np.log(beta),
            "posterior_log_variance_clipped": np.log(clipped),
        }
        for name, arr in derived.items():
            object.__setattr__(self, name, _frozen(arr))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def __len__(self) -> int:
        return self.T

    def check_t(self, t) -> np.ndarray:
        """Validate 1-based timestep(s); returns them as an int array."""
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ScheduleError(f"timestep must be integer, got {t.dtype}")
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"timestep out of range 1..{self.T}: {t}")
        return t

    def at(self, name: str, t, ndim: int = 0) -> np.ndarray:
        """Coefficient ``name`` at timestep(s) ``t``, reshaped to broadcast over ``ndim`` trailing axes."""
        t = self.check_t(t)
        vals = getattr(self, name)[t - 1]
        return vals.reshape(vals.shape + (1,) * ndim)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def linear_betas(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return np.linspace(beta_start, beta_end, T, dtype=np.float64)


def cosine_betas(T: int, s: float = 0.008, max_beta: float = MAX_BETA) -> np.ndarray:
    if not s > 0:
        raise ScheduleError(f"cosine offset must be positive, got {s}")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    f0 = f(0)
    abar = np.array([f(t) / f0 for t in range(T + 1)])
    return np.minimum(1.0 - abar[1:] / abar[:-1], max_beta)


def make_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_s: float = 0.008,
) -> BetaSchedule:
    """Build a linear or cosine schedule with ``T`` steps."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "linear":
        beta = linear_betas(T, beta_start, beta_end)
    elif kind == "cosine":
        beta = cosine_betas(T, cosine_s)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return BetaSchedule(kind, beta)


def respace(schedule: BetaSchedule, steps: Sequence[int]) -> BetaSchedule:
    """Keep only ``steps`` (1-based, strictly increasing) of ``schedule``.

    The new betas are chosen so that the cumulative products reproduce
    alpha_bar at the kept steps.
    """
    steps = np.asarray(steps)
    if steps.ndim != 1 or steps.size == 0:
        raise ScheduleError("step subset must be a non-empty 1-D sequence")
    if not np.issubdtype(steps.dtype, np.integer):
        raise ScheduleError("step subset must contain integers")
    if np.any(np.diff(steps) <= 0):
        raise ScheduleError(f"step subset must be strictly increasing: {steps.tolist()}")
    if steps[0] < 1 or steps[-1] > schedule.T:
        raise ScheduleError(f"step subset out of range 1..{schedule.T}")

    abar = schedule.alpha_bar[steps - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    beta = 1.0 - abar / prev
    # across a single original step the ratio is alpha_t itself; keep that beta bit-for-bit
    single = np.diff(np.concatenate([[0], steps])) == 1
    beta[single] = schedule.beta[steps[single] - 1]
    return BetaSchedule(schedule.kind, beta, schedule.timesteps[steps - 1], abar)


def spaced_steps(T: int, n: int, kind: str = "uniform") -> np.ndarray:
    """Choose ``n`` of the ``T`` steps, always keeping step ``T``.

    ``uniform`` spaces the kept steps evenly; ``quadratic`` packs them
    towards small t.
    """
    if not 1 <= n <= T:
        raise ScheduleError(f"cannot pick {n} steps out of {T}")
    if kind == "uniform":
        raw = np.linspace(T, 0, n, endpoint=False)[::-1]
    elif kind == "quadratic":
        raw = (np.linspace(0, math.sqrt(T), n + 1)[1:]) ** 2
    else:
        raise ScheduleError(f"unknown spacing {kind!r}")
    steps = np.round(raw).astype(np.int64)
    steps = np.clip(steps, 1, T)
    steps[-1] = T
    # rounding can collide; push duplicates apart while staying within 1..T
    for i in range(1, n):
        if steps[i] <= steps[i - 1]:
            steps[i] = steps[i - 1] + 1
    for i in range(n - 2, -1, -1):
        if steps[i] >= steps[i + 1]:
            steps[i] = steps[i + 1] - 1
    return steps
