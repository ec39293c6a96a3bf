"""Reverse-chain samplers: ancestral (fixed or learned variance) and DDIM.

Every image gets its own random stream seeded from ``(seed, image index)``,
so splitting a run into chunks, or running images in parallel, does not
change any output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .denoiser import NO_CONDITION, Condition, NoisePrediction
from .diffusion import learned_log_variance, posterior
from .errors import ConfigError
from .schedule import BetaSchedule, respace, spaced_steps

METHODS = ("ancestral", "ddim")
VARIANCE_MODES = ("fixed_beta", "fixed_beta_tilde", "learned")

Denoiser = Callable[..., NoisePrediction]


@dataclass
class SamplerConfig:
    method: str = "ancestral"
    variance_mode: str = "fixed_beta_tilde"
    # None = every step; an int = that many evenly spaced steps; or an explicit subset
    steps: int | Sequence[int] | None = None
    spacing: str = "uniform"
    clamp_x0: bool = False
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown sampling method {self.method!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ConfigError(f"unknown variance mode {self.variance_mode!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def step_subset(self, T: int) -> np.ndarray:
        if self.steps is None:
            return np.arange(1, T + 1)
        if isinstance(self.steps, (int, np.integer)):
            return spaced_steps(T, int(self.steps), self.spacing)
        return np.asarray(self.steps, dtype=np.int64)


def reverse_mean_from_eps(x_t, eps_hat, t, schedule: BetaSchedule, clamp_x0: bool = False):
    """Reverse-transition mean and the implied x0 estimate. Returns ``(mu, x0_hat)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ConfigError(f"x_t and eps_hat differ in shape: {x_t.shape} vs {eps_hat.shape}")
    abar = schedule.at("alpha_bar", t, x_t.ndim - np.ndim(t))
    x0_hat = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    if clamp_x0:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    return posterior(x0_hat, x_t, t, schedule).mean, x0_hat


def step_log_variance(prediction: NoisePrediction, t, schedule: BetaSchedule, variance_mode: str, like: np.ndarray):
    nd = like.ndim - np.ndim(t)
    if variance_mode == "fixed_beta":
        return schedule.at("log_beta", t, nd)
    if variance_mode == "fixed_beta_tilde":
        return schedule.at("posterior_log_variance_clipped", t, nd)
    if variance_mode == "learned":
        if prediction.v is None:
            raise ConfigError("learned variance mode needs a prediction with v")
        return learned_log_variance(prediction.v, t, schedule)
    raise ConfigError(f"unknown variance mode {variance_mode!r}")


def _noise(noise, shape) -> np.ndarray:
    if isinstance(noise, np.random.Generator):
        return noise.standard_normal(shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != shape:
        raise ConfigError(f"noise shape {noise.shape} does not match {shape}")
    return noise


def ancestral_step(
    x_t,
    prediction: NoisePrediction,
    t: int,
    schedule: BetaSchedule,
    variance_mode: str = "fixed_beta_tilde",
    noise=None,
    clamp_x0: bool = False,
) -> np.ndarray:
    """x_{t-1} = mu + sigma_t z, with z = 0 at t = 1.

    ``noise`` is a standard-normal array shaped like ``x_t`` or a Generator.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    logvar = step_log_variance(prediction, t, schedule, variance_mode, x_t)
    mu, _ = reverse_mean_from_eps(x_t, prediction.eps, t, schedule, clamp_x0)
    if int(t) == 1:
        return mu
    if noise is None:
        raise ConfigError("ancestral_step needs noise for t > 1")
    return mu + np.exp(0.5 * logvar) * _noise(noise, x_t.shape)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: BetaSchedule, eta: float = 0.0, noise=None, clamp_x0: bool = False):
    """Jump from step ``t`` to ``t_prev`` (0 means the clean end, alpha_bar = 1)."""
    if not 0 <= t_prev < t:
        raise ConfigError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    abar = float(schedule.alpha_bar[t - 1])
    abar_prev = 1.0 if t_prev == 0 else float(schedule.alpha_bar[t_prev - 1])
    x0_hat = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    if clamp_x0:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        eps_hat = (x_t - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev)
    rest = 1.0 - abar_prev - sigma**2
    if rest < -1e-12:
        raise ConfigError(f"DDIM sigma^2 {sigma**2} exceeds 1 - alpha_bar_prev {1.0 - abar_prev}")
    out = np.sqrt(abar_prev) * x0_hat + np.sqrt(max(rest, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ConfigError("ddim_step with eta > 0 needs noise")
        out = out + sigma * _noise(noise, x_t.shape)
    return out


@dataclass
class SampleResult:
    images: np.ndarray
    # (n, panels, C, H, W); None unless snapshots were requested
    snapshots: np.ndarray | None
    steps: np.ndarray


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def snapshot_indices(n_steps: int, fractions: Sequence[float]) -> list[int]:
    """Number of completed reverse steps for each requested fraction of the run."""
    out = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"snapshot fraction {f} outside [0, 1]")
        out.append(int(round(f * n_steps)))
    return out


def sample(
    denoiser: Denoiser,
    schedule: BetaSchedule,
    config: SamplerConfig,
    n: int,
    shape: tuple[int, ...],
    cond: Condition = NO_CONDITION,
    snapshot_fractions: Sequence[float] | None = None,
    max_floats: int = 20_000_000,
) -> SampleResult:
    """Draw ``n`` images by running the reverse chain from x_T ~ N(0, I).

    The denoiser is called with the original (un-respaced) timestep and a
    batch of images. Images are processed in chunks bounded by
    ``max_floats`` of pre-drawn noise; each chunk costs one denoiser call
    per kept step.
    """
    shape = tuple(int(s) for s in shape)
    steps = config.step_subset(schedule.T)
    sched = respace(schedule, steps)
    K = sched.T
    if config.variance_mode == "learned" and config.method == "ancestral" and not getattr(denoiser, "learned_variance", False):
        raise ConfigError("learned variance mode needs a denoiser with a variance head")
    marks = snapshot_indices(K, snapshot_fractions) if snapshot_fractions is not None else None
    n_snap = len(marks) if marks is not None else 0
    images = np.zeros((n,) + shape)
    snaps = np.zeros((n, n_snap) + shape) if marks is not None else None
    if n == 0:
        return SampleResult(images, snaps, steps)

    if cond.kind == "class_label" and cond.class_id.size == 1:
        cond = Condition("class_label", class_id=np.full(n, int(cond.class_id[0])))

    stochastic = config.method == "ancestral" or config.eta > 0
    draws = 1 + (K if stochastic else 0)
    per_image = draws * int(np.prod(shape))
    chunk = max(1, min(n, max_floats // max(per_image, 1)))

    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        noise = np.stack([image_rng(config.seed, i).standard_normal((draws,) + shape) for i in range(lo, hi)])
        sub_cond = cond.take(slice(lo, hi)) if cond.kind != "none" else cond
        x = noise[:, 0]
        snap_here = snaps[lo:hi] if snaps is not None else None
        if marks is not None:
            for j, m in enumerate(marks):
                if m == 0:
                    snap_here[:, j] = x
        for done, i in enumerate(range(K, 0, -1), start=1):
            t_model = int(sched.timesteps[i - 1])
            pred = denoiser(x, np.full(hi - lo, t_model), sub_cond)
            if config.method == "ancestral":
                x = ancestral_step(x, pred, i, sched, config.variance_mode, noise[:, i] if i > 1 else None, config.clamp_x0)
            else:
                z = noise[:, i] if config.eta > 0 else None
                x = ddim_step(x, pred.eps, i, i - 1, sched, config.eta, z, config.clamp_x0)
            if marks is not None:
                for j, m in enumerate(marks):
                    if m == done:
                        snap_here[:, j] = x
        images[lo:hi] = x
    return SampleResult(images, snaps, steps)
