"""Forward noising chain, true posterior, VLB terms and the hybrid objective.

Arrays are batched: images have shape ``(B, C, H, W)`` (any number of
trailing axes works) and timesteps are an int or a length-``B`` array.
Per-sample reductions are means over all non-batch axes, so losses are in
nats per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import BetaSchedule

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


@dataclass
class GaussianMoments:
    mean: np.ndarray
    variance: np.ndarray | float

    @property
    def log_variance(self) -> np.ndarray:
        return np.log(self.variance)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def mean_flat(x: np.ndarray) -> np.ndarray:
    """Mean over every axis except the leading batch axis."""
    x = np.asarray(x)
    if x.ndim <= 1:
        return x
    return x.reshape(x.shape[0], -1).mean(axis=1)


def _coef(schedule: BetaSchedule, name: str, t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return schedule.at(name, t, x.ndim - t.ndim)


def forward_step(x_prev, t, schedule: BetaSchedule, noise) -> np.ndarray:
    """One forward transition: sqrt(1 - beta_t) x_prev + sqrt(beta_t) noise."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    _same_shape(x_prev, noise, "x_prev and noise")
    beta = _coef(schedule, "beta", t, x_prev)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def forward_marginal(x0, t, schedule: BetaSchedule, noise) -> np.ndarray:
    """Sample q(x_t | x_0) with the supplied standard-normal ``noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    _same_shape(x0, noise, "x0 and noise")
    abar = _coef(schedule, "alpha_bar", t, x0)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def posterior_coefficients(schedule: BetaSchedule, t, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weights (on x0, on x_t) of the posterior mean."""
    beta = _coef(schedule, "beta", t, x)
    abar = _coef(schedule, "alpha_bar", t, x)
    abar_prev = _coef(schedule, "alpha_bar_prev", t, x)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    return c0, ct


def posterior(x0, x_t, t, schedule: BetaSchedule) -> GaussianMoments:
    """Moments of q(x_{t-1} | x_t, x_0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    _same_shape(x0, x_t, "x0 and x_t")
    c0, ct = posterior_coefficients(schedule, t, x0)
    var = _coef(schedule, "posterior_variance", t, x0)
    return GaussianMoments(c0 * x0 + ct * x_t, var)


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> np.ndarray:
    """Elementwise KL(p || q) between diagonal Gaussians, in nats."""
    v1 = np.asarray(p.variance, dtype=np.float64)
    v2 = np.asarray(q.variance, dtype=np.float64)
    if np.any(v1 <= 0) or np.any(v2 <= 0):
        raise ValueError("gaussian_kl needs strictly positive variances")
    diff = np.asarray(p.mean, dtype=np.float64) - np.asarray(q.mean, dtype=np.float64)
    return 0.5 * (np.log(v2) - np.log(v1) + (v1 + diff**2) / v2 - 1.0)


def gaussian_nll(x, moments: GaussianMoments) -> np.ndarray:
    """Elementwise negative log-density of ``x`` under a diagonal Gaussian."""
    var = np.asarray(moments.variance, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("gaussian_nll needs strictly positive variance")
    diff = np.asarray(x, dtype=np.float64) - moments.mean
    return 0.5 * (LOG_2PI + np.log(var) + diff**2 / var)


def prior_kl(x0, schedule: BetaSchedule) -> np.ndarray:
    """Per-sample KL(q(x_T | x_0) || N(0, I)); no learnable part."""
    x0 = np.asarray(x0, dtype=np.float64)
    abar = schedule.alpha_bar[-1]
    q = GaussianMoments(np.sqrt(abar) * x0, 1.0 - abar)
    return mean_flat(gaussian_kl(q, GaussianMoments(np.zeros_like(x0), 1.0)))


def vlb_term(t, x0, x_t, predicted: GaussianMoments, schedule: BetaSchedule) -> np.ndarray:
    """Per-sample VLB contribution of the reverse transition out of x_t.

    ``t == 1`` is the data term -log p(x_0 | x_1) (a continuous Gaussian
    likelihood); ``t >= 2`` is KL(q(x_{t-1} | x_t, x_0) || predicted).
    The prior term lives in :func:`prior_kl`.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = schedule.check_t(t)
    true = posterior(x0, x_t, t, schedule)
    var_q = np.broadcast_to(true.variance, x0.shape)
    # t == 1 rows get a dummy variance so the KL is finite; they are replaced below
    first = np.broadcast_to((t == 1).reshape(t.shape + (1,) * (x0.ndim - t.ndim)), x0.shape)
    kl = gaussian_kl(GaussianMoments(true.mean, np.where(first, 1.0, var_q)), predicted)
    nll = gaussian_nll(x0, predicted)
    return mean_flat(np.where(first, nll, kl))


def total_vlb(x0, schedule: BetaSchedule, predict_moments, rng: np.random.Generator) -> np.ndarray:
    """Full per-sample VLB: prior term plus every transition term.

    ``predict_moments(x_t, t)`` returns the reverse-transition moments.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    total = prior_kl(x0, schedule)
    for t in range(1, schedule.T + 1):
        x_t = forward_marginal(x0, t, schedule, rng.standard_normal(x0.shape))
        total = total + vlb_term(t, x0, x_t, predict_moments(x_t, t), schedule)
    return total


def learned_log_variance(v, t, schedule: BetaSchedule) -> np.ndarray:
    """Log-space interpolation between beta_t (v = 1) and beta_tilde_t (v = 0)."""
    v = np.asarray(v, dtype=np.float64)
    hi = _coef(schedule, "log_beta", t, v)
    lo = _coef(schedule, "posterior_log_variance_clipped", t, v)
    return v * hi + (1.0 - v) * lo


def predict_x0(x_t, eps_hat, t, schedule: BetaSchedule) -> np.ndarray:
    abar = _coef(schedule, "alpha_bar", t, np.asarray(x_t))
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


@dataclass
class HybridLoss:
    """Per-sample loss components plus gradients with respect to the network outputs."""

    total: np.ndarray
    mse: np.ndarray
    vlb: np.ndarray
    grad_eps: np.ndarray
    grad_v: np.ndarray | None


def hybrid_loss(
    eps_true,
    prediction,
    x0,
    x_t,
    t,
    schedule: BetaSchedule,
    lam: float = 0.001,
    weights=None,
) -> HybridLoss:
    """MSE on the predicted noise plus ``lam`` times the VLB.

    The mean fed to the VLB is treated as a constant, so the VLB gradient
    reaches the network only through the variance head. Without a variance
    head the VLB is still reported (using beta_tilde) but carries no
    gradient. ``weights`` rescales each sample's contribution to the
    gradients (importance weights); the returned losses are unweighted.
    Gradients are of the batch mean of the weighted total.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    eps_true = np.asarray(eps_true, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(prediction.eps, dtype=np.float64)
    _same_shape(eps_true, eps_hat, "eps and eps_hat")
    _same_shape(x0, x_t, "x0 and x_t")
    _same_shape(x0, eps_hat, "x0 and eps_hat")
    t = schedule.check_t(t)
    B = x0.shape[0]
    n_el = x0[0].size
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    w_b = w.reshape((B,) + (1,) * (x0.ndim - 1))

    err = eps_hat - eps_true
    mse = mean_flat(err**2)
    grad_eps = w_b * 2.0 * err / (n_el * B)

    # stop-gradient: the mean comes from eps_hat but is frozen for the VLB
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)
    mean = posterior(x0_hat, x_t, t, schedule).mean
    if prediction.v is not None:
        v = np.asarray(prediction.v, dtype=np.float64)
        _same_shape(v, x0, "v and x0")
        logvar = learned_log_variance(v, t, schedule)
    else:
        v = None
        logvar = np.broadcast_to(_coef(schedule, "posterior_log_variance_clipped", t, x0), x0.shape)
    var = np.exp(logvar)
    vlb = vlb_term(t, x0, x_t, GaussianMoments(mean, var), schedule)

    grad_v = None
    if v is not None:
        true = posterior(x0, x_t, t, schedule)
        t_b = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
        # d/dlogvar of KL(q || N(mean, var)) and of the Gaussian NLL
        d_kl = 0.5 * (1.0 - (true.variance + (true.mean - mean) ** 2) / var)
        d_nll = 0.5 * (1.0 - (x0 - mean) ** 2 / var)
        d_logvar = np.where(t_b == 1, d_nll, d_kl)
        dlogvar_dv = _coef(schedule, "log_beta", t, x0) - _coef(schedule, "posterior_log_variance_clipped", t, x0)
        grad_v = w_b * lam * d_logvar * dlogvar_dv / (n_el * B)

    return HybridLoss(mse + lam * vlb, mse, vlb, grad_eps, grad_v)


class ImportanceSampler:
    """Loss-aware timestep sampler.

    Keeps the last ``history`` squared losses per timestep. Until every
    timestep has a full buffer it samples uniformly with weight 1; after
    that p_t is proportional to sqrt(mean of stored squared losses) and the
    weight 1 / (T p_t) keeps the loss estimate unbiased.
    """

    def __init__(self, T: int, history: int = 10):
        self.T = int(T)
        self.history = int(history)
        self.buffer = np.zeros((self.T, self.history))
        self.counts = np.zeros(self.T, dtype=np.int64)

    @property
    def warm(self) -> np.ndarray:
        return self.counts >= self.history

    def probabilities(self) -> np.ndarray:
        if not self.warm.all():
            return np.full(self.T, 1.0 / self.T)
        w = np.sqrt(np.mean(self.buffer, axis=1))
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            return np.full(self.T, 1.0 / self.T)
        return w / total

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw timestep(s) (1-based) and their importance weights."""
        p = self.probabilities()
        if not self.warm.all():
            t = rng.integers(1, self.T + 1, size=size)
            return t, np.ones(np.shape(t))
        idx = rng.choice(self.T, size=size, p=p)
        return idx + 1, 1.0 / (self.T * p[idx])

    def record(self, t, loss) -> None:
        for ti, li in zip(np.atleast_1d(t), np.atleast_1d(loss)):
            k = int(ti) - 1
            if self.counts[k] >= self.history:
                self.buffer[k, :-1] = self.buffer[k, 1:]
                self.buffer[k, -1] = float(li) ** 2
            else:
                self.buffer[k, self.counts[k]] = float(li) ** 2
            self.counts[k] += 1

    def state_dict(self) -> dict:
        return {"T": self.T, "history": self.history, "buffer": self.buffer.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "ImportanceSampler":
        out = cls(state["T"], state["history"])
        out.buffer = np.asarray(state["buffer"], dtype=np.float64).reshape(out.T, out.history)
        out.counts = np.asarray(state["counts"], dtype=np.int64)
        return out


class UniformSampler:
    def __init__(self, T: int):
        self.T = int(T)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        t = rng.integers(1, self.T + 1, size=size)
        return t, np.ones(np.shape(t))

    def record(self, t, loss) -> None:
        pass

    def state_dict(self) -> dict:
        return {"T": self.T}
