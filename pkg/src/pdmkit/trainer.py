"""Training loop for the dense denoiser with the hybrid objective."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .denoiser import AdamState, Condition, DenoiserNet, NO_CONDITION, adam_step, downsample_mean, load_checkpoint, save_checkpoint
from .diffusion import ImportanceSampler, UniformSampler, forward_marginal, hybrid_loss
from .errors import ConfigError, NumericError
from .schedule import BetaSchedule


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    lam: float = 0.001
    importance_sampling: bool = False
    seed: int = 0
    checkpoint_every: int = 0


def batch_condition(net: DenoiserNet, dataset: Dataset, idx: np.ndarray, x0: np.ndarray) -> Condition:
    kind = net.config.cond_kind
    if kind == "class_label":
        if dataset.labels is None:
            raise ConfigError("class conditioning needs a labelled dataset")
        return Condition("class_label", class_id=dataset.labels[idx])
    if kind == "low_res":
        return Condition("low_res", low_res=downsample_mean(x0, net.config.low_res_factor))
    return NO_CONDITION


class Trainer:
    def __init__(self, net: DenoiserNet, schedule: BetaSchedule, dataset: Dataset, config: TrainConfig):
        if len(dataset) == 0:
            raise ConfigError("training dataset is empty")
        if dataset.shape != net.config.image_shape:
            raise ConfigError(f"dataset shape {dataset.shape} does not match network {net.config.image_shape}")
        self.net = net
        self.schedule = schedule
        self.dataset = dataset
        self.config = config
        self.adam = AdamState.zeros_like(net.params)
        self.rng = np.random.default_rng(config.seed)
        self.t_sampler = ImportanceSampler(schedule.T) if config.importance_sampling else UniformSampler(schedule.T)
        self.step = 0

    @property
    def epoch(self) -> int:
        return self.step * self.config.batch // len(self.dataset)

    def train_step(self) -> tuple[float, float, float]:
        cfg = self.config
        idx = self.rng.integers(0, len(self.dataset), size=cfg.batch)
        x0 = self.dataset.images[idx]
        t, weights = self.t_sampler.sample(self.rng, cfg.batch)
        eps = self.rng.standard_normal(x0.shape)
        x_t = forward_marginal(x0, t, self.schedule, eps)
        cond = batch_condition(self.net, self.dataset, idx, x0)
        pred, cache = self.net.forward(x_t, t, cond)
        loss = hybrid_loss(eps, pred, x0, x_t, t, self.schedule, cfg.lam, weights)
        if not np.all(np.isfinite(loss.total)):
            bad = int(np.flatnonzero(~np.isfinite(loss.total))[0])
            raise NumericError(f"non-finite loss at step {self.step + 1}, t={int(t[bad])}")
        grads = self.net.backward(cache, loss.grad_eps, loss.grad_v)
        self.net.params, self.adam = adam_step(self.net.params, grads, self.adam, cfg.lr)
        self.t_sampler.record(t, loss.total)
        self.step += 1
        return float(loss.total.mean()), float(loss.mse.mean()), float(loss.vlb.mean())

    def run(self, n_steps: int, log=None) -> list[tuple[int, int, float, float, float]]:
        """Run ``n_steps`` updates; returns ``(epoch, step, total, mse, vlb)`` rows."""
        rows = []
        for _ in range(n_steps):
            total, mse, vlb = self.train_step()
            row = (self.epoch, self.step, total, mse, vlb)
            rows.append(row)
            if log is not None:
                log(row)
        return rows

    def state(self) -> dict:
        return {
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "sampler": self.t_sampler.state_dict(),
            "train": asdict(self.config),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self.adam, self.state())

    @classmethod
    def resume(cls, path, schedule: BetaSchedule, dataset: Dataset, config: TrainConfig) -> "Trainer":
        net, adam, extra = load_checkpoint(path)
        trainer = cls(net, schedule, dataset, config)
        if adam is not None:
            trainer.adam = adam
        if extra is not None:
            trainer.step = int(extra["step"])
            trainer.rng.bit_generator.state = extra["rng"]
            if config.importance_sampling:
                trainer.t_sampler = ImportanceSampler.from_state(extra["sampler"])
        return trainer


def evaluate(net: DenoiserNet, schedule: BetaSchedule, dataset: Dataset, lam: float = 0.001, seed: int = 12345, repeats: int = 4, batch: int = 256) -> dict:
    """Held-out loss averaged over uniformly drawn timesteps and noise from a fixed seed."""
    rng = np.random.default_rng(seed)
    totals, mses, vlbs = [], [], []
    n = len(dataset)
    for _ in range(repeats):
        for lo in range(0, n, batch):
            idx = np.arange(lo, min(n, lo + batch))
            x0 = dataset.images[idx]
            t = rng.integers(1, schedule.T + 1, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            x_t = forward_marginal(x0, t, schedule, eps)
            pred, _ = net.forward(x_t, t, batch_condition(net, dataset, idx, x0))
            loss = hybrid_loss(eps, pred, x0, x_t, t, schedule, lam)
            totals.append(loss.total)
            mses.append(loss.mse)
            vlbs.append(loss.vlb)
    return {
        "total": float(np.concatenate(totals).mean()),
        "mse": float(np.concatenate(mses).mean()),
        "vlb": float(np.concatenate(vlbs).mean()),
    }


def write_loss_csv(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "step", "total", "mse", "vlb"])
        for epoch, step, total, mse, vlb in rows:
            w.writerow([epoch, step, repr(total), repr(mse), repr(vlb)])


