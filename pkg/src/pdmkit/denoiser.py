"""Noise predictors: an exact oracle for Gaussian data and a small dense network.

The network is written directly in numpy with a hand-derived backward pass
so the gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, f64_bytes
from .errors import ConfigError, FormatError
from .schedule import BetaSchedule

CHECKPOINT_MAGIC = b"PDMW"
CHECKPOINT_VERSION = 1


@dataclass
class NoisePrediction:
    eps: np.ndarray
    v: np.ndarray | None = None

    @property
    def learned_variance(self) -> bool:
        return self.v is not None


@dataclass
class Condition:
    """Conditioning signal for a batch.

    ``class_id`` holds one label per image; ``low_res`` holds one
    low-resolution image per image, shape ``(B, C, h, w)``.
    """

    kind: str = "none"
    class_id: np.ndarray | None = None
    low_res: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "class_label", "low_res"):
            raise ConfigError(f"unknown condition kind {self.kind!r}")
        if self.kind == "none" and (self.class_id is not None or self.low_res is not None):
            raise ConfigError("unconditional Condition carries data")
        if self.kind == "class_label":
            if self.class_id is None or self.low_res is not None:
                raise ConfigError("class_label condition needs class_id only")
            self.class_id = np.atleast_1d(np.asarray(self.class_id, dtype=np.int64))
        if self.kind == "low_res":
            if self.low_res is None or self.class_id is not None:
                raise ConfigError("low_res condition needs low_res only")
            self.low_res = np.asarray(self.low_res, dtype=np.float64)

    def take(self, idx) -> "Condition":
        if self.kind == "class_label":
            return Condition("class_label", class_id=self.class_id[idx])
        if self.kind == "low_res":
            return Condition("low_res", low_res=self.low_res[idx])
        return self


NO_CONDITION = Condition()


def upsample_nearest(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of ``(..., h, w)`` to ``(..., H, W)``; h, w must divide H, W."""
    h, w = x.shape[-2:]
    H, W = shape
    if H % h or W % w:
        raise ConfigError(f"low-res size {h}x{w} does not divide target {H}x{W}")
    return np.repeat(np.repeat(x, H // h, axis=-2), W // w, axis=-1)


def downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Block-average ``(..., H, W)`` by ``factor``; builds low-res conditioning inputs."""
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ConfigError(f"factor {factor} does not divide {H}x{W}")
    s = x.reshape(x.shape[:-2] + (H // factor, factor, W // factor, factor))
    return s.mean(axis=(-3, -1))


class OracleDenoiser:
    """Exact E[eps | x_t] when x_0 ~ N(mu0, sigma0_sq I).

    Serves as a stand-in network whose sampler output distribution is known.
    """

    learned_variance = False

    def __init__(self, schedule: BetaSchedule, mu0: float = 0.0, sigma0_sq: float = 1.0):
        if not sigma0_sq > 0:
            raise ConfigError(f"sigma0_sq must be positive, got {sigma0_sq}")
        self.schedule = schedule
        self.mu0 = float(mu0)
        self.sigma0_sq = float(sigma0_sq)
        self.calls = 0

    def __call__(self, x_t, t, cond: Condition = NO_CONDITION) -> NoisePrediction:
        self.calls += 1
        return oracle_predict(x_t, t, self.schedule, self.mu0, self.sigma0_sq)


def oracle_predict(x_t, t, schedule: BetaSchedule, mu0: float, sigma0_sq: float) -> NoisePrediction:
    if not sigma0_sq > 0:
        raise ConfigError(f"sigma0_sq must be positive, got {sigma0_sq}")
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t)
    abar = schedule.at("alpha_bar", t, x_t.ndim - t.ndim)
    eps = np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * mu0) / (abar * sigma0_sq + 1.0 - abar)
    return NoisePrediction(eps)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape ``(B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class NetConfig:
    image_shape: tuple[int, int, int] = (1, 8, 8)
    hidden: tuple[int, ...] = (128, 128)
    time_dim: int = 32
    learned_variance: bool = False
    cond_kind: str = "none"
    num_classes: int = 0
    class_dim: int = 32
    low_res_factor: int = 2

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image shape {self.image_shape}")
        if self.cond_kind not in ("none", "class_label", "low_res"):
            raise ConfigError(f"unknown conditioning {self.cond_kind!r}")
        if self.cond_kind == "class_label" and self.num_classes < 1:
            raise ConfigError("class conditioning needs num_classes >= 1")
        if self.cond_kind == "low_res":
            _, H, W = self.image_shape
            if H % self.low_res_factor or W % self.low_res_factor:
                raise ConfigError(f"low_res_factor {self.low_res_factor} does not divide {H}x{W}")

    @property
    def pixels(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    @property
    def cond_dim(self) -> int:
        if self.cond_kind == "class_label":
            return self.class_dim
        if self.cond_kind == "low_res":
            return self.pixels
        return 0

    @property
    def in_dim(self) -> int:
        return self.pixels + self.time_dim + self.cond_dim

    @property
    def out_dim(self) -> int:
        return self.pixels * (2 if self.learned_variance else 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    raw_out: np.ndarray | None = None
    class_id: np.ndarray | None = None


class DenoiserNet:
    """Dense eps-predictor: [x_t, time embedding, conditioning] -> hidden layers -> [eps, v].

    ``params`` holds weights and biases in declaration order
    (W_0, b_0, ..., W_out, b_out, then the class table if any).
    """

    def __init__(self, config: NetConfig, params: list[np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.calls = 0
        if params is None:
            params = self.init_params(config, np.random.default_rng(seed))
        shapes = self.param_shapes(config)
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ConfigError("parameter shapes do not match the network config")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    @property
    def learned_variance(self) -> bool:
        return self.config.learned_variance

    @staticmethod
    def param_shapes(config: NetConfig) -> list[tuple[int, ...]]:
        dims = [config.in_dim, *config.hidden, config.out_dim]
        shapes: list[tuple[int, ...]] = []
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        if config.cond_kind == "class_label":
            shapes.append((config.num_classes, config.class_dim))
        return shapes

    @classmethod
    def init_params(cls, config: NetConfig, rng: np.random.Generator) -> list[np.ndarray]:
        shapes = cls.param_shapes(config)
        n_dense = 2 * (len(config.hidden) + 1)
        params = []
        for shape in shapes[:n_dense]:
            if len(shape) == 1:
                params.append(np.zeros(shape))
            else:
                params.append(rng.standard_normal(shape) / np.sqrt(shape[0]))
        # class table, if any
        params += [rng.standard_normal(s) for s in shapes[n_dense:]]
        return params

    @property
    def n_layers(self) -> int:
        return len(self.config.hidden) + 1

    @property
    def class_table(self) -> np.ndarray | None:
        return self.params[2 * self.n_layers] if self.config.cond_kind == "class_label" else None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def _inputs(self, x_t: np.ndarray, t, cond: Condition) -> tuple[np.ndarray, np.ndarray | None]:
        cfg = self.config
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[1:] != cfg.image_shape:
            raise ConfigError(f"input shape {x_t.shape[1:]} does not match network {cfg.image_shape}")
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        parts = [x_t.reshape(B, -1), timestep_embedding(t, cfg.time_dim)]
        if cond.kind != cfg.cond_kind:
            raise ConfigError(f"network expects {cfg.cond_kind!r} conditioning, got {cond.kind!r}")
        class_id = None
        if cfg.cond_kind == "class_label":
            class_id = np.broadcast_to(cond.class_id, (B,))
            if np.any(class_id < 0) or np.any(class_id >= cfg.num_classes):
                raise ConfigError(f"class_id outside 0..{cfg.num_classes - 1}")
            parts.append(self.class_table[class_id])
        elif cfg.cond_kind == "low_res":
            lr = cond.low_res
            if lr.shape[0] != B or lr.shape[1] != cfg.image_shape[0]:
                raise ConfigError(f"low_res batch/channels {lr.shape[:2]} do not match input")
            parts.append(upsample_nearest(lr, cfg.image_shape[1:]).reshape(B, -1))
        return np.concatenate(parts, axis=1), class_id

    def forward(self, x_t, t, cond: Condition = NO_CONDITION) -> tuple[NoisePrediction, ForwardCache]:
        inputs, class_id = self._inputs(x_t, t, cond)
        cache = ForwardCache(inputs, class_id=class_id)
        h = inputs
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < self.n_layers - 1:
                cache.pre.append(z)
                cache.acts.append(h)
                h = silu(z)
            else:
                cache.acts.append(h)
                cache.raw_out = z
        B = inputs.shape[0]
        shape = (B,) + self.config.image_shape
        P = self.config.pixels
        eps = cache.raw_out[:, :P].reshape(shape)
        v = sigmoid(cache.raw_out[:, P:]).reshape(shape) if self.learned_variance else None
        return NoisePrediction(eps, v), cache

    def __call__(self, x_t, t, cond: Condition = NO_CONDITION) -> NoisePrediction:
        self.calls += 1
        return self.forward(x_t, t, cond)[0]

    def backward(self, cache: ForwardCache, grad_eps, grad_v=None) -> list[np.ndarray]:
        """Gradients of a scalar loss with respect to every parameter.

        ``grad_eps`` / ``grad_v`` are dL/d(eps) and dL/d(v) with the output shapes.
        """
        B = cache.inputs.shape[0]
        P = self.config.pixels
        grad_eps = np.asarray(grad_eps, dtype=np.float64)
        if grad_eps.shape != (B,) + self.config.image_shape:
            raise ConfigError(f"grad_eps shape {grad_eps.shape} does not match outputs")
        g = grad_eps.reshape(B, P)
        if self.learned_variance:
            if grad_v is None:
                gv = np.zeros((B, P))
            else:
                grad_v = np.asarray(grad_v, dtype=np.float64)
                if grad_v.shape != grad_eps.shape:
                    raise ConfigError(f"grad_v shape {grad_v.shape} does not match outputs")
                s = sigmoid(cache.raw_out[:, P:])
                gv = grad_v.reshape(B, P) * s * (1.0 - s)
            g = np.concatenate([g, gv], axis=1)
        elif grad_v is not None:
            raise ConfigError("grad_v given for a network without a variance head")

        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            h = cache.acts[i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * silu_grad(cache.pre[i - 1])
        if self.config.cond_kind == "class_label":
            table_grad = np.zeros_like(self.class_table)
            start = self.config.pixels + self.config.time_dim
            np.add.at(table_grad, cache.class_id, g[:, start : start + self.config.class_dim])
            grads[2 * self.n_layers] = table_grad
        return grads


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ConfigError("parameter and gradient shapes differ")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps_hat))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(step, new_m, new_v)


def save_checkpoint(path, net: DenoiserNet, adam: AdamState | None = None, extra: dict | None = None) -> None:
    """Write a PDMW checkpoint.

    Layout: magic, u32 version, u32 config length, UTF-8 JSON config,
    u64 float count, parameters (little-endian f8, declaration order);
    then optional tagged blocks: ``ADAM`` u64 step + m + v floats, and
    ``JSON`` u32 length + UTF-8 JSON for trainer state.
    """
    cfg = json.dumps(net.config.to_json(), sort_keys=True).encode()
    flat = np.concatenate([p.ravel() for p in net.params])
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    out += [struct.pack("<Q", flat.size), f64_bytes(flat)]
    if adam is not None:
        out += [b"ADAM", struct.pack("<Q", adam.step)]
        out += [f64_bytes(np.concatenate([m.ravel() for m in adam.m])), f64_bytes(np.concatenate([v.ravel() for v in adam.v]))]
    if extra is not None:
        blob = json.dumps(extra, sort_keys=True).encode()
        out += [b"JSON", struct.pack("<I", len(blob)), blob]
    Path(path).write_bytes(b"".join(out))


def _split(flat: np.ndarray, shapes) -> list[np.ndarray]:
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[pos : pos + n].reshape(s).copy())
        pos += n
    return out


def load_checkpoint(path) -> tuple[DenoiserNet, AdamState | None, dict | None]:
    r = Reader(Path(path).read_bytes(), path)
    r.magic(CHECKPOINT_MAGIC)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    n_cfg = r.u32("config length")
    at = r.pos
    try:
        cfg = NetConfig(**json.loads(r.take(n_cfg, "config block").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", at, path) from exc
    shapes = DenoiserNet.param_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes)
    at = r.pos
    count = r.u64("parameter count")
    if count != total:
        raise FormatError(f"parameter count {count} does not match config ({total})", at, path)
    net = DenoiserNet(cfg, _split(r.f64(count, "parameters"), shapes))
    adam, extra = None, None
    while not r.at_end():
        at = r.pos
        tag = r.take(4, "block tag")
        if tag == b"ADAM":
            step = r.u64("adam step")
            m = _split(r.f64(total, "adam m"), shapes)
            v = _split(r.f64(total, "adam v"), shapes)
            adam = AdamState(step, m, v)
        elif tag == b"JSON":
            n = r.u32("json length")
            extra = json.loads(r.take(n, "json block").decode())
        else:
            raise FormatError(f"unknown block tag {tag!r}", at, path)
    return net, adam, extra
