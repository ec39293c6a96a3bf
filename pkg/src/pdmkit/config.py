"""Flat ``section.key = value`` run configs backed by dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class ScheduleSection:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cosine_s: float = 0.008


@dataclass
class ModelSection:
    hidden: str = "128,128"
    time_dim: int = 32
    learned_variance: bool = False
    cond: str = "none"
    num_classes: int = 0
    class_dim: int = 32
    low_res_factor: int = 2
    init_seed: int = 0


@dataclass
class TrainSection:
    steps: int = 2000
    # if positive, overrides steps: ceil(epochs * n / batch)
    epochs: float = 0.0
    batch: int = 64
    lr: float = 1e-3
    # ``lambda`` in the file
    lam: float = 0.001
    importance_sampling: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    resume: str = ""


@dataclass
class SampleSection:
    method: str = "ancestral"
    variance_mode: str = "fixed_beta_tilde"
    # 0 means every step
    steps: int = 0
    spacing: str = "uniform"
    eta: float = 0.0
    # auto: on when the training data were normalized to [-1, 1]
    clamp_x0: str = "auto"
    count: int = 16
    seed: int = 0
    checkpoint: str = ""
    # e.g. "mu0=0,sigma0=1"; replaces the checkpoint
    oracle: str = ""
    shape: str = "1x8x8"
    class_id: int = -1
    low_res: str = ""
    # percent of steps completed, e.g. "0,25,50,75,100"
    snapshot_at: str = ""
    grid_cols: int = 8
    ledger: str = ""


@dataclass
class EvalSection:
    metrics: str = "fid,pr,variogram"
    k: int = 3
    features: str = "flatten_pca"
    feature_dim: int = 16
    real: str = ""
    gen: str = ""
    real_features: str = ""
    gen_features: str = ""
    # 0 means half the grid diagonal
    variogram_max_lag: float = 0.0
    variogram_delta: float = 0.5
    pair_budget: int = 1_000_000
    # none | per_sample | per_batch; stretch generated images onto [-1, 1]
    rescale: str = "none"


@dataclass
class DataSection:
    train: str = ""
    labels: str = ""
    # none | unit_interval | symmetric
    normalize: str = "none"
    scale: float = 1.0


@dataclass
class SynthSection:
    kind: str = "grf"
    n: int = 100
    side: int = 32
    sigma2: float = 1.0
    rho: float = 4.0
    mu0: float = 0.0
    sigma0_sq: float = 1.0
    shape: str = "1x8x8"
    seed: int = 0
    idx_images: str = ""
    idx_labels: str = ""


SECTIONS = {
    "schedule": ScheduleSection,
    "model": ModelSection,
    "train": TrainSection,
    "sample": SampleSection,
    "eval": EvalSection,
    "data": DataSection,
    "synth": SynthSection,
}

# file key -> attribute name where they differ
ALIASES = {("train", "lambda"): "lam"}
REVERSE_ALIASES = {(s, attr): key for (s, key), attr in ALIASES.items()}


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def set(self, dotted: str, raw: str) -> None:
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} is not of the form section.key")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        attr = ALIASES.get((section, key), key)
        sec = getattr(self, section)
        types = {f.name: f.type for f in fields(sec)}
        if attr not in types or (section, attr) in REVERSE_ALIASES and key == attr:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sec, attr, _convert(raw.strip(), types[attr], dotted))

    def update(self, pairs: dict[str, str]) -> None:
        for k, v in pairs.items():
            self.set(k, v)

    def items(self):
        for section in SECTIONS:
            sec = getattr(self, section)
            for f in fields(sec):
                key = REVERSE_ALIASES.get((section, f.name), f.name)
                yield f"{section}.{key}", getattr(sec, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def copy(self) -> "RunConfig":
        return RunConfig(**{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS})


def _convert(raw: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad shape {text!r}; expected CxHxW") from exc
    if len(parts) != 3 or min(parts) < 1:
        raise ConfigError(f"bad shape {text!r}; expected CxHxW")
    return parts  # type: ignore[return-value]


def parse_kv(text: str) -> dict[str, float]:
    """``"mu0=0,sigma0=1"`` -> ``{"mu0": 0.0, "sigma0": 1.0}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ConfigError(f"expected name=value, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"bad number in {part!r}") from exc
    return out


def parse_list(text: str, typ=float) -> list:
    try:
        return [typ(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc
