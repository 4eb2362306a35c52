"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from deskpaws.encoder import ConfigError, EncoderConfig
from deskpaws.objective import ME_MAX_VARIANTS
from deskpaws.views import AugmentConfig


@dataclass
class DataConfig:
    classes: int = 4
    per_class: int = 1250
    dim: int = 16
    separation: float = 3.0
    labeled_per_class: int = 10
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class PawsConfig:
    tau: float = 0.1
    T: float = 0.25
    smoothing: float = 0.1
    me_max: bool = True
    me_max_variant: str = "differentiable"
    entropy_min: float = 0.0
    prop2_targets: bool = False


@dataclass
class ViewConfig:
    num_global: int = 2
    num_local: int = 6
    noise: float = 0.1  # multiplied by the per-feature std of the training inputs
    scale_low: float = 0.9
    scale_high: float = 1.1
    mask_local: float = 0.5


@dataclass
class SupportConfig:
    classes: int = 4
    per_class: int = 8
    views: int = 1


@dataclass
class OptimConfig:
    batch_size: int = 64
    epochs: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-6
    start_lr: float = 0.05
    peak_lr: float = 0.5
    final_lr: float = 0.0
    warmup_fraction: float = 0.1


@dataclass
class TrainLoopConfig:
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 10
    diagnostics: bool = True


@dataclass
class FineTuneConfig:
    lrs: str = "0.01,0.02,0.05,0.1,0.2"
    epochs: str = "30,50"
    val_fraction: float = 0.2
    momentum: float = 0.9
    batch_size: int = 32

    @property
    def lr_grid(self):
        return [float(v) for v in self.lrs.split(",") if v.strip()]

    @property
    def epoch_grid(self):
        return [int(v) for v in self.epochs.split(",") if v.strip()]


SECTIONS = {
    "data": DataConfig,
    "model": EncoderConfig,
    "paws": PawsConfig,
    "views": ViewConfig,
    "support": SupportConfig,
    "optim": OptimConfig,
    "train": TrainLoopConfig,
    "finetune": FineTuneConfig,
}


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    paws: PawsConfig = field(default_factory=PawsConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    support: SupportConfig = field(default_factory=SupportConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)

    def augment(self, feature_std: float = 1.0) -> AugmentConfig:
        v = self.views
        return AugmentConfig(v.noise * feature_std, v.scale_low, v.scale_high, v.mask_local)

    def validate(self):
        p = self.paws
        if not (p.tau > 0 and p.T > 0):
            raise ConfigError("temperatures must be positive")
        if not 0 <= p.smoothing < 1:
            raise ConfigError("paws.smoothing must be in [0, 1)")
        if p.me_max_variant not in ME_MAX_VARIANTS:
            raise ConfigError(f"paws.me_max_variant must be one of {ME_MAX_VARIANTS}")
        if p.entropy_min < 0:
            raise ConfigError("paws.entropy_min must be non-negative")
        d, s = self.data, self.support
        if d.classes < 2:
            raise ConfigError("data.classes must be at least 2")
        if s.classes > d.classes:
            raise ConfigError("support.classes exceeds data.classes")
        if s.per_class > d.labeled_per_class:
            raise ConfigError(
                f"label budget infeasible: support.per_class={s.per_class} > data.labeled_per_class={d.labeled_per_class}"
            )
        if self.views.num_global != 2:
            raise ConfigError("views.num_global must be 2")
        if self.model.input_dim != d.dim:
            raise ConfigError(f"model.input_dim={self.model.input_dim} does not match data.dim={d.dim}")
        if self.optim.batch_size < 1 or self.optim.epochs < 0:
            raise ConfigError("optim.batch_size must be >= 1 and optim.epochs >= 0")
        self.model.validate()
        self.augment().validate()


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def set_value(config: TrainConfig, key: str, raw: str) -> None:
    section, _, name = key.strip().partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(config, section)
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _coerce(raw, fields[name].type, key))


def parse_config_text(text: str, config: TrainConfig | None = None) -> TrainConfig:
    config = config if config is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        set_value(config, key, value)
    return config


def load_config(path=None, overrides=()) -> TrainConfig:
    config = TrainConfig()
    if path is not None:
        parse_config_text(Path(path).read_text(), config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(config, key, value)
    return config


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
