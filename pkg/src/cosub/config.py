"""Experiment configuration and its flat text format.

A config file holds one ``section.key = value`` pair per line; ``#`` starts a
comment and blank lines are ignored::

    model.kind = residual_mlp
    model.width = 256
    strategy.kind = cosub
    strategy.lam = 0.5
    sd.tau = 0.3

Every key can be overridden with ``section.key=value`` strings (the CLI's
``--set``); a bare ``key`` works when only one section has it, and ``seed``
means ``train.seed``.  ``none`` parses to ``None`` for optional fields.  ``dumps`` writes
every field, so a resolved snapshot reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import Dataset, SyntheticSpec, load_idx, make_splits
from .losses import CosubConfig
from .optim import OptimConfig
from .sdepth import SDConfig
from .strategies import StrategyConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelSection:
    kind: str = "residual_mlp"
    width: int = 256
    depth: int = 8
    hidden: int | None = None
    # tiny_vit only
    image_size: int = 8
    patch_size: int = 4
    depth_blocks: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    channels: int = 1
    dtype: str = "float32"


@dataclass
class DataSection:
    source: str = "synthetic"
    kind: str = "gaussian-mixture"
    n_train: int = 10_000
    n_test: int = 2_000
    dims: int = 50
    classes: int = 10
    noise: float = 1.0
    spread: float = 1.0
    modes: int = 1
    seed: int = 0
    # IDX files, used when source = idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class StrategySection:
    kind: str = "cosub"
    lam: float = 0.5
    loss_kind: str = "bce-soft"
    label_loss: str = "bce"
    label_smoothing: float = 0.0
    ema_momentum: float = 0.9999
    teacher_checkpoint: str | None = None


@dataclass
class SDSection:
    tau: float = 0.1
    mode: str = "uniform"
    impl: str = "efficient"


@dataclass
class OptimSection:
    base_lr: float | None = None
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer_decay: float | None = None
    c_ld: float = 1.0
    schedule: str = "cosine"
    warmup_epochs: int = 5
    min_lr: float = 0.0


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    augment: str = "none"
    eval_batch_size: int = 1000


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    sd: SDSection = field(default_factory=SDSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- typed views ---------------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.kind, d.n_train, d.n_test, d.dims, d.classes, d.noise,
                             d.spread, d.modes, d.seed)

    def strategy_config(self) -> StrategyConfig:
        s = self.strategy
        cosub = CosubConfig(s.lam, s.loss_kind, s.label_loss, s.label_smoothing)
        return StrategyConfig(s.kind, cosub, s.ema_momentum, s.teacher_checkpoint)

    def sd_config(self) -> SDConfig:
        return SDConfig(self.sd.tau, self.sd.mode, self.sd.impl)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(**dataclasses.asdict(self.optim))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train))

    def arch(self, input_dim: int, num_classes: int) -> dict:
        m = self.model
        if m.kind == "residual_mlp":
            return dict(kind="residual_mlp", width=m.width, depth=m.depth, num_classes=num_classes,
                        input_dim=input_dim, hidden=m.hidden, dtype=m.dtype)
        if m.kind == "tiny_vit":
            return dict(kind="tiny_vit", image_size=m.image_size, patch_size=m.patch_size,
                        width=m.width, depth_blocks=m.depth_blocks, heads=m.heads,
                        num_classes=num_classes, channels=m.channels, mlp_ratio=m.mlp_ratio,
                        dtype=m.dtype)
        raise ConfigError("model.kind", f"unknown architecture {m.kind!r}")

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.data
        if d.source == "synthetic":
            return make_splits(self.synthetic_spec())
        if d.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(d, key) is None:
                    raise ConfigError(f"data.{key}", "required when data.source = idx")
            train = load_idx(d.train_images, d.train_labels, d.classes)
            test = load_idx(d.test_images, d.test_labels, d.classes)
            test.split = "test"
            return train, test
        raise ConfigError("data.source", f"expected 'synthetic' or 'idx', got {d.source!r}")

    def validate(self) -> "ExperimentConfig":
        """Build every typed view once so bad values surface with their key."""
        checks = [("strategy", self.strategy_config), ("sd", self.sd_config),
                  ("optim", self.optim_config), ("train", self.train_config)]
        if self.data.source == "synthetic":
            checks.append(("data", self.synthetic_spec))
        for section, build in checks:
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as err:
                raise ConfigError(_guess_key(section, str(err), getattr(self, section)), str(err)) from None
        if self.model.kind not in ("residual_mlp", "tiny_vit"):
            raise ConfigError("model.kind", f"unknown architecture {self.model.kind!r}")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError("data.source", f"expected 'synthetic' or 'idx', got {self.data.source!r}")
        return self


def _guess_key(section: str, message: str, obj) -> str:
    """Name the field an error message talks about, falling back to the section."""
    names = [f.name for f in dataclasses.fields(obj)]
    aliases = {"lambda": "lam", "strategy": "kind", "tau": "tau"}
    for word, name in aliases.items():
        if word in message and name in names:
            return f"{section}.{name}"
    for name in sorted(names, key=len, reverse=True):
        if name in message:
            return f"{section}.{name}"
    return section


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------
def _coerce(key: str, text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _coerce(key, text, args[0])
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigError(key, f"unsupported field type {hint}")


def _section_hints(section) -> dict:
    return typing.get_type_hints(type(section))


# bare names that occur in several sections
_BARE_DEFAULTS = {"seed": "train.seed"}


def resolve_key(config: ExperimentConfig, key: str) -> str:
    """Expand a bare ``name`` to ``section.name`` when only one section has it."""
    key = key.strip()
    if "." in key:
        return key
    if key in _BARE_DEFAULTS:
        return _BARE_DEFAULTS[key]
    owners = [f.name for f in dataclasses.fields(config)
              if key in _section_hints(getattr(config, f.name))]
    if len(owners) != 1:
        raise ConfigError(key, "keys look like section.name" if not owners
                          else f"ambiguous key; qualify it as one of {[f'{o}.{key}' for o in owners]}")
    return f"{owners[0]}.{key}"


def set_value(config: ExperimentConfig, key: str, text: str) -> None:
    key = resolve_key(config, key)
    parts = key.split(".")
    if len(parts) != 2:
        raise ConfigError(key, "keys look like section.name")
    sec_name, name = parts
    if sec_name not in {f.name for f in dataclasses.fields(config)}:
        raise ConfigError(key, f"unknown section {sec_name!r}")
    section = getattr(config, sec_name)
    hints = _section_hints(section)
    if name not in hints:
        raise ConfigError(key, f"unknown key; {sec_name} has {sorted(hints)}")
    setattr(section, name, _coerce(key, text, hints[name]))


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings in order."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, value = item.split("=", 1)
        set_value(config, key, value)
    return config


def loads(text: str, overrides=()) -> ExperimentConfig:
    config = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        set_value(config, key, value)
    return apply_overrides(config, overrides)


def load(path, overrides=()) -> ExperimentConfig:
    return loads(Path(path).read_text(), overrides)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(config: ExperimentConfig) -> str:
    lines = []
    for sec in dataclasses.fields(config):
        section = getattr(config, sec.name)
        for f in dataclasses.fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
