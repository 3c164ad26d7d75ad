"""Experiment settings and the plain-text (INI) config file.

Every section maps onto one settings object; keys are the field names::

    [shift]    DomainShiftConfig fields
    [data]     num_classes, source_per_class, target_per_class, pretrain_epochs
    [model]    hidden_dim, feature_dim, projection_dim
    [run]      batch_size, eval_timing, rejection_threshold
    [loss]     LossConfig fields
    [pseudo]   alpha
    [optim]    learning_rate, momentum

Unknown sections or keys are rejected so typos do not pass silently.
"""

import configparser
from dataclasses import dataclass, field, fields, replace

from .exceptions import InvalidInputError
from .harness import RunConfig
from .losses import LossConfig
from .model import ModelConfig, OptimConfig
from .plsim import PseudoLabelConfig
from .scenario import DomainShiftConfig


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 12
    source_per_class: int = 200
    target_per_class: int = 3000
    pretrain_epochs: int = 30

    def __post_init__(self):
        if self.num_classes < 4:
            raise InvalidInputError("num_classes must be >= 4")
        for name in ("source_per_class", "target_per_class", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")


@dataclass(frozen=True)
class ModelDims:
    hidden_dim: int = 64
    feature_dim: int = 64
    projection_dim: int = 128


@dataclass(frozen=True)
class RunOptions:
    batch_size: int = 64
    eval_timing: str = "pre_update"
    rejection_threshold: float = 0.5


@dataclass(frozen=True)
class PseudoOptions:
    alpha: float = 1.0


@dataclass(frozen=True)
class Settings:
    shift: DomainShiftConfig = field(default_factory=DomainShiftConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    run: RunOptions = field(default_factory=RunOptions)
    loss: LossConfig = field(default_factory=LossConfig)
    pseudo: PseudoOptions = field(default_factory=PseudoOptions)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def model_config(self, num_known_classes):
        return ModelConfig(
            input_dim=self.shift.input_dim,
            num_known_classes=num_known_classes,
            **vars(self.model),
        )

    def run_config(self, loss_kind=None, quality=100.0, quantity=100.0, seed=0, **extra):
        loss = self.loss if loss_kind is None else replace(self.loss, kind=loss_kind)
        return RunConfig(
            batch_size=self.run.batch_size,
            eval_timing=self.run.eval_timing,
            rejection_threshold=self.run.rejection_threshold,
            loss=loss,
            pseudo=PseudoLabelConfig(quantity, quality, self.pseudo.alpha),
            optim=self.optim,
            seed=seed,
            **extra,
        )


SECTIONS = {f.name: f.default_factory for f in fields(Settings)}


def _coerce(text, default, key):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[text.strip().lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except (KeyError, ValueError):
        raise InvalidInputError(f"bad value {text!r} for {key}") from None
    return text.strip()


def load_settings(path=None, base=None):
    """Settings from defaults, overridden by the INI file at ``path``."""
    settings = base or Settings()
    if path is None:
        return settings
    parser = configparser.ConfigParser()
    try:
        found = parser.read(path)
    except configparser.Error as exc:
        raise InvalidInputError(f"malformed config file {path}: {exc}") from None
    if not found:
        raise InvalidInputError(f"cannot read config file {path}")
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidInputError(
                f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}"
            )
        current = getattr(settings, section)
        valid = {f.name for f in fields(current)}
        values = {}
        for key, text in parser[section].items():
            if key not in valid:
                raise InvalidInputError(
                    f"unknown key {key!r} in [{section}]; expected one of {sorted(valid)}"
                )
            values[key] = _coerce(text, getattr(current, key), f"{section}.{key}")
        updates[section] = replace(current, **values)
    return replace(settings, **updates)
