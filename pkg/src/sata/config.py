"""Run configuration: defaults, declarative config files, and overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .stream import CORRUPTION_BASES, CORRUPTION_KINDS, SourceTask

PROTOCOLS = ("abrupt", "gradual", "forgetting", "generalization")


@dataclass
class RunConfig:
    """Everything one protocol run depends on, seedable and file-loadable."""

    # adaptation policy
    policy: str = "sata"
    optimizer: str = "adam"
    lr: float = 1e-3
    tau: float = 0.1
    steps_per_batch: int = 1
    disable_ta: bool = False
    disable_prototypes: bool = False
    disable_augmented_view: bool = False
    # protocol and stream
    protocol: str = "abrupt"
    corruptions: tuple = CORRUPTION_KINDS
    batch_size: int = 200
    samples_per_corruption: int = 2000
    samples_per_severity_step: int = 200
    # synthetic source task
    input_dim: int = 32
    n_classes: int = 10
    sigma: float = 1.0
    mean_scale: float = 1.0
    n_train: int = 4000
    n_test: int = 2000
    # model and source training
    hidden_dim: int = 32
    embed_dim: int = 16
    n_blocks: int = 2
    train_epochs: int = 20
    train_batch_size: int = 128
    train_lr: float = 1e-3
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}, expected one of {PROTOCOLS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        unknown = [c for c in self.corruptions if c not in CORRUPTION_BASES]
        if unknown:
            raise ConfigError(f"unknown corruption kinds: {unknown}")
        return self

    def task(self) -> SourceTask:
        return SourceTask(
            input_dim=self.input_dim,
            n_classes=self.n_classes,
            sigma=self.sigma,
            mean_scale=self.mean_scale,
            n_train=self.n_train,
            n_test=self.n_test,
        )

    def classifier_kwargs(self) -> dict:
        return dict(
            policy=self.policy,
            optimizer=self.optimizer,
            lr=self.lr,
            tau=self.tau,
            steps_per_batch=self.steps_per_batch,
            disable_ta=self.disable_ta,
            disable_prototypes=self.disable_prototypes,
            disable_augmented_view=self.disable_augmented_view,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            n_blocks=self.n_blocks,
            train_epochs=self.train_epochs,
            train_batch_size=self.train_batch_size,
            train_lr=self.train_lr,
            seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    if not isinstance(raw, str):
        return raw
    kind = _FIELD_TYPES[name]
    text = raw.strip()
    if kind == "bool" or kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "int" or kind is int:
        return int(text)
    if kind == "float" or kind is float:
        return float(text)
    if kind == "tuple" or kind is tuple:
        return tuple(part.strip() for part in text.split(",") if part.strip())
    return text


def load_config_file(path) -> dict:
    """Parse a ``key = value`` text file (# starts a comment)."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overlaid by config-file values, overlaid by explicit overrides."""
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            merged[key] = _coerce(key, value)
    return RunConfig(**merged).validate()
