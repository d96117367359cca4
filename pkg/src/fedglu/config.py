"""Experiment configuration: nested dataclasses parsed from JSON with closed schemas.

Unknown keys and wrongly-typed values are rejected with the dotted path of the
offending field, e.g. ``train.batch_sise: unknown key``.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .cgm_data import SyntheticCohortSpec, WindowConfig
from .federated import DEFAULT_ALPHA_GRID
from .nn_core import ARCHITECTURE, TrainConfig

REGIMES = ("local", "central", "federated", "fedglu")
REGIME_NAMES = ("local_mse", "local_hh", "central_mse", "central_hh", "fed_global", "fedglu")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    csv: Optional[str] = None
    synthetic: Optional[SyntheticCohortSpec] = None
    max_gap: int = 6


@dataclass(frozen=True)
class FoldConfig:
    k: int = 5
    run: tuple = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 0.001
    batch_size: int = 500
    max_epochs: int = 50
    patience: int = 10

    def with_seed(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.patience, seed)


@dataclass(frozen=True)
class FedSettings:
    rounds: int = 50
    local_epochs: int = 1
    client_lr: float = 0.001
    server_lr: float = 1.0
    max_workers: int = 1


@dataclass(frozen=True)
class LossConfig:
    """Loss for the HH regimes: a fixed ``alpha`` or a grid to select from."""

    loss: str = "hh"
    alpha: Optional[float] = None
    alpha_grid: tuple = DEFAULT_ALPHA_GRID


@dataclass(frozen=True)
class OutputConfig:
    save_round_snapshots: bool = True
    save_models: bool = True
    cega_svg: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig(synthetic=SyntheticCohortSpec())
    window: WindowConfig = WindowConfig()
    folds: FoldConfig = FoldConfig()
    train: TrainSettings = TrainSettings()
    finetune: TrainSettings = TrainSettings()
    federated: FedSettings = FedSettings()
    loss: LossConfig = LossConfig()
    layer_dims: tuple = ARCHITECTURE
    hh_init: str = "mse"
    regimes: tuple = REGIMES
    output_dir: str = "runs/default"
    seed: int = 0
    outputs: OutputConfig = OutputConfig()

    def to_dict(self) -> dict:
        return _to_jsonable(self)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _parse(tp, value: Any, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _parse(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        for key in value:
            if key not in names:
                raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
        kwargs = {k: _parse(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(path or "<root>", str(exc)) from None
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def _validate(cfg: RunConfig) -> None:
    data = cfg.data
    if (data.csv is None) == (data.synthetic is None):
        raise ConfigError("data", "give exactly one of 'csv' or 'synthetic'")
    if not cfg.regimes:
        raise ConfigError("regimes", "at least one regime is required")
    for r in cfg.regimes:
        if r not in REGIMES:
            raise ConfigError("regimes", f"unknown regime {r!r}; choose from {', '.join(REGIMES)}")
    if "fedglu" in cfg.regimes and "federated" not in cfg.regimes:
        raise ConfigError("regimes", "'fedglu' fine-tunes the federated global model; add 'federated'")
    if cfg.folds.k < 1:
        raise ConfigError("folds.k", "must be >= 1")
    for i in cfg.folds.run:
        if isinstance(i, bool) or not isinstance(i, int) or not 1 <= i <= cfg.folds.k:
            raise ConfigError("folds.run", f"fold {i!r} outside 1..{cfg.folds.k}")
    if not cfg.folds.run:
        raise ConfigError("folds.run", "at least one fold is required")
    loss = cfg.loss
    if loss.loss not in ("mse", "hh"):
        raise ConfigError("loss.loss", "must be 'mse' or 'hh'")
    if loss.loss == "mse" and "fedglu" in cfg.regimes:
        raise ConfigError("loss.loss", "'fedglu' requires the HH loss")
    if loss.alpha is not None and not 0.0 <= loss.alpha <= 1.0:
        raise ConfigError("loss.alpha", "must lie in [0, 1]")
    if not loss.alpha_grid:
        raise ConfigError("loss.alpha_grid", "must not be empty")
    for a in loss.alpha_grid:
        if isinstance(a, bool) or not isinstance(a, (int, float)) or not 0.0 <= a <= 1.0:
            raise ConfigError("loss.alpha_grid", f"value {a!r} outside [0, 1]")
    if cfg.hh_init not in ("mse", "scratch"):
        raise ConfigError("hh_init", "must be 'mse' or 'scratch'")
    dims = cfg.layer_dims
    if len(dims) < 2 or any(isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in dims):
        raise ConfigError("layer_dims", "must be a list of >= 2 positive integers")
    if dims[0] != cfg.window.window_length or dims[-1] != 1:
        raise ConfigError("layer_dims", "first entry must equal window.window_length and last must be 1")
    for section in ("train", "finetune"):
        s = getattr(cfg, section)
        if s.learning_rate <= 0 or s.batch_size < 1 or s.max_epochs < 1 or s.patience < 0:
            raise ConfigError(section, "learning_rate, batch_size, max_epochs must be positive")
    f = cfg.federated
    if f.rounds < 1 or f.local_epochs < 0 or f.client_lr <= 0 or f.server_lr <= 0 or f.max_workers < 1:
        raise ConfigError("federated", "rounds, client_lr, server_lr, max_workers must be positive")


def parse_config(data: dict) -> RunConfig:
    cfg = _parse(RunConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(data)
