"""Experiment configuration: schema, file parsing, validation.

The native encoding is TOML (flat tables and arrays only); JSON is accepted
as an alternative encoding of the same schema. Every key is checked against
the schema before any work happens and unknown keys are rejected with their
full field path, so a typo fails loudly instead of silently training with a
default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

from .losses import ABLATION_OVERRIDES, BASELINE_LOSSES, BETA_VARIANTS

try:  # python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml


class ConfigError(ValueError):
    """Schema violation in an experiment config; message carries the field path."""


DATASET_KINDS = ("blobs", "csv")
ACTIVATIONS = ("relu", "tanh")

# every name cmd_train accepts for loss.name; "socrates" is the public
# spelling of the "soc" ablation id
LOSS_NAMES = ("socrates", "sat") + BASELINE_LOSSES + tuple(ABLATION_OVERRIDES)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 4
    dim: int = 2
    n_per_class: int = 500
    separation: float = 3.0
    label_noise: float = 0.15
    seed: int = 0
    path: str | None = None
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"


@dataclass(frozen=True)
class LossSpec:
    name: str = "socrates"
    gamma: float = 2.0
    alpha: float = 0.99
    start_epoch: int = 0
    beta_variant: str = "exclude_gt"
    beta_fixed_value: float = 0.25
    # None: c+1 outputs for the socrates/sat family, c for baselines.
    # Explicit True forces the extra head onto a baseline (used when a
    # baseline run must be bit-comparable with a reduced socrates run).
    unknown_class: bool | None = None


@dataclass(frozen=True)
class OptimizerSpec:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    halve_every: int = 25


@dataclass(frozen=True)
class SweepSpec:
    gamma: tuple[float, ...] = ()
    alpha: tuple[float, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    loss: LossSpec = LossSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    epochs: int = 300
    batch_size: int = 128
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    n_bins: int = 15
    output_dir: str | None = None
    sweep: SweepSpec = SweepSpec()


_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "loss": LossSpec,
    "optimizer": OptimizerSpec,
    "sweep": SweepSpec,
}


def _coerce(value, hint, path: str):
    """Convert a parsed TOML/JSON value to the annotated field type."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    # X | None arrives as types.UnionType, Optional[X] as typing.Union
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array")
        elem = args[0]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(
            _coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args))
        )
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if hint is int:
        # bool is an int subclass; "true" is never a valid count
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _build(spec_cls, table, path: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: expected a table")
    hints = typing.get_type_hints(spec_cls)
    known = {f.name for f in dataclasses.fields(spec_cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
        kwargs[key] = _coerce(value, hints[key], f"{path}.{key}")
    return spec_cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed TOML/JSON mapping.

    Unknown keys anywhere raise ConfigError naming the offending path; the
    result is validated before being returned.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a table")
    hints = typing.get_type_hints(ExperimentConfig)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in top:
            raise ConfigError(f"unknown key {key}")
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = _coerce(value, hints[key], key)
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Load a config file; .json parses as JSON, anything else as TOML."""
    text_path = str(path)
    try:
        if text_path.endswith(".json"):
            with open(text_path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        else:
            with open(text_path, "rb") as fh:
                raw = _toml.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {text_path}")
    except (json.JSONDecodeError, _toml.TOMLDecodeError) as exc:
        raise ConfigError(f"config file does not parse: {exc}")
    return config_from_dict(raw)


def _require(ok: bool, path: str, message: str):
    if not ok:
        raise ConfigError(f"{path}: {message}")


def validate_config(cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    _require(ds.kind in DATASET_KINDS, "dataset.kind", f"must be one of {DATASET_KINDS}")
    if ds.kind == "blobs":
        _require(ds.classes >= 2, "dataset.classes", "must be >= 2")
        _require(ds.dim >= 2, "dataset.dim", "must be >= 2")
        _require(ds.n_per_class >= 1, "dataset.n_per_class", "must be >= 1")
        _require(ds.separation > 0, "dataset.separation", "must be > 0")
        _require(0.0 <= ds.label_noise < 1.0, "dataset.label_noise", "must lie in [0, 1)")
    else:
        _require(ds.path is not None, "dataset.path", "required for kind 'csv'")
    _require(all(f >= 0 for f in ds.split), "dataset.split", "fractions must be >= 0")
    _require(
        abs(sum(ds.split) - 1.0) <= 1e-9,
        "dataset.split",
        f"fractions must sum to 1, got {sum(ds.split)}",
    )
    _require(ds.split[0] > 0, "dataset.split", "train fraction must be > 0")

    model = cfg.model
    _require(len(model.hidden) >= 1, "model.hidden", "need at least one hidden layer")
    _require(all(h >= 1 for h in model.hidden), "model.hidden", "layer widths must be >= 1")
    _require(
        model.activation in ACTIVATIONS,
        "model.activation",
        f"must be one of {ACTIVATIONS}",
    )

    loss = cfg.loss
    _require(loss.name in LOSS_NAMES, "loss.name", f"must be one of {LOSS_NAMES}")
    _require(loss.gamma >= 0.0, "loss.gamma", "must be >= 0")
    _require(0.0 <= loss.alpha <= 1.0, "loss.alpha", "must lie in [0, 1]")
    _require(loss.start_epoch >= 0, "loss.start_epoch", "must be >= 0")
    _require(
        loss.beta_variant in BETA_VARIANTS,
        "loss.beta_variant",
        f"must be one of {BETA_VARIANTS}",
    )
    _require(
        0.0 <= loss.beta_fixed_value <= 1.0, "loss.beta_fixed_value", "must lie in [0, 1]"
    )
    if loss.unknown_class is False:
        _require(
            loss.name in BASELINE_LOSSES,
            "loss.unknown_class",
            "the socrates/sat family requires the unknown-class head",
        )

    opt = cfg.optimizer
    _require(opt.base_lr > 0.0, "optimizer.base_lr", "must be > 0")
    _require(0.0 <= opt.momentum < 1.0, "optimizer.momentum", "must lie in [0, 1)")
    _require(opt.weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0")
    _require(opt.halve_every >= 1, "optimizer.halve_every", "must be >= 1")

    _require(cfg.epochs >= 1, "epochs", "must be >= 1")
    _require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _require(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    _require(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "seeds must be distinct")
    _require(cfg.n_bins >= 1, "n_bins", "must be >= 1")

    for i, g in enumerate(cfg.sweep.gamma):
        _require(g >= 0.0, f"sweep.gamma[{i}]", "must be >= 0")
    for i, a in enumerate(cfg.sweep.alpha):
        _require(0.0 <= a <= 1.0, f"sweep.alpha[{i}]", "must lie in [0, 1]")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-JSON form of a config (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def cell_key(cfg: ExperimentConfig, loss: LossSpec, seed: int) -> str:
    """Content address for one (loss, seed) training cell.

    Everything that influences the cell's outputs participates in the hash;
    presentation-only fields (output_dir, the seed list, sweep grids) do not,
    so re-running a sweep with one extra seed reuses the finished cells.
    """
    payload = {
        "dataset": dataclasses.asdict(cfg.dataset),
        "model": dataclasses.asdict(cfg.model),
        "loss": dataclasses.asdict(loss),
        "optimizer": dataclasses.asdict(cfg.optimizer),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "n_bins": cfg.n_bins,
        "seed": seed,
    }
    digest = hashlib.sha256(canonical_json(json.loads(json.dumps(payload))).encode())
    return digest.hexdigest()[:16]
