"""Experiment configuration: schema, defaults, validation and YAML I/O.

A config file is a YAML mapping with an explicit ``schema_version``. Anything
not given in the file takes the default below. Loss weights left unset are
resolved from the mode: terms the mode uses default to 1.0, the others to 0.0.
Setting a forbidden term to a nonzero value is a validation error, never a
silent coercion.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

SCHEMA_VERSION = 1

MODES = ("vae", "vae_gan", "vae_contrastive", "dc_vae")
LOSS_TERMS = ("kl", "instance", "gan", "pixel", "feature")
TAPS = ("tap_low", "tap_high")
SPATIAL_TAPS = ("tap_low",)

# Which loss terms each mode is allowed to carry. Everything outside the set
# must have weight exactly 0.
MODE_TERMS = {
    "vae": frozenset({"pixel", "kl"}),
    "vae_gan": frozenset({"feature", "kl", "gan"}),
    "vae_contrastive": frozenset({"instance", "kl"}),
    "dc_vae": frozenset({"instance", "kl", "gan"}),
}
# Terms that must be strictly positive for the mode to mean anything.
MODE_REQUIRED = {
    "vae": frozenset({"pixel"}),
    "vae_gan": frozenset(),
    "vae_contrastive": frozenset(),
    "dc_vae": frozenset(),
}


class ConfigError(ValueError):
    """Validation failure; ``field`` names the offending dotted key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class DatasetConfig:
    name: str = "toy"  # toy | mnist | mnist5k | cifar10 | stl10
    root: str = "data"
    seed: int = 0  # toy generator seed, independent of the training seed
    n: int = 256  # toy train size
    test_n: int = 256  # toy test size
    channels: int = 3  # toy only
    image_size: int = 32  # images are padded/resized to this before training
    verify_checksums: bool = True


@dataclass
class ModelConfig:
    enc_width: int = 128
    dec_width: int = 256
    disc_width: int = 128
    head_channels: int = 8  # 1x1-conv reduction width of each projection head
    head_bias: bool = True
    head_norm: bool = True  # batch-standardize head outputs (and patch fibers) before L2 normalization


@dataclass
class LossWeights:
    kl: Optional[float] = None
    instance: Optional[float] = None
    gan: Optional[float] = None
    pixel: Optional[float] = None
    feature: Optional[float] = None

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k) or 0.0) for k in LOSS_TERMS}


@dataclass
class EvalConfig:
    fid_sample_count: int = 10_000
    allow_small: bool = False  # permit FID on fewer images than fid_sample_count
    ppl_epsilon: float = 1e-4
    ppl_sample_count: int = 1_000
    ppl_interp: str = "slerp"
    embedder: str = "reference"  # reference | none | path to a saved embedder
    embedder_epochs: int = 3
    grid_size: int = 64
    seed: int = 1234


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    mode: str = "dc_vae"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    latent_dim: int = 128
    embed_dim: int = 16
    queue_capacity: int = 8096
    batch_size: int = 128
    learning_rate: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    loss_weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 1.0
    contrast_taps: list[str] = field(default_factory=lambda: list(TAPS))
    patch_tap: Optional[str] = "tap_low"
    patch_loss_start_iter: Optional[int] = None  # None -> 20% of total_iters
    feature_tap: str = "tap_low"
    total_iters: int = 1000
    log_every: int = 10
    eval_every: int = 0  # 0: evaluate only at the end
    checkpoint_every: int = 0  # 0: final checkpoint only
    augment: bool = False
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def weights(self) -> dict[str, float]:
        return self.loss_weights.as_dict()

    @property
    def patch_start(self) -> int:
        if self.patch_loss_start_iter is not None:
            return self.patch_loss_start_iter
        return int(0.2 * self.total_iters)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short stable hash of the canonical form."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "loss_weights": LossWeights,
    "eval": EvalConfig,
}


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip("."), "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(prefix + str(key), "unknown key")
        sub = _SECTIONS.get(key) if cls is ExperimentConfig else None
        kwargs[key] = _build(sub, value, f"{key}.") if sub else value
    return cls(**kwargs)


def _check_type(name: str, value, kind, *, positive=False, nonneg=False):
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        ok = ok and math.isfinite(value)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(name, f"expected {kind.__name__}, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(name, f"must be positive, got {value!r}")
    if nonneg and value < 0:
        raise ConfigError(name, f"must be non-negative, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every field and resolve mode-dependent loss-weight defaults.

    Returns the same object with ``loss_weights`` fully populated.
    """
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {cfg.schema_version!r}")
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}, got {cfg.mode!r}")

    for name in ("latent_dim", "embed_dim", "queue_capacity", "batch_size", "total_iters", "log_every"):
        _check_type(name, getattr(cfg, name), int, positive=True)
    for name in ("eval_every", "checkpoint_every"):
        _check_type(name, getattr(cfg, name), int, nonneg=True)
    _check_type("seed", cfg.seed, int)
    if not -(2**63) <= cfg.seed < 2**64:
        raise ConfigError("seed", "must fit in 64 bits")
    _check_type("learning_rate", cfg.learning_rate, float, positive=True)
    _check_type("temperature", cfg.temperature, float, positive=True)
    for name in ("adam_beta1", "adam_beta2"):
        _check_type(name, getattr(cfg, name), float)
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(name, "must lie in [0, 1)")
    if cfg.queue_capacity < cfg.batch_size:
        raise ConfigError("queue_capacity", "must be >= batch_size")
    if cfg.eval_every and cfg.eval_every % cfg.log_every:
        raise ConfigError("eval_every", "must be a multiple of log_every")
    _check_type("augment", cfg.augment, bool)

    if not isinstance(cfg.contrast_taps, list) or not cfg.contrast_taps:
        raise ConfigError("contrast_taps", "must be a non-empty list")
    for tap in cfg.contrast_taps:
        if tap not in TAPS:
            raise ConfigError("contrast_taps", f"unknown tap {tap!r}")
    if len(set(cfg.contrast_taps)) != len(cfg.contrast_taps):
        raise ConfigError("contrast_taps", "duplicate tap")
    if cfg.patch_tap is not None and cfg.patch_tap not in SPATIAL_TAPS:
        raise ConfigError("patch_tap", f"must be a spatial tap {SPATIAL_TAPS} or null")
    if cfg.patch_loss_start_iter is not None:
        _check_type("patch_loss_start_iter", cfg.patch_loss_start_iter, int, nonneg=True)
    if cfg.feature_tap not in TAPS:
        raise ConfigError("feature_tap", f"unknown tap {cfg.feature_tap!r}")

    ds = cfg.dataset
    if ds.name not in ("toy", "mnist", "mnist5k", "cifar10", "stl10"):
        raise ConfigError("dataset.name", f"unknown dataset {ds.name!r}")
    for name in ("n", "test_n", "channels", "image_size"):
        _check_type(f"dataset.{name}", getattr(ds, name), int, positive=True)
    if ds.channels not in (1, 3):
        raise ConfigError("dataset.channels", "must be 1 or 3")
    if ds.image_size != 32:
        raise ConfigError("dataset.image_size", "only the 32x32 backbone is implemented")
    _check_type("dataset.root", ds.root, str)
    _check_type("dataset.seed", ds.seed, int)
    _check_type("dataset.verify_checksums", ds.verify_checksums, bool)

    for name in ("enc_width", "dec_width", "disc_width", "head_channels"):
        _check_type(f"model.{name}", getattr(cfg.model, name), int, positive=True)
    _check_type("model.head_bias", cfg.model.head_bias, bool)
    _check_type("model.head_norm", cfg.model.head_norm, bool)

    ev = cfg.eval
    for name in ("fid_sample_count", "ppl_sample_count", "grid_size", "embedder_epochs"):
        _check_type(f"eval.{name}", getattr(ev, name), int, positive=True)
    _check_type("eval.ppl_epsilon", ev.ppl_epsilon, float, positive=True)
    _check_type("eval.seed", ev.seed, int)
    if ev.ppl_interp not in ("lerp", "slerp"):
        raise ConfigError("eval.ppl_interp", "must be lerp or slerp")
    _check_type("eval.embedder", ev.embedder, str)
    _check_type("eval.allow_small", ev.allow_small, bool)

    allowed = MODE_TERMS[cfg.mode]
    lw = cfg.loss_weights
    for term in LOSS_TERMS:
        value = getattr(lw, term)
        key = f"loss_weights.{term}"
        if value is None:
            setattr(lw, term, 1.0 if term in allowed else 0.0)
            continue
        _check_type(key, value, float, nonneg=True)
        if term not in allowed and value != 0:
            raise ConfigError(key, f"must be 0 in {cfg.mode} mode")
        setattr(lw, term, float(value))
    for term in MODE_REQUIRED[cfg.mode]:
        if not getattr(lw, term) > 0:
            raise ConfigError(f"loss_weights.{term}", f"must be > 0 in {cfg.mode} mode")
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    raw.setdefault("schema_version", SCHEMA_VERSION)
    return validate(_build(ExperimentConfig, raw, ""))


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    cls = ExperimentConfig
    for i, part in enumerate(parts):
        names = {f.name for f in dataclasses.fields(cls)}
        if part not in names:
            raise ConfigError(key, "unknown key")
        if i == len(parts) - 1:
            node[part] = value
            return
        cls = _SECTIONS.get(part) if cls is ExperimentConfig else None
        if cls is None:
            raise ConfigError(key, "unknown key")
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "parent is not a mapping")


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like dotted.key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings (or (key, value) pairs) to a raw mapping."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(raw, key, value)
    return raw


def read_raw(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<file>", f"{path} does not contain a mapping")
    return raw


def load_config(path, overrides=None) -> ExperimentConfig:
    """Read, override and validate a config file. CLI overrides beat the file."""
    return from_dict(apply_overrides(read_raw(path), overrides))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
