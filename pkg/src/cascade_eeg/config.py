"""Run configuration: a flat ``key = value`` file with typed, validated keys.

Lines starting with ``#`` are comments.  Augmentation strengths use an
``augment.`` prefix (``augment.jitter_sigma_ratio = 0.1``).  Unknown keys are
rejected so that a misspelt hyperparameter cannot silently fall back to its
default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .augment import AugmentPolicy
from .model import VARIANTS

PRETRAIN_LR = {"deap": 1e-4, "dreamer": 8e-5, "synthetic": 1e-4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scheme: str = "synthetic"
    dimension: str = "arousal"
    data: str | None = None
    synth_subjects: int = 8
    synth_trials: int = 8
    synth_channels: int = 8
    synth_length: int = 128
    synth_seed: int = 7
    synth_segments_per_trial: int = 6
    synth_cue_amplitude: float = 0.3
    window_s: float | None = None
    stride_s: float | None = None
    skip_s: float | None = None
    lam: float = 0.1
    tau: float = 0.07
    lr_pretrain: float | None = None
    lr_classifier: float = 1e-5
    lr_supervised: float | None = None
    batch_size: int = 128
    epochs_pretrain: int = 40
    epochs_classifier: int = 100
    seed: int = 0
    variant: str = "full"
    ntxent_reduction: str = "sum"
    finetune_encoders: bool = False
    dtype: str = "float32"
    filters: int = 16
    leaky_slope: float = 0.01
    fraction: float = 1.0
    jobs: int = 1
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        self.validate()

    # -- derived values ------------------------------------------------------------

    @property
    def pretrain_lr(self) -> float:
        return self.lr_pretrain if self.lr_pretrain is not None else PRETRAIN_LR[self.scheme]

    @property
    def supervised_lr(self) -> float:
        return self.lr_supervised if self.lr_supervised is not None else self.lr_classifier

    def validate(self) -> None:
        if self.scheme not in PRETRAIN_LR:
            raise ConfigError(f"scheme must be one of {sorted(PRETRAIN_LR)}, got {self.scheme!r}")
        if self.dimension not in ("arousal", "valence"):
            raise ConfigError(f"dimension must be arousal or valence, got {self.dimension!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.scheme != "synthetic" and not self.data:
            raise ConfigError(f"scheme {self.scheme!r} needs a 'data' descriptor path")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("lr_pretrain", "lr_classifier", "lr_supervised"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for the contrastive loss")
        if self.epochs_pretrain < 0 or self.epochs_classifier < 1:
            raise ConfigError("epoch counts must be non-negative (classifier >= 1)")
        if self.ntxent_reduction not in ("sum", "mean"):
            raise ConfigError(f"ntxent_reduction must be sum or mean, got {self.ntxent_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.synth_channels % 2:
            raise ConfigError("synth_channels must be even")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        d["augment"]["time_methods"] = list(self.augment.time_methods)
        d["augment"]["freq_methods"] = list(self.augment.freq_methods)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def _coerce(raw: str, kind, key: str):
    text = raw.strip()
    optional = False
    if isinstance(kind, str):
        optional = "None" in kind
        kind = kind.replace("| None", "").strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in ("tuple[str, ...]",):
            return tuple(s.strip() for s in text.split(",") if s.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    run_types = {f.name: f.type for f in fields(RunConfig) if f.name != "augment"}
    aug_types = {f.name: f.type for f in fields(AugmentPolicy)}
    run_values: dict[str, Any] = {}
    aug_values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("augment."):
            name = key[len("augment.") :]
            if name not in aug_types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if name in aug_values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            aug_values[name] = _coerce(value, aug_types[name], key)
        elif key in run_types:
            if key in run_values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            run_values[key] = _coerce(value, run_types[key], key)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        policy = AugmentPolicy(**aug_values)
        return RunConfig(**run_values, augment=policy)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path))
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str((path.parent / cfg.data).resolve()))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "augment":
            continue
        lines.append(f"{key} = {'none' if value is None else value}")
    for key, value in cfg.augment.to_dict().items():
        if isinstance(value, tuple):
            value = ", ".join(value)
        lines.append(f"augment.{key} = {value}")
    return "\n".join(lines) + "\n"
