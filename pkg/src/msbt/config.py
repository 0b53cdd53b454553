"""Model and training configuration, plus the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

MODALITY_ORDER = ("R", "F", "A")
MODALITY_NAMES = {"R": "rgb", "F": "flow", "A": "audio"}

# I3D (RGB, flow) and VGGish (audio) feature widths
DEFAULT_INPUT_DIMS = {"R": 1024, "F": 1024, "A": 128}


def parse_modalities(value) -> tuple[str, ...]:
    """Accept ``"r,f,a"``, ``"RFA"`` or an iterable; return canonical R,F,A order."""
    if isinstance(value, str):
        parts = [p for p in value.replace(",", " ").split() if p]
        if len(parts) == 1 and len(parts[0]) > 1 and parts[0].upper() not in MODALITY_NAMES.values():
            parts = list(parts[0])
    else:
        parts = list(value)
    aliases = {v: k for k, v in MODALITY_NAMES.items()}
    chosen = set()
    for p in parts:
        key = p.strip()
        key = aliases.get(key.lower(), key.upper())
        if key not in MODALITY_ORDER:
            raise ConfigurationError(f"unknown modality {p!r}; expected one of r, f, a")
        chosen.add(key)
    mods = tuple(m for m in MODALITY_ORDER if m in chosen)
    if len(mods) < 2:
        raise ConfigurationError(f"need at least 2 modalities, got {list(mods)}")
    return mods


def ordered_pairs(modalities) -> list[tuple[str, str]]:
    """Ordered pairs in concatenation order RF, FR, RA, AR, FA, AF (restricted)."""
    canonical = [("R", "F"), ("F", "R"), ("R", "A"), ("A", "R"), ("F", "A"), ("A", "F")]
    mods = set(modalities)
    return [p for p in canonical if p[0] in mods and p[1] in mods]


@dataclass
class ModelConfig:
    modalities: tuple[str, ...] = MODALITY_ORDER
    input_dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_INPUT_DIMS))
    d_model: int = 128
    heads: int = 4
    ffn_mult: int = 4
    layers_unimodal: int = 1
    layers_msbt: int = 5
    bottleneck_n1: int = 16
    layers_weight: int = 1
    layers_global: int = 4
    token_std: float = 0.15
    tau: float = 0.5
    topk: int = 9
    lam: float = 0.1
    cross_transformer: bool = True
    weighting: bool = True
    fixed_tokens: int | None = None

    def __post_init__(self):
        self.modalities = parse_modalities(self.modalities)
        self.input_dims = {k.upper(): int(v) for k, v in self.input_dims.items()}
        self.validate()

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return ordered_pairs(self.modalities)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def validate(self) -> None:
        for m in self.modalities:
            if m not in self.input_dims or self.input_dims[m] < 1:
                raise ConfigurationError(f"no input dimension configured for modality {m}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        for name in ("layers_unimodal", "layers_msbt", "layers_weight", "layers_global", "bottleneck_n1", "topk"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.fixed_tokens is not None and self.fixed_tokens < 1:
            raise ConfigurationError("fixed_tokens must be >= 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Gradient-check preset: T=4 inputs, D_E=8, L_M=2, N1=2, two modalities."""
        base = dict(modalities=("R", "A"), input_dims={"R": 6, "F": 6, "A": 5}, d_model=8,
                    layers_msbt=2, bottleneck_n1=2, layers_global=1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset used by the synthetic experiments."""
        base = dict(input_dims={"R": 8, "F": 8, "A": 8}, d_model=16, layers_msbt=3,
                    bottleneck_n1=4, layers_global=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.005
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_ALIASES = {"lambda": "lam", "k": "topk", "learning_rate": "lr", "d_e": "d_model"}


def _coerce(key: str, raw: str, target: dict) -> Any:
    raw = raw.strip()
    if key == "modalities":
        return parse_modalities(raw)
    if key == "input_dims":
        # e.g. "R:1024,F:1024,A:128"
        dims = {}
        for part in raw.split(","):
            name, _, value = part.partition(":")
            dims[name.strip().upper()] = int(value)
        return dims
    if key in ("cross_transformer", "weighting"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    default = target.get(key)
    try:
        if key in ("tau", "lam", "lr", "momentum", "weight_decay", "grad_clip", "token_std"):
            return float(raw)
        if isinstance(default, bool):
            return bool(int(raw))
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path: str | Path) -> tuple[dict[str, Any], dict[str, Any]]:
    """Parse a ``key = value`` file into (model_overrides, train_overrides)."""
    model_defaults = dataclasses.asdict(ModelConfig())
    train_defaults = dataclasses.asdict(TrainConfig())
    model: dict[str, Any] = {}
    train: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        key = _ALIASES.get(key, key)
        if key in _MODEL_KEYS:
            model[key] = _coerce(key, value, model_defaults)
        elif key in _TRAIN_KEYS:
            train[key] = _coerce(key, value, train_defaults)
        else:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
    return model, train


def write_config_file(path: str | Path, model: ModelConfig, train: TrainConfig | None = None) -> None:
    lines = []
    for k, v in model.to_dict().items():
        if k == "modalities":
            v = ",".join(v)
        elif k == "input_dims":
            v = ",".join(f"{m}:{d}" for m, d in v.items())
        lines.append(f"{k} = {v}")
    if train is not None:
        lines.extend(f"{k} = {v}" for k, v in dataclasses.asdict(train).items())
    Path(path).write_text("\n".join(lines) + "\n")
