"""Model/training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

CHAR_ENCODERS = ("none", "cnn", "lstm")
LOSS_MODES = ("last_layer", "all_layers")
LOSS_REDUCTIONS = ("batch", "sentence", "token")
POOL_SCOPES = ("mini-batch", "document")
DTYPES = ("float64", "float32")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class ModelConfig:
    """Hyper-parameters. Sizes, depth, batch and lr default to the reference setup."""

    word_dim: int = 50
    char_emb: int = 30
    cnn_window: int = 3
    cnn_filters: int = 30
    bilstm_state: int = 256
    decoder_state: int = 273
    depth: int = 2
    batch_size: int = 16
    learning_rate: float = 0.01
    optimizer: str = "adam"
    clip_norm: float = 5.0
    tag_scheme: str = "BMEOS"
    char_encoder: str = "cnn"
    loss_mode: str = "last_layer"
    loss_reduction: str = "sentence"
    pool_scope: str = "mini-batch"
    detach_pool: bool = True
    gold_pool: bool = False
    teacher_forcing: bool = False
    train_embeddings: bool = True
    max_epochs: int = 100
    patience: int = 10
    dtype: str = "float64"
    seed: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        for name in ("word_dim", "char_emb", "cnn_window", "cnn_filters", "bilstm_state",
                     "decoder_state", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.tag_scheme != "BMEOS":
            raise ValueError(f"unsupported tag_scheme {self.tag_scheme!r}")
        _choice("char_encoder", self.char_encoder, CHAR_ENCODERS)
        _choice("loss_mode", self.loss_mode, LOSS_MODES)
        _choice("loss_reduction", self.loss_reduction, LOSS_REDUCTIONS)
        _choice("pool_scope", self.pool_scope, POOL_SCOPES)
        _choice("dtype", self.dtype, DTYPES)
        _choice("optimizer", self.optimizer, OPTIMIZERS)
        if self.char_encoder == "lstm":
            raise NotImplementedError("char_encoder=lstm is reserved but not implemented")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _choice(name, value, options):
    if value not in options:
        raise ValueError(f"{name} must be one of {options}, got {value!r}")


def _coerce(field_type, raw: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    if t == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw.strip()


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(ModelConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(types[key], raw)
    return out


def read_config(path, base: ModelConfig | None = None) -> ModelConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    base = base or ModelConfig()
    return base.replace(**parse_overrides(pairs))


def write_config(cfg: ModelConfig, path) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
