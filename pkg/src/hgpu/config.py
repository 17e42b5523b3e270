"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig
from .synthdata import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str = "data"
    output_dir: str = "runs/default"
    image_size: int = 64
    n_frames: int = 8
    n_train: int = 200
    n_val: int = 20
    min_objects: int = 1
    max_objects: int = 2
    background: str = "random"
    base: int = 16
    message_iterations: int = 1
    rank_divisor: int = 8
    literal_readout: bool = False
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    rotation_degrees: float = 10.0
    flip_probability: float = 0.5
    pairs_per_sequence: int = 1
    val_pairs_per_sequence: int = 1
    zero_flow: bool = False
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(base=self.base, message_iterations=self.message_iterations,
                           rank_divisor=self.rank_divisor, literal_readout=self.literal_readout, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_encoder=self.lr_encoder, lr_decoder=self.lr_decoder, weight_decay=self.weight_decay,
                           momentum=self.momentum, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                           rotation_range_degrees=(-self.rotation_degrees, self.rotation_degrees),
                           flip_probability=self.flip_probability, pairs_per_sequence=self.pairs_per_sequence,
                           val_pairs_per_sequence=self.val_pairs_per_sequence, zero_flow=self.zero_flow)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(height=self.image_size, width=self.image_size, n_frames=self.n_frames,
                           min_objects=self.min_objects, max_objects=self.max_objects, background=self.background)

    def dump(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def validate(self) -> None:
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        for name in ("base", "message_iterations", "rank_divisor", "batch_size", "n_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        try:
            self.model_config()
            self.train_config()
            self.scene_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, raw: str, kind):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    cfg = replace(base or RunConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(), cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg
