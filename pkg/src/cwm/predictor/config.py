"""Predictor / training configuration and the key=value config-file format."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..spriteworld import WorldConfig


@dataclass(frozen=True)
class PredictorConfig:
    image_size: int = 64
    patch_size: int = 8
    n_context_frames: int = 1
    encoder_dim: int = 192
    encoder_depth: int = 6
    encoder_heads: int = 4
    decoder_dim: int = 96
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.90
    # output head adds the co-located patch of the last context frame
    residual: bool = False
    # encoder block whose output feeds cosine flow / probe features (-1 = last)
    embed_layer: int = -1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.n_context_frames < 1:
            raise ValueError("need at least one context frame")
        for dim, heads in ((self.encoder_dim, self.encoder_heads), (self.decoder_dim, self.decoder_heads)):
            if dim % heads:
                raise ValueError(f"width {dim} not divisible by {heads} heads")
            if dim % 2:
                raise ValueError("embedding widths must be even for sine-cosine tables")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def n_frames(self) -> int:
        return self.n_context_frames + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    # linear scaling rule: lr = base_lr * batch_size / 256
    base_lr: float = 2.4e-2
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_fraction: float = 40 / 3200
    log_every: int = 250
    holdout_samples: int = 128
    holdout_start: int = 10_000_000
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if default and isinstance(default[0], str):
            return tuple(parts)
        return tuple(int(p) for p in parts)
    return raw


def _section(parser, name: str, cls):
    defaults = cls()
    values = {}
    if parser.has_section(name):
        known = {f.name for f in fields(cls)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ValueError(f"unknown key [{name}] {key}")
            values[key] = _coerce(raw, getattr(defaults, key))
    return values


SECTIONS = {"predictor": PredictorConfig, "train": TrainConfig, "world": WorldConfig}


def read_config(path=None, overrides: dict[str, dict] | None = None) -> dict:
    """Parse an INI-style file into ``{"predictor": ..., "train": ..., "world": ...}``.

    ``overrides`` maps section -> {key: value} and wins over file values.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        parser.read_string(p.read_text())
        unknown = set(parser.sections()) - set(SECTIONS) - {"run"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        vals = _section(parser, name, cls)
        vals.update((overrides or {}).get(name, {}))
        out[name] = cls(**vals)
    return out


def write_config(path, predictor: PredictorConfig, train: TrainConfig, world: WorldConfig) -> None:
    parser = configparser.ConfigParser()
    for name, cfg in (("predictor", predictor), ("train", train), ("world", world)):
        parser[name] = {}
        for k, v in asdict(cfg).items():
            parser[name][k] = ", ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
    with open(path, "w") as fh:
        parser.write(fh)
