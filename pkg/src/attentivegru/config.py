"""Run configuration with INI round-tripping.

``RunConfig()`` carries the full-size model and training recipe; ``desk_config()``
returns the scaled-down variant used on a single CPU. Config files use
``key = value`` lines under ``[model]``, ``[sim]``, ``[train]`` and ``[eval]``
sections; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .bev import GridSpec
from .sim import SimConfig

MODES = ("attentivegru", "baseline")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    range_bins: int = 128  # grid size is not given for the full model; 128 is our choice
    azimuth_bins: int = 128
    max_range: float = 64.0
    fov: float = math.pi / 2
    c_in: int = 64
    dim: int = 64
    n_queries: int = 32
    n_blocks: int = 3
    kernel: int = 3
    frames: int = 2
    fusion_mode: str = "default"
    block_strides: tuple = ()
    downsample: int = 2
    mode: str = "attentivegru"

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.range_bins, self.azimuth_bins, self.max_range, self.fov, self.c_in)

    @property
    def head_grid(self) -> GridSpec:
        return self.grid.downsampled(self.downsample)

    @property
    def strides(self) -> list[int]:
        return list(self.block_strides) if self.block_strides else [1] * self.n_blocks


@dataclass
class TrainConfig:
    lr: float = 1e-4
    final_lr_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    patience: int = 3
    val_fraction: float = 0.1
    box_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    focal_norm: str = "cells"
    precision: str = "f32"
    max_steps: int = 0  # 0 means no limit


@dataclass
class EvalConfig:
    k: int = 100
    score_threshold: float = 0.05


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sim_seed: int = 0

    def validate(self) -> "RunConfig":
        m, t = self.model, self.train
        if m.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {m.mode!r}")
        if m.fusion_mode not in ("default", "sparse_fast"):
            raise ConfigError(f"model.fusion_mode must be default or sparse_fast, got {m.fusion_mode!r}")
        if len(m.strides) != m.n_blocks or any(s not in (1, 2) for s in m.strides):
            raise ConfigError("model.block_strides needs one stride in {1, 2} per block")
        if m.frames < 1 or m.kernel % 2 == 0:
            raise ConfigError("model.frames must be >= 1 and model.kernel odd")
        scale = m.downsample * 4
        if m.range_bins % scale or m.azimuth_bins % scale:
            raise ConfigError(f"grid {m.range_bins}x{m.azimuth_bins} must be divisible by {scale}")
        if t.batch_size != 1:
            raise ConfigError("only batch_size = 1 is supported")
        if t.precision not in ("f32", "f64"):
            raise ConfigError("train.precision must be f32 or f64")
        if t.focal_norm not in ("cells", "positives"):
            raise ConfigError("train.focal_norm must be cells or positives")
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")
        return self


def desk_config() -> RunConfig:
    """Single-CPU scale: 32x32 grid, D=16, M=4, N=2, T=4, k=50."""
    cfg = RunConfig()
    cfg.model = dataclasses.replace(cfg.model, range_bins=32, azimuth_bins=32, c_in=16, dim=16,
                                    n_queries=4, n_blocks=2, frames=4)
    cfg.sim = dataclasses.replace(cfg.sim, n_frames=4)
    cfg.train = dataclasses.replace(cfg.train, lr=1e-3, epochs=8, focal_norm="positives")
    cfg.eval = dataclasses.replace(cfg.eval, k=50)
    return cfg


PRESETS = {"full": RunConfig, "desk": desk_config}

_SECTIONS = ("model", "sim", "train", "eval")


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(_format(v) for v in value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            if default and isinstance(default[0], tuple):
                return tuple(_parse(part, default[0], key) for part in raw.split(";"))
            kind = type(default[0]) if default else (float if "." in raw else int)
            return tuple(kind(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}") from None


def _section_obj(cfg: RunConfig, name: str):
    return getattr(cfg, name)


def to_ini(cfg: RunConfig) -> str:
    """Fully resolved config text, every field spelled out."""
    parser = configparser.ConfigParser()
    for name in _SECTIONS:
        obj = _section_obj(cfg, name)
        parser[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    parser["sim"]["seed"] = str(cfg.sim_seed)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``text`` onto ``base`` (the desk preset when omitted)."""
    cfg = dataclasses.replace(base) if base is not None else desk_config()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        obj = _section_obj(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        updates = {}
        for key, raw in parser[name].items():
            if name == "sim" and key == "seed":
                cfg.sim_seed = _parse(raw, 0, "sim.seed")
                continue
            if key not in fields:
                raise ConfigError(f"unknown key {name}.{key}")
            updates[key] = _parse(raw, getattr(obj, key), f"{name}.{key}")
        setattr(cfg, name, dataclasses.replace(obj, **updates))
    return cfg.validate()


def load_config(path: str | Path | None, preset: str = "desk") -> RunConfig:
    base = PRESETS[preset]()
    if path is None:
        return base.validate()
    return from_ini(Path(path).read_text(), base)
