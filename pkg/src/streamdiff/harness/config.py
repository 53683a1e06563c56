"""Experiment configuration: one INI section per stage, unknown keys rejected.

Values are parsed by the type of the field default; tuples are comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from ..diffusion import TimestepSchedule
from ..model import ModelConfig
from .data import DataConfig


@dataclass
class ModelSection:
    n_layers: int = 4
    model_dim: int = 32
    n_heads: int = 4
    chunk_frames: int = 4
    sink_frames: int = 1
    causal_first: bool = True
    mlp_ratio: int = 4

    def model_config(self, data: "DataSection", pattern: str = "hybrid") -> ModelConfig:
        cfg = ModelConfig(
            n_layers=self.n_layers, model_dim=self.model_dim, n_heads=self.n_heads, chunk_frames=self.chunk_frames,
            frame_grid=data.grid, latent_channels=data.channels, sink_frames=self.sink_frames,
            cond_dim=data.cond_dim, mlp_ratio=self.mlp_ratio, causal_first=self.causal_first,
        )
        return cfg.with_pattern(pattern)


@dataclass
class ScheduleSection:
    steps: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)
    snr_split: float = 0.5
    tau_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    teacher_steps: int = 16
    teacher_alpha: float = 1.8

    def schedule(self) -> TimestepSchedule:
        return TimestepSchedule(self.steps, self.snr_split, self.tau_grid)

    def teacher_schedule(self) -> TimestepSchedule:
        return TimestepSchedule.uniform(self.teacher_steps, snr_split=self.snr_split, tau_grid=self.tau_grid)


@dataclass
class DataSection:
    grid: tuple[int, ...] = (4, 4)
    channels: int = 4
    cond_dim: int = 8
    n_train: int = 512
    n_eval: int = 4
    frames: int = 64
    drift_scale: float = 0.15
    mouth_scale: float = 1.5

    def data_config(self) -> DataConfig:
        return DataConfig(grid=tuple(self.grid), channels=self.channels, cond_dim=self.cond_dim,
                          drift_scale=self.drift_scale, mouth_scale=self.mouth_scale)


@dataclass
class TeacherSection:
    pretrain_steps: int = 1500
    sft_steps: int = 300
    lr: float = 2e-3
    sft_lr: float = 5e-4
    p_uncond: float = 0.2
    clip_chunks: int = 2


@dataclass
class AccdmdSection:
    steps: int = 600
    alpha: float = 1.8
    fake_alpha: float = 1.8
    student_lr: float = 2e-4
    fake_lr: float = 4e-4
    routing: str = "acc"


@dataclass
class ForcingSection:
    steps: int = 300
    cache_frames: int = 12
    total_frames: int = 64
    long_threshold: int = 8
    tail_only: bool = True
    student_lr: float = 1e-4
    fake_lr: float = 2e-4


@dataclass
class RefinerSection:
    vae_steps: int = 600
    steps: int = 200
    clip_chunks: int = 2
    pool_clips: int = 16
    lambda_l1: float = 1.0
    lambda_l2: float = 1.0
    lambda_adv: float = 0.01
    decoder_lr: float = 1e-3
    disc_lr: float = 5e-4
    vae_lr: float = 2e-3
    adv_loss: str = "logistic"


@dataclass
class EvalSection:
    horizon_chunks: int = 16
    sync_chunks: int = 4


@dataclass
class RunSection:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    workers: int = 1
    variants: tuple[str, ...] = ("full", "full_causal", "no_sink")


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    accdmd: AccdmdSection = field(default_factory=AccdmdSection)
    forcing: ForcingSection = field(default_factory=ForcingSection)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        w = self.model.chunk_frames
        if self.forcing.cache_frames % w:
            raise ValueError(f"forcing.cache_frames {self.forcing.cache_frames} must be a multiple of chunk_frames {w}")
        if self.forcing.total_frames % w:
            raise ValueError(f"forcing.total_frames must be a multiple of chunk_frames {w}")
        if self.data.frames < max(self.forcing.total_frames, self.eval.horizon_chunks * w):
            raise ValueError("data.frames shorter than the rollout or evaluation horizon")
        if self.accdmd.routing not in ("acc", "global"):
            raise ValueError(f"accdmd.routing must be 'acc' or 'global', got {self.accdmd.routing!r}")
        self.schedule.schedule()
        self.model.model_config(self.data)
        return self


def _parse(raw: str, default, name: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(kind(p) for p in parts)
    return type(default)(raw.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def load_config(path: str | Path | None = None, text: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg.validate()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text is not None:
        parser.read_string(text)
    else:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser.read(path)
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for sec in parser.sections():
        if sec not in sections:
            raise ValueError(f"unknown config section [{sec}]")
        obj = getattr(cfg, sec)
        keys = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(sec):
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in section [{sec}]")
            setattr(obj, key, _parse(raw, getattr(obj, key), f"{sec}.{key}"))
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in dataclasses.fields(cfg):
        obj = getattr(cfg, f.name)
        parser[f.name] = {g.name: _fmt(getattr(obj, g.name)) for g in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def tiny_config() -> ExperimentConfig:
    """Seconds-scale preset used by smoke and reproducibility runs."""
    cfg = ExperimentConfig()
    cfg.model.n_layers = 2
    cfg.model.model_dim = 16
    cfg.model.n_heads = 2
    cfg.data.n_train = 2
    cfg.data.n_eval = 1
    cfg.data.frames = 16
    cfg.teacher.pretrain_steps = 6
    cfg.teacher.sft_steps = 3
    cfg.accdmd.steps = 4
    cfg.forcing.steps = 5
    cfg.forcing.total_frames = 16
    cfg.forcing.cache_frames = 8
    cfg.refiner.vae_steps = 4
    cfg.refiner.steps = 3
    cfg.eval.horizon_chunks = 4
    cfg.eval.sync_chunks = 2
    cfg.schedule.teacher_steps = 4
    cfg.run.seeds = (0,)
    return cfg.validate()
