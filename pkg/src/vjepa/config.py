"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import re
import types
import typing
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSpec
from .masking import CAUSAL, LONG_RANGE, RANDOM_TUBE, SHORT_RANGE, MaskConfig
from .networks import PredictorConfig, ProbeConfig, ViTConfig
from .objective import ObjectiveConfig
from .optim import ScheduleConfig

PROTOCOLS = ("frozen-linear", "frozen-attentive", "finetune")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "frozen-attentive"
    tasks: tuple[str, ...] = ("appearance", "motion")
    clips_per_video: int = 1
    # frames per evaluation clip; None -> the whole video
    clip_frames: int | None = None
    label_fraction: float = 1.0
    train_videos: int = 1024
    test_videos: int = 512
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    use_target_encoder: bool = True
    split_seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"eval protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.clips_per_video < 1:
            raise ConfigError("clips_per_video must be >= 1")
        for t in self.tasks:
            if t not in ("appearance", "motion"):
                raise ConfigError(f"unknown task {t!r}")


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 300
    batch_size: int = 16
    lr: float = 5e-4
    layer_decay: float = 0.75
    weight_decay: float = 0.05
    warmup_iters: int = 20

    def __post_init__(self):
        if not 0 < self.layer_decay <= 1:
            raise ConfigError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")


DESK_DATA = DatasetSpec()
DESK_SCHEDULE = ScheduleConfig.scaled(2000)


@dataclass(frozen=True)
class RunConfig:
    data: DatasetSpec = DESK_DATA
    encoder: ViTConfig = ViTConfig()
    predictor: PredictorConfig = PredictorConfig()
    masks: tuple[MaskConfig, ...] = (SHORT_RANGE, LONG_RANGE)
    schedule: ScheduleConfig = DESK_SCHEDULE
    objective: ObjectiveConfig = ObjectiveConfig()
    probe: ProbeConfig = ProbeConfig()
    eval: EvalConfig = EvalConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = False
    f64: bool = False
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.data.channels != self.encoder.patch.channels:
            raise ConfigError("data channels differ from encoder patch channels")
        self.encoder.patch.grid(self.data.frames, self.data.height, self.data.width)

    @property
    def iterations(self) -> int:
        return self.schedule.total_iters

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.encoder.patch.grid(self.data.frames, self.data.height, self.data.width)

    def with_iterations(self, iterations: int) -> "RunConfig":
        """Same recipe over a different number of iterations (warmup fraction kept)."""
        s = self.schedule
        warmup = int(round(iterations * s.warmup_iters / s.total_iters))
        return dataclasses.replace(self, schedule=dataclasses.replace(
            s, total_iters=iterations, warmup_iters=warmup))

    def substream(self, name: str) -> int:
        """Seed for a named randomness source derived from the top-level seed."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# mask presets


def mask_preset(name: str, tubelet: int = 2) -> tuple[MaskConfig, ...]:
    """Named masking strategies: ``multi-block``, ``short``, ``long``,
    ``random-tube[r]`` and ``causal multi-block[p]``."""
    key = name.strip().lower()
    if key in ("multi-block", "multiblock"):
        return (SHORT_RANGE, LONG_RANGE)
    if key == "short":
        return (SHORT_RANGE,)
    if key == "long":
        return (LONG_RANGE,)
    m = re.fullmatch(r"random-tube\[([0-9.]+)\]", key)
    if m:
        return (MaskConfig(kind=RANDOM_TUBE, tube_ratio=float(m.group(1)), tubelet=tubelet),)
    m = re.fullmatch(r"causal[ _-]?(?:multi-?block)?\[(\d+)\]", key)
    if m:
        p = int(m.group(1))
        return tuple(dataclasses.replace(c, kind=CAUSAL, causal_frames=p, tubelet=tubelet)
                     for c in (SHORT_RANGE, LONG_RANGE))
    raise ConfigError(f"unknown mask preset {name!r}")


# ---------------------------------------------------------------------------
# (de)serialisation


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_dict(cls, d: dict, where: str = "config"):
    """Build dataclass ``cls`` from ``d``; unknown keys are errors, missing keys take defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(RunConfig, raw)


def save_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
