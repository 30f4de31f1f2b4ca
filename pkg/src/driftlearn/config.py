"""Run configuration: parsing, validation, hashing, and stream resolution.

Config files are JSON with a fixed schema; unknown keys are rejected at
every level so typos fail loudly. Grid values (learning rates, strengths)
are config data, never code constants. A single environment variable,
DRIFTLEARN_OUT, selects the root under which relative output dirs land.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .regularizers import METHODS, FisherConfig
from .selection import STRATEGIES, normalize_strategy
from .stream import CorpusStream, GenConfig, ScheduleSpec, build_stream, load_preset, load_stream

OUTPUT_ROOT_ENV = "DRIFTLEARN_OUT"

DEFAULT_LEARNING_RATE_GRID = (1e-1, 3e-2, 1e-2)
DEFAULT_REG_STRENGTH_GRID = (0.1, 0.01)


@dataclass(frozen=True)
class StreamSource:
    """Where the corpus stream comes from: a saved directory or a generator spec."""

    dir: str | None = None
    preset: str | None = None
    schedule: tuple[int, ...] | None = None
    seed: int = 0
    gen: dict = field(default_factory=dict)

    def __post_init__(self):
        given = [k for k in ("dir", "preset", "schedule") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ConfigurationError(
                f"stream needs exactly one of dir/preset/schedule, got {given or 'none'}"
            )
        if self.dir is not None and self.gen:
            raise ConfigurationError("stream.gen overrides only apply when generating")
        gen_fields = {f.name for f in fields(GenConfig)}
        unknown = set(self.gen) - gen_fields
        if unknown:
            raise ConfigurationError(f"unknown stream.gen keys: {sorted(unknown)}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigurationError(f"stream.seed must be a non-negative integer, got {self.seed!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; (config, seed) pins every reported number."""

    stream: StreamSource
    method: str = "none"
    strategy: str = "ns"
    epochs_per_batch: int = 3
    learning_rate: float = 1e-1
    learning_rate_grid: tuple[float, ...] = DEFAULT_LEARNING_RATE_GRID
    reg_strength: float = 0.1
    reg_strength_grid: tuple[float, ...] = DEFAULT_REG_STRENGTH_GRID
    fisher: FisherConfig = field(default_factory=FisherConfig)
    damping: float = 1e-3
    bootstrap_resamples: int = 1000
    seeds: tuple[int, ...] = (0,)
    hidden_sizes: tuple[int, ...] = (32,)
    activation: str = "tanh"
    minibatch_utterances: int = 32
    warmup_epochs: int = 40
    max_batches: int | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "strategy", normalize_strategy(self.strategy))
        if self.epochs_per_batch < 1:
            raise ConfigurationError(f"epochs_per_batch must be >= 1, got {self.epochs_per_batch}")
        if not self.learning_rate_grid or any(v <= 0 for v in self.learning_rate_grid):
            raise ConfigurationError("learning_rate_grid must be nonempty positive floats")
        lo, hi = min(self.learning_rate_grid), max(self.learning_rate_grid)
        if not (lo <= self.learning_rate <= hi):
            raise ConfigurationError(
                f"learning_rate {self.learning_rate} outside grid bounds [{lo}, {hi}]"
            )
        if self.reg_strength < 0 or not np.isfinite(self.reg_strength):
            raise ConfigurationError(f"reg_strength must be finite and >= 0, got {self.reg_strength}")
        if not self.reg_strength_grid or any(v < 0 for v in self.reg_strength_grid):
            raise ConfigurationError("reg_strength_grid must be nonempty non-negative floats")
        if self.damping <= 0:
            raise ConfigurationError(f"damping must be positive, got {self.damping}")
        if self.bootstrap_resamples < 100:
            raise ConfigurationError(
                f"bootstrap_resamples must be >= 100, got {self.bootstrap_resamples}"
            )
        if not self.seeds or any(
            not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds
        ):
            raise ConfigurationError("seeds must be a nonempty list of non-negative integers")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError("hidden_sizes must be nonempty positive integers")
        if self.minibatch_utterances < 1:
            raise ConfigurationError(
                f"minibatch_utterances must be >= 1, got {self.minibatch_utterances}"
            )
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.max_batches is not None and self.max_batches < 1:
            raise ConfigurationError(f"max_batches must be >= 1 or null, got {self.max_batches}")
        if not self.output_dir:
            raise ConfigurationError("output_dir must be nonempty")


def _require_keys(data: dict, allowed: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


def _stream_from_dict(data: dict) -> StreamSource:
    if not isinstance(data, dict):
        raise ConfigurationError("stream must be an object")
    _require_keys(data, {f.name for f in fields(StreamSource)}, "stream")
    kwargs = dict(data)
    if "schedule" in kwargs and kwargs["schedule"] is not None:
        kwargs["schedule"] = tuple(kwargs["schedule"])
    gen = dict(kwargs.get("gen", {}))
    if "corrupt_batches" in gen:
        gen["corrupt_batches"] = tuple(gen["corrupt_batches"])
    kwargs["gen"] = gen
    return StreamSource(**kwargs)


def _fisher_from_dict(data: dict) -> FisherConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("fisher must be an object")
    _require_keys(data, {f.name for f in fields(FisherConfig)}, "fisher")
    return FisherConfig(**data)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be an object")
    allowed = {f.name for f in fields(RunConfig)}
    _require_keys(data, allowed, "config")
    if "stream" not in data:
        raise ConfigurationError("config requires a stream section")
    kwargs = dict(data)
    kwargs["stream"] = _stream_from_dict(kwargs["stream"])
    if "fisher" in kwargs:
        kwargs["fisher"] = _fisher_from_dict(kwargs["fisher"])
    for key in ("learning_rate_grid", "reg_strength_grid", "seeds", "hidden_sizes"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-JSON echo of the config, canonical field order."""
    return {
        "stream": {
            "dir": cfg.stream.dir,
            "preset": cfg.stream.preset,
            "schedule": list(cfg.stream.schedule) if cfg.stream.schedule else None,
            "seed": cfg.stream.seed,
            "gen": {
                k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.stream.gen.items())
            },
        },
        "method": cfg.method,
        "strategy": cfg.strategy,
        "epochs_per_batch": cfg.epochs_per_batch,
        "learning_rate": cfg.learning_rate,
        "learning_rate_grid": list(cfg.learning_rate_grid),
        "reg_strength": cfg.reg_strength,
        "reg_strength_grid": list(cfg.reg_strength_grid),
        "fisher": {
            "mode": cfg.fisher.mode,
            "n_samples": cfg.fisher.n_samples,
            "seed": cfg.fisher.seed,
        },
        "damping": cfg.damping,
        "bootstrap_resamples": cfg.bootstrap_resamples,
        "seeds": list(cfg.seeds),
        "hidden_sizes": list(cfg.hidden_sizes),
        "activation": cfg.activation,
        "minibatch_utterances": cfg.minibatch_utterances,
        "warmup_epochs": cfg.warmup_epochs,
        "max_batches": cfg.max_batches,
        "output_dir": cfg.output_dir,
    }


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def resolve_output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    if out.is_absolute():
        return out
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out


def combine_seeds(*parts: int) -> int:
    """Mix seed components into one generator-grade seed, order-sensitive."""
    return int(np.random.SeedSequence(entropy=list(parts)).generate_state(1)[0])


def resolve_stream(cfg: RunConfig, run_seed: int) -> CorpusStream:
    """Load or synthesize the corpus stream for one run.

    Generated streams mix the stream seed with the run seed so each run
    seed sees its own corpus while all method/strategy cells of one seed
    share it. Directory streams are shared verbatim.
    """
    src = cfg.stream
    if src.dir is not None:
        return load_stream(src.dir)
    if src.preset is not None:
        spec = load_preset(src.preset)
    else:
        spec = ScheduleSpec(new_speakers=tuple(src.schedule))
    gen = GenConfig(**src.gen) if src.gen else GenConfig()
    return build_stream(spec, gen, combine_seeds(src.seed, run_seed))
