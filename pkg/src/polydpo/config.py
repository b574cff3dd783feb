"""Run configuration: one INI-style key = value file plus flag overrides.

List values (modes, hidden sizes, grids) are written as JSON. The canonical
text has a fixed section and key order, so ``to_text(from_text(s)) == s`` for
any canonical ``s``.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, field, fields, replace

from .data import Task
from .denoiser import DenoiserSpec
from .evaluation import PAPER_ALPHA_GRID
from .schedule import SCHEDULE_KINDS
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    """Optimizer budget for the plain diffusion-loss stages."""

    learning_rate: float
    n_steps: int
    batch_size: int

    def __post_init__(self):
        if not self.learning_rate > 0 or self.n_steps < 1 or self.batch_size < 1:
            raise ConfigError("stage needs learning_rate > 0, n_steps >= 1, batch_size >= 1")


@dataclass(frozen=True)
class DataConfig:
    n_pairs: int = 2000
    target_consistency: float = 0.21
    oversimple_batch: int = 8

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")
        if not 0.0 < self.target_consistency < 1.0:
            raise ConfigError("target_consistency must lie in (0, 1)")
        if self.oversimple_batch < 2:
            raise ConfigError("oversimple_batch must be >= 2")


@dataclass(frozen=True)
class SweepConfig:
    grid: tuple = PAPER_ALPHA_GRID
    n_seeds: int = 3
    tolerance: float = 0.01
    n_eval: int = 500
    eval_seed: int = 1234

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(a) for a in self.grid))
        if not self.grid or not all(math.isfinite(a) for a in self.grid):
            raise ConfigError("grid must be a non-empty list of finite numbers")
        if self.n_seeds < 1 or self.n_eval < 1:
            raise ConfigError("n_seeds and n_eval must be >= 1")
        if not self.tolerance >= 0:
            raise ConfigError("tolerance must be >= 0")


def _default_model() -> DenoiserSpec:
    return DenoiserSpec()


def _default_trainer() -> TrainerConfig:
    # toy-scale preference stage; see the README for why beta is below the library default
    return TrainerConfig(beta=100.0, learning_rate=3e-4, n_steps=500, batch_size=64)


@dataclass(frozen=True)
class RunConfig:
    task: Task = field(default_factory=Task)
    model: DenoiserSpec = field(default_factory=_default_model)
    trainer: TrainerConfig = field(default_factory=_default_trainer)
    pretrain: StageConfig = StageConfig(2e-3, 4000, 128)
    sft: StageConfig = StageConfig(1e-3, 1500, 128)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        # the network shape follows the task
        m = self.model
        if (m.dim, m.n_conditions) != (self.task.dim, self.task.n_conditions):
            object.__setattr__(self, "model", replace(m, dim=self.task.dim, n_conditions=self.task.n_conditions))
        if self.trainer.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule must be one of {SCHEDULE_KINDS}")

    def stage_config(self, stage: str, seed: int | None = None) -> TrainerConfig:
        """TrainerConfig for the ``pretrain`` or ``sft`` stage."""
        s = getattr(self, stage)
        return self.trainer.with_(
            learning_rate=s.learning_rate, n_steps=s.n_steps, batch_size=s.batch_size, seed=self.seed if seed is None else seed
        )


# section -> (attribute on RunConfig, ordered keys); None means top-level fields
_SECTIONS = {
    "run": (None, ("seed", "output_dir")),
    "task": ("task", ("modes", "base_std", "aesthetic_mean", "aesthetic_std", "ring_radius")),
    "model": ("model", ("hidden", "time_embed_dim", "cond_embed_dim")),
    "trainer": ("trainer", tuple(f.name for f in fields(TrainerConfig))),
    "pretrain": ("pretrain", ("learning_rate", "n_steps", "batch_size")),
    "sft": ("sft", ("learning_rate", "n_steps", "batch_size")),
    "data": ("data", ("n_pairs", "target_consistency", "oversimple_batch")),
    "sweep": ("sweep", ("grid", "n_seeds", "tolerance", "n_eval", "eval_seed")),
}
_LIST_KEYS = {"modes", "aesthetic_mean", "hidden", "grid"}


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return json.dumps(_plain(value))
    if isinstance(value, bool):
        raise TypeError("no boolean settings")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _coerce(key: str, raw: str, default):
    try:
        if key in _LIST_KEYS:
            v = json.loads(raw)
            if not isinstance(v, list):
                raise ValueError("expected a JSON list")
            return v
        if isinstance(default, bool):
            raise ValueError("no boolean settings")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError("must be finite")
            return v
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def _section_obj(cfg: RunConfig, attr):
    return cfg if attr is None else getattr(cfg, attr)


def to_text(cfg: RunConfig) -> str:
    """Canonical serialisation."""
    out = []
    for section, (attr, keys) in _SECTIONS.items():
        obj = _section_obj(cfg, attr)
        out.append(f"[{section}]")
        out.extend(f"{k} = {_fmt(getattr(obj, k))}" for k in keys)
        out.append("")
    return "\n".join(out)


def from_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text; ``overrides`` maps ``"section.key"`` to raw strings and wins over the file."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    raw: dict[str, dict[str, str]] = {s: dict(parser.items(s)) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        raw.setdefault(section, {})[key] = str(value)
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")

    base = RunConfig()
    parts = {}
    top = {}
    for section, (attr, keys) in _SECTIONS.items():
        given = raw.get(section, {})
        extra = set(given) - set(keys)
        if extra:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}")
        obj = _section_obj(base, attr)
        vals = {k: _coerce(k, given[k], getattr(obj, k)) for k in keys if k in given}
        if attr is None:
            top = vals
            continue
        try:
            if attr == "task":
                d = {**obj.to_dict(), **vals}
                parts[attr] = Task.from_dict(d)
            elif attr == "model":
                parts[attr] = replace(obj, **{k: tuple(v) if k == "hidden" else v for k, v in vals.items()})
            else:
                parts[attr] = replace(obj, **vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    try:
        return RunConfig(**parts, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return from_text("", overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_text(text, overrides)
