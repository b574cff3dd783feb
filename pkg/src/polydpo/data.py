"""Synthetic preference data: proxy rewards, regime generators, conflict analysis.

Reward dimensions (``K = 5``) for a point ``x`` under condition ``c`` with
mode ``mu_c``::

    0 alignment    -||x - mu_c||^2
    1 aesthetic    log N(x; aesthetic_mean, aesthetic_std^2 I)
    2 compactness  -||x||^2
    3 axis         x[0]
    4 ring         -(||x - mu_c|| - ring_radius)^2

Candidates for a condition are drawn from the base generator
``N(mu_c, base_std^2 I)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import atomic_write_text
from .rng import derive_rng

REWARD_NAMES = ("alignment", "aesthetic", "compactness", "axis", "ring")
N_REWARDS = len(REWARD_NAMES)
REGIMES = ("clean", "conflicting", "oversimple")
LABEL_SOURCES = ("dominance", "single-dimension", "shuffle", "majority-vote")

DATASET_FORMAT = "polydpo-preferences"
DATASET_VERSION = 1
RECORD_FIELDS = ("condition", "winner", "loser", "winner_rewards", "loser_rewards", "label_source", "source_dimension")

MAX_ATTEMPTS = 10_000
_BLOCK = 64


def ring_modes(k: int, radius: float) -> tuple[tuple[float, float], ...]:
    """``k`` mode centres evenly spaced on a circle (rounded to 12 places)."""
    return tuple(
        (round(radius * math.cos(2 * math.pi * i / k), 12) + 0.0, round(radius * math.sin(2 * math.pi * i / k), 12) + 0.0)
        for i in range(k)
    )


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Task:
    """Condition-indexed Gaussian mixture plus reward parameters."""

    modes: tuple[tuple[float, ...], ...] = ring_modes(6, 2.0)
    base_std: float = 0.5
    aesthetic_mean: tuple[float, ...] = (0.0, 1.0)
    aesthetic_std: float = 1.5
    ring_radius: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(tuple(float(v) for v in m) for m in self.modes))
        object.__setattr__(self, "aesthetic_mean", tuple(float(v) for v in self.aesthetic_mean))
        if len(self.modes) < 1:
            raise ValueError("task needs at least one mode")
        dims = {len(m) for m in self.modes}
        if len(dims) != 1 or len(self.aesthetic_mean) not in dims:
            raise ValueError("modes and aesthetic_mean must share one dimension")
        if self.base_std <= 0 or self.aesthetic_std <= 0 or self.ring_radius < 0:
            raise ValueError("base_std and aesthetic_std must be positive, ring_radius non-negative")

    @property
    def n_conditions(self) -> int:
        return len(self.modes)

    @property
    def dim(self) -> int:
        return len(self.modes[0])

    @property
    def n_rewards(self) -> int:
        return N_REWARDS

    @property
    def mode_array(self) -> np.ndarray:
        return np.asarray(self.modes, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "modes": [list(m) for m in self.modes],
            "base_std": self.base_std,
            "aesthetic_mean": list(self.aesthetic_mean),
            "aesthetic_std": self.aesthetic_std,
            "ring_radius": self.ring_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(
            modes=tuple(tuple(m) for m in d["modes"]),
            base_std=d["base_std"],
            aesthetic_mean=tuple(d["aesthetic_mean"]),
            aesthetic_std=d["aesthetic_std"],
            ring_radius=d["ring_radius"],
        )

    def rewards(self, x, c) -> np.ndarray:
        """All K rewards, shape ``(n, K)``; ``c`` broadcasts over rows."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.broadcast_to(np.asarray(c), (x.shape[0],))
        mu = self.mode_array[c]
        d2 = np.sum((x - mu) ** 2, axis=1)
        g = np.asarray(self.aesthetic_mean)
        s = self.aesthetic_std
        out = np.empty((x.shape[0], N_REWARDS))
        out[:, 0] = -d2
        out[:, 1] = -np.sum((x - g) ** 2, axis=1) / (2.0 * s * s) - self.dim * math.log(s * math.sqrt(2.0 * math.pi))
        out[:, 2] = -np.sum(x * x, axis=1)
        out[:, 3] = x[:, 0]
        out[:, 4] = -((np.sqrt(d2) - self.ring_radius) ** 2)
        return out

    def sample_base(self, rng: np.random.Generator, c, n: int | None = None) -> np.ndarray:
        """Draw base-generator points for condition(s) ``c``."""
        c = np.asarray(c)
        if c.ndim == 0:
            c = np.full(1 if n is None else n, int(c))
        mu = self.mode_array[c]
        return mu + self.base_std * rng.standard_normal(mu.shape)


def reward_eval(x, c: int, dim: int, task: Task) -> float:
    """The ``dim``-th proxy reward of one point."""
    if not (0 <= int(dim) < N_REWARDS):
        raise ValueError(f"reward dimension must lie in [0, {N_REWARDS}), got {dim}")
    if not (0 <= int(c) < task.n_conditions):
        raise ValueError(f"condition id {c} out of range")
    return float(task.rewards(np.asarray(x, dtype=np.float64)[None, :], int(c))[0, dim])


@dataclass(frozen=True)
class PreferencePair:
    condition: int
    winner: np.ndarray
    loser: np.ndarray
    winner_rewards: np.ndarray
    loser_rewards: np.ndarray
    label_source: str
    source_dimension: int | None = None


@dataclass
class PreferenceDataset:
    """Column-stored preference pairs for one regime.

    ``source_dimension`` holds -1 where a pair has no source dimension.
    """

    condition: np.ndarray
    winner: np.ndarray
    loser: np.ndarray
    winner_rewards: np.ndarray
    loser_rewards: np.ndarray
    label_source: np.ndarray
    source_dimension: np.ndarray
    regime: str
    generator_seed: int
    task: Task
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.condition)
        if n == 0:
            raise ValueError("a preference dataset must not be empty")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        for name in ("winner", "loser"):
            if getattr(self, name).shape != (n, self.task.dim):
                raise ValueError(f"{name} must have shape ({n}, {self.task.dim})")
        for name in ("winner_rewards", "loser_rewards"):
            if getattr(self, name).shape != (n, N_REWARDS):
                raise ValueError(f"{name} must have shape ({n}, {N_REWARDS})")

    def __len__(self) -> int:
        return len(self.condition)

    def __getitem__(self, i: int) -> PreferencePair:
        sd = int(self.source_dimension[i])
        return PreferencePair(
            condition=int(self.condition[i]),
            winner=self.winner[i].copy(),
            loser=self.loser[i].copy(),
            winner_rewards=self.winner_rewards[i].copy(),
            loser_rewards=self.loser_rewards[i].copy(),
            label_source=str(self.label_source[i]),
            source_dimension=None if sd < 0 else sd,
        )

    def __iter__(self) -> Iterator[PreferencePair]:
        for i in range(len(self)):
            yield self[i]

    @property
    def pairs(self) -> list[PreferencePair]:
        return list(self)

    @classmethod
    def from_pairs(cls, pairs: Sequence[PreferencePair], regime: str, generator_seed: int, task: Task, meta=None):
        return cls(
            condition=np.array([p.condition for p in pairs], dtype=np.int64),
            winner=np.array([p.winner for p in pairs], dtype=np.float64).reshape(len(pairs), task.dim),
            loser=np.array([p.loser for p in pairs], dtype=np.float64).reshape(len(pairs), task.dim),
            winner_rewards=np.array([p.winner_rewards for p in pairs], dtype=np.float64).reshape(len(pairs), N_REWARDS),
            loser_rewards=np.array([p.loser_rewards for p in pairs], dtype=np.float64).reshape(len(pairs), N_REWARDS),
            label_source=np.array([p.label_source for p in pairs], dtype=object),
            source_dimension=np.array([-1 if p.source_dimension is None else p.source_dimension for p in pairs], dtype=np.int64),
            regime=regime,
            generator_seed=generator_seed,
            task=task,
            meta=dict(meta or {}),
        )

    def swapped(self) -> "PreferenceDataset":
        """Same pairs with winner and loser exchanged (used by tests)."""
        return PreferenceDataset(
            self.condition.copy(), self.loser.copy(), self.winner.copy(), self.loser_rewards.copy(),
            self.winner_rewards.copy(), self.label_source.copy(), self.source_dimension.copy(),
            self.regime, self.generator_seed, self.task, dict(self.meta),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        return (
            self.regime == other.regime
            and self.generator_seed == other.generator_seed
            and self.task == other.task
            and self.meta == other.meta
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("condition", "winner", "loser", "winner_rewards", "loser_rewards", "label_source", "source_dimension")
            )
        )


# -- generators --------------------------------------------------------------


def _dominates(rw: np.ndarray, rl: np.ndarray) -> np.ndarray:
    # strict in every dimension: ties count as non-unanimous
    return np.all(rw > rl, axis=-1)


def _dominance_pair(rng, task: Task, c: int, where: str):
    for block_start in range(0, MAX_ATTEMPTS, _BLOCK):
        a = task.sample_base(rng, c, _BLOCK)
        b = task.sample_base(rng, c, _BLOCK)
        ra, rb = task.rewards(a, c), task.rewards(b, c)
        fwd, bwd = _dominates(ra, rb), _dominates(rb, ra)
        hit = np.flatnonzero(fwd | bwd)
        if hit.size:
            j = hit[0]
            if fwd[j]:
                return a[j], b[j], ra[j], rb[j]
            return b[j], a[j], rb[j], ra[j]
    raise GenerationError(
        f"{where}: no Pareto-dominant pair for condition {c} after {MAX_ATTEMPTS} attempts "
        f"(base_std={task.base_std}, modes={task.modes})"
    )


def _single_dim_pair(rng, task: Task, c: int, k: int):
    while True:
        a = task.sample_base(rng, c)[0]
        b = task.sample_base(rng, c)[0]
        ra, rb = task.rewards(a, c)[0], task.rewards(b, c)[0]
        if ra[k] > rb[k]:
            return a, b, ra, rb
        if rb[k] > ra[k]:
            return b, a, rb, ra


def gen_clean(n: int, seed: int, task: Task) -> PreferenceDataset:
    """Pairs whose winner beats the loser on every reward dimension."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = []
    for i in range(n):
        rng = derive_rng(seed, "gen_clean", i)
        c = int(rng.integers(task.n_conditions))
        w, l, rw, rl = _dominance_pair(rng, task, c, f"gen_clean pair {i}")
        pairs.append(PreferencePair(c, w, l, rw, rl, "dominance"))
    return PreferenceDataset.from_pairs(pairs, "clean", seed, task)


def comparable_rate(task: Task, n_pairs: int, seed: int) -> float:
    """Fraction of random same-condition candidate pairs that are Pareto-comparable."""
    rng = derive_rng(seed, "calibration")
    c = rng.integers(task.n_conditions, size=n_pairs)
    a = task.sample_base(rng, c)
    b = task.sample_base(rng, c)
    ra, rb = task.rewards(a, c), task.rewards(b, c)
    return float(np.mean(_dominates(ra, rb) | _dominates(rb, ra)))


def conflict_mixing(task: Task, target_consistency: float, seed: int, n_calibration: int = 20_000) -> float:
    """Share of dominance pairs needed so the overall unanimity rate hits the target.

    A single-dimension pair is unanimous exactly when its two candidates are
    comparable, so rate = m + (1 - m) * u0 with u0 from a calibration run.
    """
    u0 = comparable_rate(task, n_calibration, seed)
    if target_consistency < u0 - 3.0 * math.sqrt(u0 * (1 - u0) / n_calibration):
        raise GenerationError(
            f"target consistency {target_consistency:.4f} is below the task's floor "
            f"{u0:.4f} (rate with no dominance mixing)"
        )
    return max(0.0, (target_consistency - u0) / (1.0 - u0))


def gen_conflicting(n: int, seed: int, task: Task, target_consistency: float, mixing: float | None = None) -> PreferenceDataset:
    """Mostly single-dimension labels, mixed with dominance pairs to hit a target unanimity.

    ``mixing`` overrides the calibrated share of dominance pairs (0 gives pure
    single-dimension labelling).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0.0 < target_consistency < 1.0):
        raise ValueError("target_consistency must lie in (0, 1)")
    if mixing is None:
        mixing = conflict_mixing(task, target_consistency, seed)
    elif not (0.0 <= mixing <= 1.0):
        raise ValueError("mixing must lie in [0, 1]")
    pairs = []
    for i in range(n):
        rng = derive_rng(seed, "gen_conflicting", i)
        c = int(rng.integers(task.n_conditions))
        if rng.random() < mixing:
            w, l, rw, rl = _dominance_pair(rng, task, c, f"gen_conflicting pair {i}")
            pairs.append(PreferencePair(c, w, l, rw, rl, "dominance"))
        else:
            k = int(rng.integers(N_REWARDS))
            w, l, rw, rl = _single_dim_pair(rng, task, c, k)
            pairs.append(PreferencePair(c, w, l, rw, rl, "single-dimension", k))
    meta = {"target_consistency": float(target_consistency), "mixing": float(mixing)}
    return PreferenceDataset.from_pairs(pairs, "conflicting", seed, task, meta)


def random_derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def oversimple_batches(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Consecutive ``[start, stop)`` batches; a trailing singleton joins the previous batch."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def gen_oversimple(winners, batch_size: int, seed: int, task: Task) -> PreferenceDataset:
    """Keep every winner; its loser is another winner of the same batch.

    ``winners`` is a sequence of ``(condition, point)``. Rewards of both sides
    are scored under the pair's own condition.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    winners = list(winners)
    if len(winners) < batch_size:
        raise ValueError("need at least batch_size winners")
    conds = np.array([int(c) for c, _ in winners], dtype=np.int64)
    pts = np.array([np.asarray(x, dtype=np.float64) for _, x in winners])
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("winner points must be distinct")
    rng = derive_rng(seed, "gen_oversimple")
    order = rng.permutation(len(winners))
    conds, pts = conds[order], pts[order]
    loser_idx = np.empty(len(winners), dtype=np.int64)
    for start, stop in oversimple_batches(len(winners), batch_size):
        loser_idx[start:stop] = start + random_derangement(rng, stop - start)
    losers = pts[loser_idx]
    n = len(winners)
    return PreferenceDataset(
        condition=conds,
        winner=pts,
        loser=losers,
        winner_rewards=task.rewards(pts, conds),
        loser_rewards=task.rewards(losers, conds),
        label_source=np.array(["shuffle"] * n, dtype=object),
        source_dimension=np.full(n, -1, dtype=np.int64),
        regime="oversimple",
        generator_seed=seed,
        task=task,
        meta={"batch_size": int(batch_size)},
    )


# -- analysis ----------------------------------------------------------------


@dataclass(frozen=True)
class ConflictReport:
    n_pairs: int
    unanimous_count: int
    consistency_rate: float
    agreement: np.ndarray

    def to_table(self) -> str:
        lines = [
            f"n_pairs\t{self.n_pairs}",
            f"unanimous_count\t{self.unanimous_count}",
            f"consistency_rate\t{self.consistency_rate:.6f}",
            "agreement\t" + "\t".join(REWARD_NAMES),
        ]
        for name, row in zip(REWARD_NAMES, self.agreement):
            lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


def consistency_analysis(ds: PreferenceDataset) -> ConflictReport:
    """Unanimity rate and pairwise agreement of per-dimension reward deltas."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    delta = ds.task.rewards(ds.winner, ds.condition) - ds.task.rewards(ds.loser, ds.condition)
    unanimous = int(np.sum(np.all(delta > 0, axis=1)))
    sign = np.sign(delta)
    agreement = np.mean(sign[:, :, None] == sign[:, None, :], axis=0)
    n = len(ds)
    return ConflictReport(n, unanimous, unanimous / n, agreement)


def majority_vote(judge_choices: Sequence[int]) -> int:
    """Winner index picked by more than half of an odd panel of judges."""
    choices = list(judge_choices)
    if len(choices) < 3 or len(choices) % 2 == 0:
        raise ValueError(f"majority vote needs an odd number (>= 3) of judges, got {len(choices)}")
    if any(c not in (0, 1) for c in choices):
        raise ValueError("judge choices must be 0 or 1")
    ones = sum(choices)
    return 1 if 2 * ones > len(choices) else 0


# -- file format --------------------------------------------------------------


def _header(ds: PreferenceDataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "regime": ds.regime,
        "seed": int(ds.generator_seed),
        "n_pairs": len(ds),
        "task": ds.task.to_dict(),
        "meta": ds.meta,
        "fields": list(RECORD_FIELDS),
    }


def dataset_to_text(ds: PreferenceDataset) -> str:
    """Header line then one JSON record per pair; field order is RECORD_FIELDS."""
    dumps = lambda obj: json.dumps(obj, separators=(",", ":"))  # noqa: E731
    lines = [dumps(_header(ds))]
    for i in range(len(ds)):
        sd = int(ds.source_dimension[i])
        rec = {
            "condition": int(ds.condition[i]),
            "winner": ds.winner[i].tolist(),
            "loser": ds.loser[i].tolist(),
            "winner_rewards": ds.winner_rewards[i].tolist(),
            "loser_rewards": ds.loser_rewards[i].tolist(),
            "label_source": str(ds.label_source[i]),
            "source_dimension": None if sd < 0 else sd,
        }
        lines.append(dumps(rec))
    return "\n".join(lines) + "\n"


def save_dataset(path, ds: PreferenceDataset) -> None:
    atomic_write_text(path, dataset_to_text(ds))


def parse_dataset(text: str) -> PreferenceDataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"bad header: {exc.msg}", 1) from exc
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError("not a polydpo preference file", 1)
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}", 1)
    if header.get("fields") != list(RECORD_FIELDS):
        raise DatasetFormatError("unexpected record field list", 1)
    try:
        task = Task.from_dict(header["task"])
        regime = header["regime"]
        seed = int(header["seed"])
        n_pairs = int(header["n_pairs"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad header: {exc}", 1) from exc
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if list(rec) != list(RECORD_FIELDS):
                raise ValueError(f"fields must be {list(RECORD_FIELDS)} in order")
            if rec["label_source"] not in LABEL_SOURCES:
                raise ValueError(f"unknown label_source {rec['label_source']!r}")
            pair = PreferencePair(
                condition=int(rec["condition"]),
                winner=np.asarray(rec["winner"], dtype=np.float64),
                loser=np.asarray(rec["loser"], dtype=np.float64),
                winner_rewards=np.asarray(rec["winner_rewards"], dtype=np.float64),
                loser_rewards=np.asarray(rec["loser_rewards"], dtype=np.float64),
                label_source=rec["label_source"],
                source_dimension=rec["source_dimension"],
            )
            if pair.winner.shape != (task.dim,) or pair.loser.shape != (task.dim,):
                raise ValueError("coordinate length does not match the task dimension")
            if pair.winner_rewards.shape != (N_REWARDS,) or pair.loser_rewards.shape != (N_REWARDS,):
                raise ValueError(f"reward vectors must have {N_REWARDS} entries")
            if not 0 <= pair.condition < task.n_conditions:
                raise ValueError(f"condition {pair.condition} out of range")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(str(exc), lineno) from exc
        pairs.append(pair)
    if len(pairs) != n_pairs:
        raise DatasetFormatError(f"header declares {n_pairs} pairs, found {len(pairs)}", len(lines))
    try:
        return PreferenceDataset.from_pairs(pairs, regime, seed, task, header.get("meta", {}))
    except ValueError as exc:
        raise DatasetFormatError(str(exc), 1) from exc


def load_dataset(path) -> PreferenceDataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))
