"""Policy evaluation on the proxy rewards, alpha sweeps and gradient curves."""

from __future__ import annotations

import functools
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write_text
from .data import N_REWARDS, REWARD_NAMES, PreferenceDataset, Task
from .denoiser import Denoiser
from .diffusion import sample
from .rng import derive_rng
from .schedule import NoiseSchedule

PAPER_ALPHA_GRID = (-1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0)
SAMPLER_STEPS = 50
WORKERS_ENV = "POLYDPO_WORKERS"


@functools.lru_cache(maxsize=32)
def reward_stats(task: Task, n: int = 200_000) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of rewards under the base generator."""
    rng = derive_rng(0, "reward_stats")
    c = rng.integers(task.n_conditions, size=n)
    r = task.rewards(task.sample_base(rng, c), c)
    return r.mean(axis=0), r.std(axis=0)


@dataclass(frozen=True)
class EvalReport:
    mean_rewards: np.ndarray
    composite: float
    n_samples: int
    seed: int

    def as_row(self) -> dict:
        row = {name: float(v) for name, v in zip(REWARD_NAMES, self.mean_rewards)}
        row["composite"] = float(self.composite)
        return row


def score_samples(x: np.ndarray, c: np.ndarray, task: Task) -> EvalReport:
    r = task.rewards(x, c)
    mu, sd = reward_stats(task)
    means = r.mean(axis=0)
    composite = float(np.mean((means - mu) / sd))
    return EvalReport(means, composite, int(x.shape[0]), -1)


def evaluate_policy(model, conditions, n_per_condition: int, seed: int, task: Task, schedule: NoiseSchedule, n_steps: int = SAMPLER_STEPS) -> EvalReport:
    """Sample ``n_per_condition`` points per condition and score all K rewards.

    The composite is the mean over dimensions of the standardised mean reward
    (standardised with :func:`reward_stats`).
    """
    if n_per_condition < 1:
        raise ValueError("n_per_condition must be >= 1")
    c = np.repeat(np.asarray(conditions, dtype=np.int64), n_per_condition)
    x = sample(model, c, n_steps, derive_rng(seed, "evaluate"), schedule)
    rep = score_samples(x, c, task)
    return EvalReport(rep.mean_rewards, rep.composite, rep.n_samples, seed)


@dataclass(frozen=True)
class SweepCell:
    alpha: float
    seed: int
    report: EvalReport | None
    error: str = ""


@dataclass(frozen=True)
class SweepResult:
    alphas: tuple
    reports: dict  # alpha -> seed-averaged EvalReport (missing if every seed failed)
    best_alpha: float
    flatness_band: tuple
    tolerance: float
    cells: tuple = field(default=())

    @property
    def failures(self) -> list[SweepCell]:
        return [c for c in self.cells if c.report is None]

    def composite(self, alpha: float) -> float:
        return self.reports[alpha].composite

    def to_table(self) -> str:
        """Per-cell rows followed by one ``mean`` row per alpha."""
        buf = io.StringIO()
        buf.write(",".join(("alpha", "seed") + REWARD_NAMES + ("composite", "error")) + "\n")
        for c in self.cells:
            vals = [repr(float(v)) for v in c.report.mean_rewards] + [repr(c.report.composite)] if c.report else ["nan"] * (N_REWARDS + 1)
            buf.write(",".join([repr(float(c.alpha)), str(c.seed)] + vals + [_csv_field(c.error)]) + "\n")
        for a in self.alphas:
            if a in self.reports:
                r = self.reports[a]
                vals = [repr(float(v)) for v in r.mean_rewards] + [repr(r.composite)]
                buf.write(",".join([repr(float(a)), "mean"] + vals + [""]) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_table())


def _csv_field(s: str) -> str:
    s = s.replace("\n", " ")
    return '"' + s.replace('"', '""') + '"' if ("," in s or '"' in s) else s


def flatness_band(scores: dict, tolerance: float) -> tuple[float, tuple]:
    """Best key and every key whose score is within ``tolerance`` (relative) of it."""
    best = max(scores, key=lambda a: (scores[a], -abs(a)))
    top = scores[best]
    floor = top - tolerance * abs(top)
    return best, tuple(a for a in sorted(scores) if scores[a] >= floor)


def _run_cell(job) -> SweepCell:
    from .trainer import train_run

    ds, cfg, init, task, schedule, n_eval, eval_seed, n_sampler = job
    try:
        policy, _ = train_run(ds, cfg, init, schedule)
        rep = evaluate_policy(policy, range(task.n_conditions), n_eval, eval_seed, task, schedule, n_sampler)
        if not math.isfinite(rep.composite):
            raise FloatingPointError("non-finite composite")
    except Exception as exc:  # any abort is recorded; the sweep carries on
        return SweepCell(cfg.alpha, cfg.seed, None, f"{type(exc).__name__}: {exc}")
    return SweepCell(cfg.alpha, cfg.seed, rep)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def alpha_sweep(
    ds: PreferenceDataset,
    base_cfg,
    grid=PAPER_ALPHA_GRID,
    n_seeds: int = 3,
    init: Denoiser | None = None,
    task: Task | None = None,
    n_eval: int = 500,
    eval_seed: int = 1234,
    tolerance: float = 0.01,
    schedule: NoiseSchedule | None = None,
    workers: int | None = None,
    n_sampler_steps: int = SAMPLER_STEPS,
) -> SweepResult:
    """Train every (alpha, seed) cell from ``init`` and evaluate it.

    Training seeds are ``base_cfg.seed + k`` for ``k < n_seeds`` and the
    evaluation seed is shared, so every alpha sees the same noise.
    """
    grid = tuple(float(a) for a in grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if len(set(grid)) != len(grid):
        raise ValueError("grid has duplicate values")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if init is None:
        raise ValueError("alpha_sweep needs an initial model")
    task = task if task is not None else ds.task
    schedule = schedule or base_cfg.noise_schedule()
    jobs = [
        (ds, base_cfg.with_(alpha=a, seed=base_cfg.seed + k), init, task, schedule, n_eval, eval_seed, n_sampler_steps)
        for a in grid
        for k in range(n_seeds)
    ]
    workers = min(workers or default_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    reports = {}
    for a in grid:
        ok = [c.report for c in cells if c.alpha == a and c.report is not None]
        if ok:
            means = np.mean([r.mean_rewards for r in ok], axis=0)
            reports[a] = EvalReport(means, float(np.mean([r.composite for r in ok])), sum(r.n_samples for r in ok), eval_seed)
    if not reports:
        raise RuntimeError("every sweep cell failed: " + "; ".join(c.error for c in cells))
    best, band = flatness_band({a: r.composite for a, r in reports.items()}, tolerance)
    return SweepResult(grid, reports, best, band, tolerance, tuple(cells))


def gradient_curve(alphas, n_points: int) -> list[tuple[float, float, float]]:
    """Rows ``(p, alpha, |dL/dz|)`` on the open grid ``p = k/(n_points+1)``."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    p = np.arange(1, n_points + 1) / (n_points + 1)
    rows = []
    for a in alphas:
        a = float(a)
        if not math.isfinite(a):
            raise ValueError("alpha must be finite")
        mag = np.abs((1.0 - p) * (1.0 + a * p))
        rows.extend((float(pi), a, float(m)) for pi, m in zip(p, mag))
    return rows


def curve_to_csv(rows) -> str:
    return "p,alpha,magnitude\n" + "".join(f"{p!r},{a!r},{m!r}\n" for p, a, m in rows)


def save_curve(path, rows) -> None:
    atomic_write_text(path, curve_to_csv(rows))
