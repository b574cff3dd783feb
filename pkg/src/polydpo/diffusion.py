"""Forward corruption, weighted noise-prediction loss and ancestral sampling."""

from __future__ import annotations

import numpy as np

from .denoiser import Denoiser
from .schedule import T_MAX, T_MIN, NoiseSchedule, ScheduleDomainError

WEIGHT_MODES = ("constant", "schedule")


def forward_corrupt(x, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``alpha_t * x + sigma_t * eps`` (row-wise when ``t`` is an array)."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ScheduleDomainError(f"t must lie in [0, 1], got {t!r}")
    a = np.asarray(schedule.alpha(t_arr))
    s = np.asarray(schedule.sigma(t_arr))
    if x.ndim == 2 and a.ndim == 1:
        a = a[:, None]
        s = s[:, None]
    return a * x + s * eps


def loss_weights(schedule: NoiseSchedule, t: np.ndarray, mode: str = "constant", constant: float = 1.0) -> np.ndarray:
    """Per-sample weight standing in for ``-w_t * lambda_t'``.

    ``constant`` folds the schedule factor into a fixed scalar; ``schedule``
    uses the schedule's own bounded weighting.
    """
    if mode == "constant":
        return np.full(np.shape(t), float(constant))
    if mode == "schedule":
        return float(constant) * np.asarray(schedule.loss_weight(t))
    raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def draw_noise(rng: np.random.Generator, n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """One ``t ~ U(0, 1)`` and one ``eps ~ N(0, I)`` per row, in that order."""
    t = rng.random(n)
    eps = rng.standard_normal((n, dim))
    return t, eps


def dm_loss(
    model: Denoiser,
    x,
    c,
    rng,
    schedule: NoiseSchedule,
    weight_mode: str = "constant",
    weight: float = 1.0,
    with_grad: bool = True,
):
    """Mean weighted noise-prediction error over a batch.

    Returns ``(loss, grads)`` where ``grads`` follows ``model.params`` order
    (``None`` when ``with_grad`` is false). ``rng`` may be a seed or a
    ``numpy.random.Generator``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("dm_loss needs a non-empty (n, dim) batch")
    rng = np.random.default_rng(rng)
    n = x.shape[0]
    t, eps = draw_noise(rng, n, x.shape[1])
    x_t = forward_corrupt(x, t, eps, schedule)
    w = loss_weights(schedule, t, weight_mode, weight)
    if not with_grad:
        pred = model.predict(x_t, c, t)
        err = pred - eps
        return float(np.mean(w * np.sum(err * err, axis=1))), None
    pred, cache = model.forward(x_t, c, t)
    err = pred - eps
    loss = float(np.mean(w * np.sum(err * err, axis=1)))
    grad_out = (2.0 / n) * w[:, None] * err
    return loss, model.backward(cache, grad_out)


def sample(
    model: Denoiser,
    c,
    n_steps: int,
    rng,
    schedule: NoiseSchedule,
    n_samples: int | None = None,
) -> np.ndarray:
    """Ancestral sampling from pure noise; returns ``(n, dim)`` points.

    ``c`` is a single condition id (then ``n_samples`` rows, default 1) or an
    array with one id per row. Steps run on a uniform grid from T_MAX down to
    T_MIN; the last step returns the denoised estimate without fresh noise.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(rng)
    c = np.asarray(c)
    if c.ndim == 0:
        c = np.full(1 if n_samples is None else int(n_samples), int(c))
    n = c.shape[0]
    dim = model.spec.dim
    x = rng.standard_normal((n, dim))
    ts = np.linspace(T_MAX, T_MIN, n_steps + 1)
    for i in range(n_steps):
        t, s = ts[i], ts[i + 1]
        a_t, s_t = schedule.alpha(t), schedule.sigma(t)
        eps_hat = model.predict(x, c, t)
        x0 = (x - s_t * eps_hat) / a_t
        if i == n_steps - 1:
            x = x0
            break
        a_s, s_s = schedule.alpha(s), schedule.sigma(s)
        a_ts = a_t / a_s
        var_ts = s_t * s_t - a_ts * a_ts * s_s * s_s
        mean = (a_ts * s_s * s_s / (s_t * s_t)) * x + (a_s * var_ts / (s_t * s_t)) * x0
        std = np.sqrt(var_ts * s_s * s_s / (s_t * s_t))
        x = mean + std * rng.standard_normal((n, dim))
    return x
