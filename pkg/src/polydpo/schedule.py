"""Variance-preserving noise schedules over continuous time t in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

T_MIN = 1e-3
T_MAX = 1.0 - 1e-3

SCHEDULE_KINDS = ("cosine", "linear-logsnr")


class ScheduleDomainError(ValueError):
    pass


def _check_t(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ScheduleDomainError(f"t must lie in [0, 1], got {t!r}")
    return np.clip(arr, T_MIN, T_MAX)


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 and not isinstance(like, np.ndarray) else arr


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_t, sigma_t, log-SNR lambda_t, its derivative and the loss weight.

    ``cosine``: alpha = cos(pi t / 2), sigma = sin(pi t / 2).
    ``linear-logsnr``: lambda falls linearly from ``logsnr_max`` to
    ``logsnr_min``; alpha^2 = sigmoid(lambda), sigma^2 = sigmoid(-lambda).

    Time is clamped to [T_MIN, T_MAX] so that lambda stays finite.
    ``weight`` is w_t; the composite factor used by the schedule-derived weight
    mode is ``-weight(t) * lambda_prime(t)``.
    """

    kind: str = "cosine"
    logsnr_max: float = 10.0
    logsnr_min: float = -10.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.logsnr_max > self.logsnr_min:
            raise ValueError("logsnr_max must exceed logsnr_min")

    def _lam_linear(self, tc):
        return self.logsnr_max + (self.logsnr_min - self.logsnr_max) * tc

    def alpha(self, t):
        tc = _check_t(t)
        if self.kind == "cosine":
            out = np.cos(0.5 * math.pi * tc)
        else:
            lam = self._lam_linear(tc)
            out = np.sqrt(0.5 * (1.0 + np.tanh(0.5 * lam)))
        return _out(out, t)

    def sigma(self, t):
        tc = _check_t(t)
        if self.kind == "cosine":
            out = np.sin(0.5 * math.pi * tc)
        else:
            lam = self._lam_linear(tc)
            out = np.sqrt(0.5 * (1.0 - np.tanh(0.5 * lam)))
        return _out(out, t)

    def alpha_sigma(self, t):
        """Both coefficients at once (array in, arrays out)."""
        return self.alpha(t), self.sigma(t)

    def lam(self, t):
        tc = _check_t(t)
        if self.kind == "cosine":
            out = -2.0 * np.log(np.tan(0.5 * math.pi * tc))
        else:
            out = self._lam_linear(tc)
        return _out(out, t)

    def lam_prime(self, t):
        tc = _check_t(t)
        if self.kind == "cosine":
            out = -2.0 * math.pi / np.sin(math.pi * tc)
        else:
            out = np.full_like(tc, self.logsnr_min - self.logsnr_max)
        return _out(out, t)

    def weight(self, t):
        """w_t = alpha_t^2 sigma_t^2, which keeps -w_t lambda_t' bounded."""
        a, s = self.alpha(t), self.sigma(t)
        return a * a * s * s

    def loss_weight(self, t):
        """The composite -w_t * lambda_t' of the weighted noise-prediction loss."""
        return -self.weight(t) * self.lam_prime(t)
