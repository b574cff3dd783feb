"""Preference losses on a scalar logit: DPO, Poly-DPO, Poly-N and their gradients.

All functions accept Python floats or numpy arrays and are pure. The logit is
the already beta-scaled implicit reward margin between winner and loser.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "preference_probability",
    "dpo_loss",
    "dpo_gradient",
    "poly_dpo_loss",
    "poly_dpo_gradient",
    "poly_n_loss",
    "taylor_ce",
]


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a loss function."""


def _check_finite(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return arr


def _unwrap(arr: np.ndarray, like):
    if np.ndim(like) == 0 and not isinstance(like, np.ndarray):
        return float(arr)
    return arr


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp is only evaluated on non-positive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _one_minus_sigmoid(z: np.ndarray) -> np.ndarray:
    return _sigmoid(-z)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def preference_probability(logit):
    """Stable sigmoid of the preference logit."""
    z = _check_finite("logit", logit)
    return _unwrap(_sigmoid(z), logit)


def dpo_loss(logit):
    """-log sigmoid(logit), evaluated as softplus(-logit)."""
    z = _check_finite("logit", logit)
    return _unwrap(_softplus(-z), logit)


def dpo_gradient(logit):
    """d dpo_loss / d logit = -(1 - p)."""
    z = _check_finite("logit", logit)
    return _unwrap(-_one_minus_sigmoid(z), logit)


def poly_dpo_loss(logit, alpha):
    """-log p + alpha * (1 - p) with p = sigmoid(logit).

    With ``alpha == 0`` the polynomial term is an exact ``+0.0``, so the result
    is bit-identical to :func:`dpo_loss`.
    """
    z = _check_finite("logit", logit)
    a = _check_finite("alpha", alpha)
    out = _softplus(-z) + a * _one_minus_sigmoid(z)
    return _unwrap(out, logit if np.ndim(alpha) == 0 else alpha)


def poly_dpo_gradient(logit, alpha):
    """Analytic derivative of :func:`poly_dpo_loss` w.r.t. the logit.

    Returns ``-(1 - p) * (1 + alpha * p)``. The factor ``(1 + alpha * p)`` is
    exactly 1.0 at ``alpha == 0`` so the DPO gradient is reproduced bitwise.
    """
    z = _check_finite("logit", logit)
    a = _check_finite("alpha", alpha)
    p = _sigmoid(z)
    out = -_one_minus_sigmoid(z) * (1.0 + a * p)
    return _unwrap(out, logit if np.ndim(alpha) == 0 else alpha)


def poly_n_loss(logit, coeffs: Sequence[float]):
    """-log p + sum_j coeffs[j-1] * (1 - p)**j."""
    coeffs = list(coeffs)
    if len(coeffs) == 0:
        raise ValueError("poly_n_loss needs at least one coefficient")
    z = _check_finite("logit", logit)
    c = _check_finite("coeffs", coeffs)
    q = _one_minus_sigmoid(z)
    out = _softplus(-z)
    if len(c) == 1:
        # same expression as poly_dpo_loss so N = 1 agrees bitwise
        out = out + c[0] * q
    else:
        term = np.ones_like(q)
        for a in c:
            term = term * q
            out = out + a * term
    return _unwrap(out, logit)


def taylor_ce(p: float, n_terms: int) -> float:
    """Partial sum of the series -log p = sum_j (1 - p)**j / j.

    Used as an independent oracle for the cross-entropy; it works in
    probability space rather than logit space on purpose.
    """
    if not (isinstance(n_terms, (int, np.integer)) and n_terms >= 1):
        raise ValueError(f"n_terms must be a positive integer, got {n_terms!r}")
    if not (math.isfinite(p) and 0.0 < p <= 1.0):
        raise DomainError(f"p must lie in (0, 1], got {p!r}")
    q = 1.0 - p
    total = 0.0
    power = 1.0
    for j in range(1, n_terms + 1):
        power *= q
        total += power / j
    return total
