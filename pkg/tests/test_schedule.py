import math

import numpy as np
import pytest

from polydpo.schedule import T_MAX, T_MIN, NoiseSchedule, ScheduleDomainError

KINDS = ["cosine", "linear-logsnr"]
T = np.linspace(0.0, 1.0, 1000)


@pytest.mark.parametrize("kind", KINDS)
def test_variance_preserving(kind):
    s = NoiseSchedule(kind)
    a, sg = s.alpha(T), s.sigma(T)
    assert np.max(np.abs(a * a + sg * sg - 1.0)) <= 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_log_snr_consistent(kind):
    s = NoiseSchedule(kind)
    a, sg = s.alpha(T), s.sigma(T)
    assert np.max(np.abs(np.log(a * a / (sg * sg)) - s.lam(T))) <= 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_monotone(kind):
    s = NoiseSchedule(kind)
    assert np.all(np.diff(s.alpha(T)) <= 0)
    assert np.all(np.diff(s.sigma(T)) >= 0)


@pytest.mark.parametrize("kind", KINDS)
def test_lambda_prime_matches_finite_difference(kind):
    s = NoiseSchedule(kind)
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    num = (s.lam(t + h) - s.lam(t - h)) / (2 * h)
    np.testing.assert_allclose(s.lam_prime(t), num, rtol=1e-7)


def test_cosine_closed_form():
    s = NoiseSchedule("cosine")
    assert s.alpha(0.5) == pytest.approx(math.cos(math.pi / 4), abs=1e-15)
    assert s.sigma(0.5) == pytest.approx(math.sin(math.pi / 4), abs=1e-15)
    assert s.lam(0.5) == pytest.approx(0.0, abs=1e-14)


def test_endpoints_are_clamped():
    s = NoiseSchedule("cosine")
    assert s.alpha(0.0) == s.alpha(T_MIN)
    assert s.sigma(1.0) == s.sigma(T_MAX)
    assert math.isfinite(s.lam(0.0)) and math.isfinite(s.lam(1.0))


@pytest.mark.parametrize("kind", KINDS)
def test_loss_weight_positive_and_bounded(kind):
    w = NoiseSchedule(kind).loss_weight(T)
    assert np.all(w > 0) and np.all(np.isfinite(w))


@pytest.mark.parametrize("t", [-0.1, 1.1, math.nan])
def test_domain(t):
    with pytest.raises(ScheduleDomainError):
        NoiseSchedule().alpha(t)


def test_unknown_kind():
    with pytest.raises(ValueError):
        NoiseSchedule("sqrt")
