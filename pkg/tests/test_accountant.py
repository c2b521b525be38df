import math

import numpy as np
import pytest

from dppeft.accountant import (
    DEFAULT_ORDERS,
    CalibrationError,
    PrivacyLedger,
    calibrate_sigma,
    compute_epsilon,
    rdp_step,
    rdp_to_dp,
)

from oracles import gaussian_epsilon, rdp_quadrature

DELTA = 3.52e-6


def test_full_batch_closed_form():
    assert rdp_step(1.0, 1.0, [2])[0] == pytest.approx(1.0)
    np.testing.assert_allclose(rdp_step(1.0, 2.0, [2, 8]), [2 / 8, 8 / 8])


def test_zero_rate_is_free():
    assert not rdp_step(0.0, 1.0).any()


def test_zero_noise_rejected():
    with pytest.raises(ValueError):
        rdp_step(0.1, 0.0)


@pytest.mark.parametrize("alpha", [2, 3, 8, 32, 64, 128, 256])
def test_matches_quadrature_at_q_001(alpha):
    lib = rdp_step(0.01, 1.0, [alpha])[0]
    assert abs(lib / rdp_quadrature(0.01, 1.0, alpha) - 1) < 0.01


def test_conversion_examples():
    s = rdp_to_dp([1.0], [2], 1e-6)
    assert s.epsilon == pytest.approx(1 + math.log(1e6)) and s.order == 2
    z = rdp_to_dp(np.zeros(len(DEFAULT_ORDERS)), DEFAULT_ORDERS, 1e-5)
    assert z.order == 256 and z.epsilon == pytest.approx(math.log(1e5) / 255)
    with pytest.raises(ValueError):
        rdp_to_dp([], [], 1e-5)
    with pytest.raises(ValueError):
        rdp_to_dp([1.0], [2], 1.5)


def test_steps_zero():
    assert compute_epsilon(0.1, 1.0, 0, 1e-5).epsilon == pytest.approx(math.log(1e5) / 255)


def test_monotonicity_grids():
    qs = [0.001, 0.01, 0.05, 0.2]
    sigmas = [0.6, 0.8, 1.0, 1.5, 2.0, 4.0]
    steps = [1, 10, 100, 1000]
    for s in sigmas:
        e = [compute_epsilon(q, s, 100, DELTA).epsilon for q in qs]
        assert all(a < b for a, b in zip(e, e[1:]))
        e = [compute_epsilon(0.01, s, t, DELTA).epsilon for t in steps]
        assert all(a < b for a, b in zip(e, e[1:]))
    e = [compute_epsilon(0.01, s, 100, DELTA).epsilon for s in sigmas]
    assert all(a > b for a, b in zip(e, e[1:]))
    e = [compute_epsilon(0.01, 1.0, 100, d).epsilon for d in (1e-9, 1e-7, 1e-5, 1e-3)]
    assert all(a >= b for a, b in zip(e, e[1:]))


def test_single_full_batch_step_is_sound():
    # the conversion may be loose but must never report less than the exact epsilon
    for s in (0.5, 1.0, 2.0, 4.0):
        assert compute_epsilon(1.0, s, 1, DELTA).epsilon >= gaussian_epsilon(s, DELTA)


@pytest.mark.parametrize("q,steps", [(0.001, 1000), (0.01, 100), (0.03125, 2000), (0.1, 50)])
def test_calibration_round_trip(q, steps):
    sigma = calibrate_sigma(q, steps, 10.0, DELTA)
    eps = compute_epsilon(q, sigma, steps, DELTA).epsilon
    assert eps <= 10.0 and abs(eps - 10.0) <= 1e-3 * 10.0


def test_bigger_batch_needs_more_noise():
    assert calibrate_sigma(0.02, 500, 10.0, DELTA) > calibrate_sigma(0.01, 500, 10.0, DELTA)


def test_calibration_edges():
    assert calibrate_sigma(0.01, 100, math.inf, DELTA) == 1e-2
    with pytest.raises(CalibrationError):
        calibrate_sigma(1.0, 10**6, 1e-3, DELTA)
    with pytest.raises(ValueError):
        calibrate_sigma(0.01, 10, 0.0, DELTA)


def test_ledger_additivity():
    ledger = PrivacyLedger(0.01, 1.1)
    one = rdp_step(0.01, 1.1)
    for _ in range(37):
        ledger.step()
    assert ledger.steps_taken == 37
    assert np.array_equal(ledger.rdp, 37 * one)
    assert ledger.spent(DELTA).epsilon == compute_epsilon(0.01, 1.1, 37, DELTA).epsilon
