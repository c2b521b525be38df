"""Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

One DP-SGD step with sampling rate ``q`` and noise multiplier ``sigma`` has,
at integer order ``alpha``, Rényi divergence

    RDP(alpha) = log( sum_{i=0}^{alpha} C(alpha, i) (1-q)^(alpha-i) q^i
                      exp((i^2 - i) / (2 sigma^2)) ) / (alpha - 1),

evaluated here in the log domain. Composition over steps is additive and the
conversion to ``(epsilon, delta)`` is the classic

    epsilon = min_alpha RDP_total(alpha) + log(1/delta) / (alpha - 1).

Reported epsilons therefore assume Poisson sampling; fixed-size shuffled
batches are accounted as if they were Poisson.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
SIGMA_BRACKET = (1e-2, 1e2)


class CalibrationError(ValueError):
    pass


def _check_orders(orders) -> np.ndarray:
    arr = np.asarray(orders, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one Rényi order")
    if (arr <= 1).any() or (arr != np.round(arr)).any():
        raise ValueError("orders must be integers greater than 1")
    return arr


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
    return float(logsumexp(terms))


def rdp_step(q: float, noise_multiplier: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """RDP of a single subsampled-Gaussian step at each order."""
    orders = _check_orders(orders)
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    if q == 0:
        return np.zeros_like(orders)
    if noise_multiplier <= 0:
        raise ValueError("noise_multiplier must be positive (zero noise has unbounded privacy loss)")
    if q == 1:
        return orders / (2 * noise_multiplier**2)
    return np.array([_log_a_int(q, noise_multiplier, int(a)) / (a - 1) for a in orders])


@dataclass(frozen=True)
class PrivacySpent:
    epsilon: float
    delta: float
    order: float

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "order": self.order}


def rdp_to_dp(rdp, orders, delta: float) -> PrivacySpent:
    orders = _check_orders(orders)
    rdp = np.asarray(rdp, dtype=np.float64)
    if rdp.shape != orders.shape:
        raise ValueError("rdp and orders must have the same length")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    eps = rdp + math.log(1 / delta) / (orders - 1)
    k = int(np.argmin(eps))
    return PrivacySpent(max(float(eps[k]), 0.0), delta, float(orders[k]))


def compute_epsilon(q: float, noise_multiplier: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> PrivacySpent:
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        rdp = np.zeros(len(orders))
    else:
        rdp = steps * rdp_step(q, noise_multiplier, orders)
    return rdp_to_dp(rdp, orders, delta)


def calibrate_sigma(
    q: float,
    steps: int,
    target_epsilon: float,
    target_delta: float,
    orders=DEFAULT_ORDERS,
    rel_tol: float = 1e-3,
) -> float:
    """Smallest-noise ``sigma`` in the bracket whose epsilon is within ``rel_tol`` below target.

    Bisection on ``log sigma``; epsilon is nonincreasing in sigma. The returned
    sigma always satisfies ``epsilon <= target_epsilon``.
    """
    if not target_epsilon > 0:
        raise ValueError("target_epsilon must be positive")
    lo, hi = SIGMA_BRACKET

    def eps(sigma: float) -> float:
        return compute_epsilon(q, sigma, steps, target_delta, orders).epsilon

    if math.isinf(target_epsilon) or eps(lo) <= target_epsilon:
        return lo
    if eps(hi) > target_epsilon:
        raise CalibrationError(
            f"epsilon={target_epsilon} unreachable with sigma <= {hi} (q={q}, steps={steps}, delta={target_delta})"
        )
    for _ in range(200):
        e_hi = eps(hi)
        if e_hi >= target_epsilon * (1 - rel_tol):
            return hi
        mid = math.sqrt(lo * hi)
        if eps(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass
class PrivacyLedger:
    """Accumulated RDP of a training run; ``rdp == steps_taken * per_step`` exactly."""

    q: float
    noise_multiplier: float
    orders: tuple[int, ...] = DEFAULT_ORDERS
    steps_taken: int = 0
    per_step: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.orders = tuple(int(a) for a in self.orders)
        self.per_step = rdp_step(self.q, self.noise_multiplier, self.orders)

    def step(self, n: int = 1) -> PrivacyLedger:
        self.steps_taken += n
        return self

    @property
    def rdp(self) -> np.ndarray:
        return self.steps_taken * self.per_step

    def spent(self, delta: float) -> PrivacySpent:
        return rdp_to_dp(self.rdp, self.orders, delta)
