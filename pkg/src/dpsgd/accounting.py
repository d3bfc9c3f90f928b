"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Per-step Renyi divergences at a grid of integer orders are composed
linearly over steps and converted to an (epsilon, delta) guarantee. The
sampling ratio q = |B| / N treats the shuffled fixed-size batches of the
training loop as if they were independent subsamples; that approximation
is standard for this style of accountant and is documented in the README
rather than corrected here.

sigma is the noise multiplier relative to the clipping norm: the noise
standard deviation on the batch-summed gradient is sigma * C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AccountingError, ConfigurationError

# Integer orders 2..64 plus a sparse tail; covers the regimes where the
# conversion minimum lands for desk-scale runs.
DEFAULT_ORDERS = tuple(range(2, 65)) + (128, 256, 512)


@dataclass
class RdpCurve:
    """Accumulated Renyi divergence per order; grows only by composition."""

    orders: tuple
    values: np.ndarray

    @classmethod
    def zeros(cls, orders=DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), np.zeros(len(orders)))


def _log_binomial(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Renyi divergence of order alpha for one subsampled Gaussian step.

    For q < 1 this evaluates, in log space,

        (1 / (alpha - 1)) * log( sum_{k=0..alpha} binom(alpha, k)
            * (1 - q)^(alpha - k) * q^k * exp(k (k - 1) / (2 sigma^2)) )

    and for q = 1 it returns the plain Gaussian value alpha / (2 sigma^2).
    """
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"sampling ratio must satisfy 0 < q <= 1, got {q}")
    if not sigma > 0.0:
        raise ConfigurationError(f"noise multiplier must be positive for accounting, got {sigma}")
    alpha = int(alpha)
    if alpha < 2:
        raise ConfigurationError(f"order must be an integer >= 2, got {alpha}")
    pair_exponent = 1.0 / (2.0 * sigma * sigma) if sigma * sigma > 0.0 else math.inf
    if not math.isfinite(pair_exponent) or not math.isfinite(pair_exponent * alpha * alpha):
        raise AccountingError(
            f"subsampled Gaussian divergence overflowed at q={q}, sigma={sigma}, alpha={alpha}"
        )
    if q == 1.0:
        return alpha * pair_exponent
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    log_terms = np.array([
        _log_binomial(alpha, k)
        + (alpha - k) * log_1mq
        + k * log_q
        + k * (k - 1) * pair_exponent
        for k in range(alpha + 1)
    ])
    peak = log_terms.max()
    log_sum = peak + math.log(np.exp(log_terms - peak).sum())
    value = log_sum / (alpha - 1)
    if not math.isfinite(value):
        raise AccountingError(
            f"subsampled Gaussian divergence overflowed at q={q}, sigma={sigma}, alpha={alpha}"
        )
    return value


def per_step_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders]))


def compose(curve: RdpCurve, per_step: RdpCurve, steps: int) -> RdpCurve:
    """Linear composition: steps repetitions of per_step added onto curve."""
    if curve.orders != per_step.orders:
        raise ConfigurationError(
            f"order grids differ: {curve.orders[:3]}... vs {per_step.orders[:3]}..."
        )
    if steps < 0:
        raise ConfigurationError(f"steps must be >= 0, got {steps}")
    return RdpCurve(curve.orders, curve.values + steps * per_step.values)


def to_epsilon(curve: RdpCurve, delta: float):
    """Best (epsilon, order) over the grid for the given delta.

    epsilon = min over orders of rdp(order) + log(1 / delta) / (order - 1),
    clamped at zero.
    """
    if not curve.orders:
        raise ConfigurationError("order grid is empty")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    orders = np.asarray(curve.orders, dtype=float)
    candidates = curve.values + log_inv_delta / (orders - 1.0)
    best = int(np.argmin(candidates))
    return max(float(candidates[best]), 0.0), curve.orders[best]


@dataclass(frozen=True)
class PrivacySpec:
    """Everything the accountant needs to price a training run."""

    dataset_size: int
    effective_batch: int
    noise_multiplier: float
    steps: int
    target_delta: float
    orders: tuple = DEFAULT_ORDERS

    def __post_init__(self):
        if self.effective_batch < 1 or self.effective_batch > self.dataset_size:
            raise ConfigurationError(
                f"effective batch {self.effective_batch} must lie in [1, {self.dataset_size}]"
            )
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 < self.target_delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.target_delta}")

    @property
    def sampling_ratio(self) -> float:
        return self.effective_batch / self.dataset_size


@dataclass(frozen=True)
class EpsilonReport:
    epsilon: float
    best_order: int | None
    sampling_ratio: float
    steps: int


def epsilon_for_training(
    dataset_size: int,
    effective_batch: int,
    sigma: float,
    epochs: int,
    delta: float,
    orders=DEFAULT_ORDERS,
) -> EpsilonReport:
    """Epsilon after a fixed-epoch run with shuffled fixed-size batches.

    Zero steps cost nothing; sigma = 0 provides no guarantee at all and
    reports epsilon = inf.
    """
    steps = epochs * (dataset_size // effective_batch)
    spec = PrivacySpec(dataset_size, effective_batch, sigma, steps, delta, tuple(orders))
    if steps == 0:
        return EpsilonReport(0.0, None, spec.sampling_ratio, 0)
    if sigma == 0.0:
        return EpsilonReport(float("inf"), None, spec.sampling_ratio, steps)
    step_curve = per_step_curve(spec.sampling_ratio, sigma, spec.orders)
    total = compose(RdpCurve.zeros(spec.orders), step_curve, steps)
    epsilon, best_order = to_epsilon(total, delta)
    return EpsilonReport(epsilon, best_order, spec.sampling_ratio, steps)
