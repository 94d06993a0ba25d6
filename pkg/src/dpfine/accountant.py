"""Renyi differential privacy accounting for the subsampled Gaussian mechanism.

Per-step RDP of the Poisson-subsampled Gaussian mechanism is computed with
the binomial expansion at integer orders,

    eps(alpha) = log( sum_{k=0..alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                      * exp((k^2 - k) / (2 sigma^2)) ) / (alpha - 1),

evaluated in log space since the terms span hundreds of orders of
magnitude. Non-integer orders are bounded conservately by the larger of
the two neighboring integer evaluations. RDP composes additively over
steps, and converts to (eps, delta)-DP via

    eps = min_alpha [ eps_rdp(alpha) + log(1/delta) / (alpha - 1) ].

The accounting uses add/remove-one adjacency, as required by Poisson
subsampling amplification. All functions are pure and thread-safe.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from dpfine.errors import InfeasibleBudgetError

# Quarter-integer orders up to 16 keep the grid-vs-continuous conversion
# gap below 1e-3 around typical optimal orders; integers beyond carry the
# high-sigma regime.
DEFAULT_ORDERS = tuple(1.0 + 0.25 * k for k in range(1, 61)) + tuple(
    float(a) for a in range(17, 257)
)


@dataclass(frozen=True)
class RdpCurve:
    """RDP values eps(alpha) on a fixed grid of orders alpha > 1."""

    orders: tuple
    values: tuple

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values length mismatch")
        if not self.orders:
            raise ValueError("empty RDP curve")
        if any(a <= 1 for a in self.orders):
            raise ValueError("all orders must exceed 1")
        if list(self.orders) != sorted(self.orders):
            raise ValueError("orders must be sorted")
        if any(v < 0 for v in self.values):
            raise ValueError("RDP values must be non-negative")


@dataclass(frozen=True)
class PrivacySpec:
    """Full accounting configuration of one private training run."""

    epsilon: float
    delta: float
    sampling_rate: float
    noise_multiplier: float
    steps: int
    dataset_size: int

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not 0 <= self.sampling_rate <= 1:
            raise ValueError(f"sampling rate must be in [0, 1], got {self.sampling_rate}")
        if self.dataset_size >= 1 and self.delta >= 1.0 / self.dataset_size:
            warnings.warn(
                f"delta={self.delta} is not below 1/N={1.0 / self.dataset_size:.3g};"
                " the guarantee is weak at this dataset size",
                stacklevel=2,
            )


def rdp_gaussian(sigma, alpha):
    """RDP of the plain Gaussian mechanism: alpha / (2 sigma^2)."""
    if alpha <= 1:
        raise ValueError(f"order must exceed 1, got {alpha}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return math.inf
    return alpha / (2.0 * sigma * sigma)


def _log_binomial_sum(q, sigma, alpha):
    """log A_alpha for integer alpha >= 2 and 0 < q < 1."""
    k = np.arange(alpha + 1)
    log_terms = (
        gammaln(alpha + 1)
        - gammaln(k + 1)
        - gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(log_terms))


def _rdp_subsampled_int(q, sigma, alpha):
    return _log_binomial_sum(q, sigma, alpha) / (alpha - 1)


def rdp_subsampled_gaussian(q, sigma, alpha):
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism.

    Exact at integer orders; non-integer orders take the conservative
    maximum of the neighboring integers (the lower neighbor is clamped to
    2, the smallest valid integer order). q=1 reduces exactly to the plain
    Gaussian at any real order; q=0 touches no data and contributes 0.
    """
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    if alpha <= 1:
        raise ValueError(f"order must exceed 1, got {alpha}")
    if sigma == 0:
        return math.inf
    if q == 0:
        return 0.0
    if q == 1:
        return rdp_gaussian(sigma, alpha)
    if float(alpha).is_integer():
        return _rdp_subsampled_int(q, sigma, int(alpha))
    lo = max(2, math.floor(alpha))
    hi = max(lo, math.ceil(alpha))
    return max(_rdp_subsampled_int(q, sigma, lo), _rdp_subsampled_int(q, sigma, hi))


def _int_order_values(q, sigma, int_orders):
    """Vectorized binomial sums for a set of integer orders >= 2."""
    if not int_orders:
        return {}
    a_max = max(int_orders)
    alphas = np.array(sorted(int_orders), dtype=np.int64)
    k = np.arange(a_max + 1, dtype=np.float64)
    valid = k[None, :] <= alphas[:, None]
    a_f = alphas.astype(np.float64)[:, None]
    with np.errstate(invalid="ignore"):
        log_terms = np.where(
            valid,
            gammaln(a_f + 1)
            - gammaln(k[None, :] + 1)
            - gammaln(np.where(valid, a_f - k[None, :], 0.0) + 1)
            + k[None, :] * math.log(q)
            + (a_f - k[None, :]) * math.log1p(-q)
            + (k[None, :] ** 2 - k[None, :]) / (2.0 * sigma * sigma),
            -np.inf,
        )
    log_a = logsumexp(log_terms, axis=1)
    return dict(zip(alphas.tolist(), (log_a / (a_f[:, 0] - 1)).tolist()))


def subsampled_gaussian_curve(q, sigma, orders=DEFAULT_ORDERS):
    """RDP curve of one subsampled-Gaussian step on the order grid."""
    if sigma == 0 or q in (0.0, 1.0):
        return RdpCurve(
            tuple(orders), tuple(rdp_subsampled_gaussian(q, sigma, a) for a in orders)
        )
    needed = set()
    for a in orders:
        if float(a).is_integer():
            needed.add(int(a))
        else:
            needed.add(max(2, math.floor(a)))
            needed.add(max(2, math.ceil(a)))
    table = _int_order_values(q, sigma, needed)
    values = []
    for a in orders:
        if float(a).is_integer():
            values.append(table[int(a)])
        else:
            lo = max(2, math.floor(a))
            hi = max(lo, math.ceil(a))
            values.append(max(table[lo], table[hi]))
    return RdpCurve(tuple(orders), tuple(values))


def compose(curve, steps):
    """Composition over ``steps`` identical invocations: pointwise scaling."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def rdp_to_dp(curve, delta):
    """Convert an RDP curve to (epsilon, best_alpha) at the given delta."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    best_eps = math.inf
    best_alpha = curve.orders[0]
    for alpha, value in zip(curve.orders, curve.values):
        eps = value + log_inv_delta / (alpha - 1)
        if eps < best_eps:
            best_eps = eps
            best_alpha = alpha
    return best_eps, best_alpha


def epsilon_spent(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    """epsilon after ``steps`` subsampled-Gaussian steps; returns (eps, alpha)."""
    return rdp_to_dp(compose(subsampled_gaussian_curve(q, sigma, orders), steps), delta)


def epsilon_after(spec, steps_so_far):
    """Budget consumed after a step count; non-decreasing in steps_so_far.

    At zero steps this returns the conversion floor of the order grid
    (log(1/delta) / (alpha_max - 1)), not exactly zero.
    """
    if steps_so_far < 0 or steps_so_far > spec.steps:
        raise ValueError(f"steps_so_far must be in [0, {spec.steps}]")
    eps, _ = epsilon_spent(spec.sampling_rate, spec.noise_multiplier, steps_so_far, spec.delta)
    return eps


def trace_epsilon(spec, orders=DEFAULT_ORDERS):
    """epsilon_after for every step 1..T, computed from one base curve."""
    base = subsampled_gaussian_curve(spec.sampling_rate, spec.noise_multiplier, orders)
    values = np.asarray(base.values)
    alphas = np.asarray(base.orders)
    penalty = math.log(1.0 / spec.delta) / (alphas - 1.0)
    steps = np.arange(1, spec.steps + 1)
    return np.min(steps[:, None] * values[None, :] + penalty[None, :], axis=1)


@dataclass(frozen=True)
class Calibration:
    sigma: float
    epsilon: float
    alpha: float


def calibrate_sigma(
    epsilon_target,
    delta,
    q,
    steps,
    orders=DEFAULT_ORDERS,
    bracket=(1e-2, 1e4),
    rel_slack=1e-3,
    max_iter=200,
):
    """Bisect the noise multiplier to land epsilon in the target band.

    Returns a Calibration whose recomputed epsilon lies in
    [epsilon_target * (1 - rel_slack), epsilon_target]; the realized
    epsilon never exceeds the target.
    """
    if not epsilon_target > 0:
        raise ValueError(f"epsilon target must be positive, got {epsilon_target}")
    lo, hi = bracket
    eps_lo, alpha_lo = epsilon_spent(q, sigma=lo, steps=steps, delta=delta, orders=orders)
    eps_hi, alpha_hi = epsilon_spent(q, sigma=hi, steps=steps, delta=delta, orders=orders)
    band_lo = epsilon_target * (1.0 - rel_slack)
    if eps_hi > epsilon_target:
        raise InfeasibleBudgetError(
            f"target epsilon={epsilon_target} infeasible: even sigma={hi} spends"
            f" epsilon={eps_hi:.6g} (sigma={lo} spends {eps_lo:.6g})"
        )
    if eps_lo < band_lo:
        raise InfeasibleBudgetError(
            f"target epsilon={epsilon_target} unreachable: the tightest bracket"
            f" sigma={lo} spends only epsilon={eps_lo:.6g} < {band_lo:.6g}"
            f" (sigma={hi} spends {eps_hi:.6g}); the order-grid conversion floor"
            " may exceed the target"
        )
    if eps_lo <= epsilon_target:
        return Calibration(lo, eps_lo, alpha_lo)

    # Invariant: eps(lo) > target >= eps(hi); epsilon is continuous and
    # non-increasing in sigma, so the band is reachable.
    best = Calibration(hi, eps_hi, alpha_hi)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        eps_mid, alpha_mid = epsilon_spent(q, mid, steps, delta, orders)
        if eps_mid > epsilon_target:
            lo = mid
        else:
            hi = mid
            best = Calibration(mid, eps_mid, alpha_mid)
            if eps_mid >= band_lo:
                return best
    return best
