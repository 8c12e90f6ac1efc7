"""Exact solvers for the two convex single-cell allocation problems.

Problem 1 (fixed shared bandwidth): minimize total power subject to a
per-user rate floor. The KKT solution is per-user: P_k = C / g_k with
C = N0 * B * (2^(s0/B) - 1).

Problem 2 (joint power + shared bandwidth): minimize the shared bandwidth
subject to the same rate floors and a total power budget. The optimum
splits the budget in proportion to 1/g_k and the bandwidth solves the
transcendental equation unit_gain_power(B) = P_max / sum(1/g_k), inverted
here by bracketing bisection. unit_gain_power is strictly decreasing with
limit N0 * s0 * ln 2 as B grows, so targets at or below that limit are
infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InfeasibleError, NumericalError

LN2 = float(np.log(2.0))


def _positive_vector(name, values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a nonempty 1-D vector")
    if not (np.isfinite(arr).all() and (arr > 0).all()):
        raise DomainError(f"{name} entries must be positive and finite")
    return arr


@dataclass(frozen=True)
class SimpleAllocProblem:
    """Per-user channel gains (linear), shared bandwidth, rate floor, noise PSD."""

    gains: np.ndarray
    bandwidth_hz: float
    rate_bps: float
    noise_psd: float

    def __post_init__(self):
        object.__setattr__(self, "gains", _positive_vector("gains", self.gains))
        for name in ("bandwidth_hz", "rate_bps", "noise_psd"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")


@dataclass(frozen=True)
class JointAllocProblem:
    gains: np.ndarray
    rate_bps: float
    noise_psd: float
    p_max: float

    def __post_init__(self):
        object.__setattr__(self, "gains", _positive_vector("gains", self.gains))
        for name in ("rate_bps", "noise_psd", "p_max"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    def feasible(self):
        target = self.p_max / np.sum(1.0 / self.gains)
        return target > self.noise_psd * self.rate_bps * LN2


def rate_bps(power, gain, bandwidth_hz, noise_psd):
    """Shannon rate B * log2(1 + P g / (N0 B)); broadcasts over arrays."""
    return bandwidth_hz * np.log2(1.0 + power * gain / (noise_psd * bandwidth_hz))


def solve_min_power(problem):
    """Powers P_k = C / g_k that make every rate constraint active."""
    c = (
        problem.noise_psd
        * problem.bandwidth_hz
        * (2.0 ** (problem.rate_bps / problem.bandwidth_hz) - 1.0)
    )
    return c / problem.gains


def unit_gain_power(bandwidth_hz, rate_bps, noise_psd):
    """Power needed to hit `rate_bps` on `bandwidth_hz` at unit channel gain.

    Strictly decreasing in the bandwidth; tends to N0 * s0 * ln 2 from above.
    """
    b = np.asarray(bandwidth_hz, dtype=np.float64)
    if not (b > 0).all():
        raise DomainError("bandwidth must be positive")
    with np.errstate(over="ignore"):
        out = noise_psd * b * (2.0 ** (rate_bps / b) - 1.0)
    return float(out) if np.isscalar(bandwidth_hz) else out


def bandwidth_for_power(target_power, rate_bps, noise_psd, tol=1e-9, max_iters=200):
    """Invert unit_gain_power by bisection: the B with |value - target| <= tol.

    The bracket starts at [1e-6 * s0, s0] and the upper edge grows
    geometrically until the target is straddled.
    """
    asymptote = noise_psd * rate_bps * LN2
    if not target_power > asymptote:
        raise InfeasibleError(
            f"target power {target_power:g} W is at or below the large-bandwidth "
            f"limit {asymptote:g} W; no finite bandwidth achieves the rate",
            limit=asymptote,
        )
    lo, hi = 1e-6 * rate_bps, float(rate_bps)
    grow = 0
    while unit_gain_power(hi, rate_bps, noise_psd) > target_power:
        lo, hi = hi, hi * 2.0
        grow += 1
        if grow > 200:
            raise NumericalError("bracket growth failed to straddle the target")
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        value = unit_gain_power(mid, rate_bps, noise_psd)
        if abs(value - target_power) <= tol:
            return mid
        if value > target_power:
            lo = mid
        else:
            hi = mid
    raise NumericalError(
        f"bisection did not reach |residual| <= {tol:g} within {max_iters} iterations"
    )


def solve_joint(problem, tol=1e-9):
    """(powers, bandwidth) for the joint problem; powers sum exactly to p_max."""
    inv = 1.0 / problem.gains
    weights = inv / inv.sum()
    powers = problem.p_max * weights
    target = problem.p_max / inv.sum()
    bandwidth = bandwidth_for_power(target, problem.rate_bps, problem.noise_psd, tol=tol)
    return powers, bandwidth


def softmax_form_powers(gains, p_max):
    """Power split computed through the softmax of log inverse gains.

    Algebraically identical to the direct inverse-gain ratio; kept as the
    composition-form cross-check.
    """
    gains = _positive_vector("gains", gains)
    z = np.log(1.0 / gains)
    z = z - z.max()
    e = np.exp(z)
    return p_max * e / e.sum()
