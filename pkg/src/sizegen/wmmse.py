"""Sum-rate power control on a K-pair interference channel.

The solver is the classical scalar weighted-MMSE iteration: receiver gain,
MSE weight, then transmit amplitude clipped to [0, sqrt(P_max)], cycled to
a fixed point. Each full cycle cannot decrease the sum rate, which is
asserted. Solutions are near-binary in power for Rayleigh channels, and the
module also provides the empirical statistics built on that fact: the
binary-solution fraction and the probability of full power conditioned on
the direct gain.

Channel draws ("rayleigh_amplitude") use the magnitude of a unit complex
Gaussian as the SINR gain; "rayleigh_power" uses its squared magnitude
(unit-mean exponential).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .seeding import seed_seq

GAIN_MODELS = ("rayleigh_amplitude", "rayleigh_power")

# near-binary classification threshold under p_max = 1
BINARY_THRESHOLD = 1e-3


@dataclass(frozen=True)
class InterferenceInstance:
    """gains[k][j]: gain from transmitter j to receiver k."""

    gains: np.ndarray
    p_max: float
    noise: float

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        object.__setattr__(self, "gains", g)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] == 0:
            raise DomainError("gains must be a nonempty square matrix")
        if not np.isfinite(g).all() or (g < 0).any():
            raise DomainError("gains must be finite and nonnegative")
        if not (np.diag(g) > 0).all():
            raise DomainError("direct gains must be positive")
        if not (self.p_max > 0 and self.noise > 0):
            raise DomainError("p_max and noise must be positive")

    @property
    def k(self):
        return self.gains.shape[0]


@dataclass(frozen=True)
class CurvePoint:
    k: int
    g_center: float
    half_width: float
    prob: float | None  # None when the bin is empty
    count: int


@dataclass(frozen=True)
class WmmseResult:
    powers: np.ndarray
    iterations: int
    converged: bool
    sum_rate: float


def sum_rate(instance, powers):
    """Natural-log sum rate of the given power vector."""
    p = np.asarray(powers, dtype=np.float64)
    if p.shape != (instance.k,):
        raise DomainError("power vector length must match the instance")
    if (p < -1e-12).any() or (p > instance.p_max * (1 + 1e-12)).any():
        raise DomainError("powers must lie in [0, p_max]")
    return float(_sum_rate_batch(instance.gains[None], p[None], instance.noise)[0])


def _sum_rate_batch(gains, powers, noise):
    signal = np.einsum("...kk->...k", gains) * powers
    total = np.einsum("...kj,...j->...k", gains, powers) + noise
    return np.log1p(signal / (total - signal)).sum(axis=-1)


def _wmmse_batch(gains, p_max, noise, max_iters, tol, v0, compact_every=32):
    """Batched fixed-point iteration; returns (powers, iterations, converged).

    Convergence is per instance (sum-rate improvement below tol); settled
    instances are periodically dropped from the working set so stragglers
    do not keep the whole batch iterating. Raises NumericalError if any
    instance's sum rate decreases by more than float-rounding slack.
    """
    n = gains.shape[0]
    out_v = v0.copy()
    active = np.arange(n)
    g_act = gains
    amp_kk = np.sqrt(np.einsum("nkk->nk", g_act))
    v = v0
    rate = _sum_rate_batch(gains, v * v, noise)
    unfinished = np.ones(n, dtype=bool)
    it = 0
    while it < max_iters and active.size:
        it += 1
        total = np.einsum("nkj,nj->nk", g_act, v * v) + noise
        rx = amp_kk * v / total
        weight = 1.0 / (1.0 - rx * amp_kk * v)
        v = np.clip(
            weight * rx * amp_kk / np.einsum("nj,njk->nk", weight * rx * rx, g_act),
            0.0,
            np.sqrt(p_max),
        )
        new_rate = _sum_rate_batch(g_act, v * v, noise)
        drop = rate - new_rate
        slack = 1e-9 * np.maximum(1.0, np.abs(rate))
        if (drop > slack).any():
            raise NumericalError(
                f"sum rate decreased by {float(drop.max()):.3e} at iteration {it}"
            )
        settled = np.abs(new_rate - rate) < tol
        rate = new_rate
        if settled.all():
            out_v[active] = v
            unfinished[active] = False
            active = active[:0]
            break
        if it % compact_every == 0 and settled.any():
            out_v[active] = v
            unfinished[active[settled]] = False
            keep = ~settled
            active = active[keep]
            g_act = g_act[keep]
            amp_kk = amp_kk[keep]
            v = v[keep]
            rate = rate[keep]
    if active.size:
        out_v[active] = v
    return out_v * out_v, it, not unfinished.any()


def wmmse_solve(instance, max_iters=500, tol=1e-6, init="full_power", seed=None):
    """Solve one instance. `init` is "full_power" or "random" (seeded).

    Hitting the iteration cap is not an error: the best iterate is returned
    with `converged=False`.
    """
    if init == "full_power":
        v0 = np.full((1, instance.k), np.sqrt(instance.p_max))
    elif init == "random":
        rng = np.random.default_rng(seed)
        v0 = np.sqrt(rng.uniform(0.0, instance.p_max, size=(1, instance.k)))
    else:
        raise DomainError(f"unknown init {init!r}")
    powers, iterations, converged = _wmmse_batch(
        instance.gains[None], instance.p_max, instance.noise, max_iters, tol, v0
    )
    p = powers[0]
    return WmmseResult(p, iterations, converged, sum_rate(instance, np.clip(p, 0, instance.p_max)))


def binary_fraction(powers, p_max=1.0, threshold=BINARY_THRESHOLD):
    """Fraction of entries within `threshold` of {0, p_max} after normalization."""
    p = np.asarray(powers, dtype=np.float64) / p_max
    return float(np.mean((p <= threshold) | (p >= 1.0 - threshold)))


def sample_gains(rng, n, k, gain_model="rayleigh_amplitude"):
    """Draw n channel matrices of i.i.d. Rayleigh-fading gains."""
    if gain_model not in GAIN_MODELS:
        raise DomainError(f"unknown gain model {gain_model!r}")
    power = rng.exponential(1.0, size=(n, k, k))
    return np.sqrt(power) if gain_model == "rayleigh_amplitude" else power


def _curve_chunk(args):
    (seed, n, k, p_max, noise, max_iters, tol, gain_model) = args
    rng = np.random.default_rng(seed)
    gains = sample_gains(rng, n, k, gain_model)
    v0 = np.full((n, k), np.sqrt(p_max))
    powers, _, _ = _wmmse_batch(gains, p_max, noise, max_iters, tol, v0)
    direct = np.einsum("nkk->nk", gains)
    return direct.ravel(), powers.ravel()


def full_power_curve(
    k_list,
    realizations,
    g_grid,
    delta=0.1,
    p_max=1.0,
    noise=1.0,
    seed=0,
    max_iters=500,
    tol=1e-6,
    gain_model="rayleigh_amplitude",
    chunk_size=250,
    threads=1,
):
    """Empirical Pr{P_k = p_max | direct gain near g} for each K and grid center.

    Returns CurvePoint rows in (K, center) order. Empty bins report
    prob=None rather than 0. Deterministic in `seed` for any thread count.
    """
    if realizations < 1:
        raise DomainError("realizations must be >= 1")
    rows = []
    for k_index, k in enumerate(k_list):
        starts = list(range(0, realizations, chunk_size))
        child = seed_seq(seed, k_index)
        chunk_seeds = child.spawn(len(starts))
        jobs = [
            (
                chunk_seeds[i],
                min(chunk_size, realizations - start),
                k,
                p_max,
                noise,
                max_iters,
                tol,
                gain_model,
            )
            for i, start in enumerate(starts)
        ]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(_curve_chunk, jobs))
        else:
            parts = [_curve_chunk(j) for j in jobs]
        direct = np.concatenate([p[0] for p in parts])
        powers = np.concatenate([p[1] for p in parts])
        full = powers >= (1.0 - BINARY_THRESHOLD) * p_max
        for center in g_grid:
            mask = (direct > center - delta) & (direct < center + delta)
            count = int(mask.sum())
            prob = float(full[mask].mean()) if count else None
            rows.append(CurvePoint(k, float(center), delta, prob, count))
    return rows


def binary_fraction_table(
    k_list,
    realizations,
    p_max=1.0,
    noise=1.0,
    seed=0,
    max_iters=500,
    tol=1e-6,
    gain_model="rayleigh_amplitude",
    chunk_size=250,
):
    """(K, binary fraction, realizations) summary over random instances."""
    rows = []
    for k_index, k in enumerate(k_list):
        child = seed_seq(seed, 7, k_index)
        total = 0.0
        n_done = 0
        for chunk_seed in child.spawn(int(np.ceil(realizations / chunk_size))):
            n = min(chunk_size, realizations - n_done)
            rng = np.random.default_rng(chunk_seed)
            gains = sample_gains(rng, n, k, gain_model)
            v0 = np.full((n, k), np.sqrt(p_max))
            powers, _, _ = _wmmse_batch(gains, p_max, noise, max_iters, tol, v0)
            total += binary_fraction(powers, p_max) * n
            n_done += n
        rows.append((k, total / n_done, realizations))
    return rows
