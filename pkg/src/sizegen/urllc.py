"""Physical layer and QoS model for short-packet downlink allocation.

Scenario: a multi-antenna base station serves K single-antenna users on
orthogonal subchannels under a per-frame delay budget. Service quality is
expressed through a queueing exponent `theta`: a user's allocation is
adequate when its effective capacity (a theta-weighted fading average of
the finite-blocklength rate) reaches the effective bandwidth of its Poisson
packet arrivals.

Conventions: distances in meters, powers in watts, bandwidth in Hz, rates
in packets per frame, path loss in dB (base-10), `log` in the rate formula
natural. The overall loss budget eps splits evenly between decoding error
and queue-delay violation (eps/2 each).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import erfcinv, logsumexp

from .errors import ContractViolation, DomainError
from .seeding import seed_seq

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class UrllcConfig:
    cell_radius_m: float = 250.0
    d_min_m: float = 50.0
    pathloss_offset_db: float = 35.3
    pathloss_slope_db: float = 37.6
    p_max_dbm: float = 43.0
    n_antennas: int = 8
    noise_psd_dbm_hz: float = -173.0
    eps_max: float = 1e-5
    eps_d: float = 6e-6
    delay_bound_ms: float = 1.0
    queue_bound_ms: float = 0.8
    tx_time_ms: float = 0.05
    frame_ms: float = 0.1
    packet_bits: float = 160.0
    arrival_rate: float = 0.2
    theta_delay: str = "delay_bound"

    def __post_init__(self):
        if not 0 < self.eps_d <= self.eps_max < 1:
            raise DomainError("need 0 < eps_d <= eps_max < 1")
        if not self.tx_time_ms <= self.frame_ms:
            raise DomainError("transmission time cannot exceed the frame")
        if not 0 < self.d_min_m < self.cell_radius_m:
            raise DomainError("need 0 < d_min < cell radius")
        positive = (
            "cell_radius_m", "d_min_m", "pathloss_offset_db", "pathloss_slope_db",
            "n_antennas", "eps_max", "eps_d", "delay_bound_ms", "queue_bound_ms",
            "tx_time_ms", "frame_ms", "packet_bits", "arrival_rate",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.theta_delay not in ("delay_bound", "queue_bound"):
            raise DomainError("theta_delay must be 'delay_bound' or 'queue_bound'")

    @property
    def p_max_w(self):
        return 1e-3 * 10.0 ** (self.p_max_dbm / 10.0)

    @property
    def noise_psd_w(self):
        return 1e-3 * 10.0 ** (self.noise_psd_dbm_hz / 10.0)

    @property
    def tau_s(self):
        return self.tx_time_ms * 1e-3

    @property
    def delay_frames(self):
        bound = self.delay_bound_ms if self.theta_delay == "delay_bound" else self.queue_bound_ms
        return bound / self.frame_ms


@dataclass(frozen=True)
class QosParams:
    theta: float
    effective_bw: float  # packets/frame required by the arrival process
    eps_c: float  # decoding error budget

    def __post_init__(self):
        if not self.theta > 0:
            raise DomainError("theta must be positive")
        if not self.effective_bw > 0:
            raise DomainError("effective bandwidth must be positive")
        if not 0 < self.eps_c < 1:
            raise DomainError("eps_c must lie in (0, 1)")


@dataclass(frozen=True)
class ChannelSample:
    """One realization: per-user large-scale gains and fading gains."""

    alpha: np.ndarray
    g: np.ndarray
    k: int

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        g = np.asarray(self.g, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "g", g)
        if a.shape != (self.k,) or g.shape != (self.k,):
            raise DomainError("alpha and g must both have length k")
        if not ((a > 0).all() and (g > 0).all()):
            raise DomainError("gains must be positive")


@dataclass(frozen=True)
class MetricsRow:
    k: int
    availability: float
    total_bandwidth_mhz: float
    n_samples: int


def qos_params(eps, cfg):
    """Queueing exponent, required service rate, and decoding error budget.

    theta = ln(1 - ln(eps/2) / (a * D/Tf)); S = (a/theta)(e^theta - 1).
    """
    if not 0 < eps < 1:
        raise DomainError("eps must lie in (0, 1)")
    a = cfg.arrival_rate
    theta = float(np.log(1.0 - np.log(eps / 2.0) / (a * cfg.delay_frames)))
    eff_bw = a / theta * (np.exp(theta) - 1.0)
    return QosParams(theta=theta, effective_bw=float(eff_bw), eps_c=eps / 2.0)


def inverse_q(p):
    """z with Q(z) = p, Q the Gaussian upper-tail probability."""
    p = np.asarray(p, dtype=np.float64)
    if ((p <= 0) | (p >= 1)).any():
        raise DomainError("tail probability must lie in (0, 1)")
    z = np.sqrt(2.0) * erfcinv(2.0 * p)
    return float(z) if z.ndim == 0 else z


def achievable_rate(g, alpha, power_w, bandwidth_hz, qos, cfg):
    """Finite-blocklength rate in packets/frame, clamped at zero.

    Broadcasts over array arguments. Zero bandwidth (or any allocation whose
    dispersion penalty exceeds the Shannon term) yields exactly zero.
    """
    g = np.asarray(g, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    power = np.asarray(power_w, dtype=np.float64)
    bw = np.asarray(bandwidth_hz, dtype=np.float64)
    if (power < 0).any() or (bw < 0).any():
        raise DomainError("power and bandwidth must be nonnegative")
    blocklength = cfg.tau_s * bw
    penalty = inverse_q(qos.eps_c)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = alpha * power * g / (cfg.noise_psd_w * bw)
        raw = (blocklength * np.log1p(snr) - penalty * np.sqrt(blocklength)) / (
            cfg.packet_bits * LN2
        )
    raw = np.where(bw > 0, raw, 0.0)
    out = np.maximum(raw, 0.0)
    return float(out) if out.ndim == 0 else out


def fading_gains(rng, cfg, size):
    """Squared norm of an n_antennas-vector of unit complex Gaussians."""
    return rng.gamma(shape=float(cfg.n_antennas), scale=1.0, size=size)


def effective_capacity(alpha, power_w, bandwidth_hz, qos, cfg, draws=None, n_mc=2000, seed=0):
    """Monte-Carlo effective capacity -(1/theta) ln E_g exp(-theta s).

    `draws` supplies a common fading sample set (one trailing axis shared by
    every user); otherwise `n_mc` draws are generated from `seed`. User
    arguments broadcast against each other; the fading axis is reduced.
    """
    if draws is None:
        if n_mc < 1:
            raise DomainError("n_mc must be >= 1")
        draws = fading_gains(np.random.default_rng(seed), cfg, int(n_mc))
    draws = np.asarray(draws, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    power = np.asarray(power_w, dtype=np.float64)
    bw = np.asarray(bandwidth_hz, dtype=np.float64)
    rate = achievable_rate(
        draws, alpha[..., None], power[..., None], bw[..., None], qos, cfg
    )
    log_mean = logsumexp(-qos.theta * rate, axis=-1) - np.log(draws.shape[-1])
    out = -log_mean / qos.theta
    return float(out) if np.ndim(out) == 0 else out


def generate_channels(k, cfg, seed):
    """One ChannelSample: path-loss gains at uniform distances plus fading."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = rng.uniform(cfg.d_min_m, cfg.cell_radius_m, size=k)
    pathloss_db = cfg.pathloss_offset_db + cfg.pathloss_slope_db * np.log10(d)
    alpha = 10.0 ** (-pathloss_db / 10.0)
    g = fading_gains(rng, cfg, k)
    return ChannelSample(alpha=alpha, g=g, k=k)


def qos_satisfied(alpha, power_w, bandwidth_hz, cfg, eps, n_mc=5000, seed=0):
    """Whether effective capacity meets the arrival effective bandwidth.

    Scalar arguments give a bool; arrays give an elementwise bool array.
    Each user consumes an independent block of fading draws; results are
    deterministic in `seed` and independent of internal chunking.
    """
    q = qos_params(eps, cfg)
    scalar_in = np.ndim(alpha) == 0 and np.ndim(power_w) == 0 and np.ndim(bandwidth_hz) == 0
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    power = np.broadcast_to(np.asarray(power_w, dtype=np.float64), alpha.shape)
    bw = np.broadcast_to(np.asarray(bandwidth_hz, dtype=np.float64), alpha.shape)
    flat_alpha = alpha.ravel()
    flat_p = power.ravel()
    flat_b = bw.ravel()
    n_users = flat_alpha.size
    out = np.zeros(n_users, dtype=bool)
    user_seeds = seed_seq(seed).spawn(n_users)
    chunk = max(1, int(2_000_000 // max(n_mc, 1)))
    for start in range(0, n_users, chunk):
        stop = min(start + chunk, n_users)
        draws = np.stack(
            [fading_gains(np.random.default_rng(s), cfg, n_mc) for s in user_seeds[start:stop]]
        )
        cap = effective_capacity(
            flat_alpha[start:stop], flat_p[start:stop], flat_b[start:stop], q, cfg, draws=draws
        )
        out[start:stop] = np.atleast_1d(cap) >= q.effective_bw
    out = out.reshape(alpha.shape)
    return bool(out[0]) if scalar_in else out


def metrics(allocated, cfg, eps=None, n_mc=5000, seed=0):
    """Aggregate availability and mean total bandwidth per user count.

    `allocated`: iterable of (ChannelSample, powers_w, bandwidth_hz).
    Availability checks use `eps` (default: the config's required loss
    probability, not the training target).
    """
    allocated = list(allocated)
    if not allocated:
        raise DomainError("metrics needs at least one allocated sample")
    eps = cfg.eps_max if eps is None else eps
    by_k = {}
    for idx, (sample, powers, bw) in enumerate(allocated):
        by_k.setdefault(sample.k, []).append((idx, sample, powers, bw))
    rows = []
    for k in sorted(by_k):
        group = by_k[k]
        alphas = np.concatenate([s.alpha for _, s, _, _ in group])
        powers = np.concatenate([np.asarray(p, dtype=np.float64) for _, _, p, _ in group])
        bws = np.concatenate([np.asarray(b, dtype=np.float64) for _, _, _, b in group])
        ok = qos_satisfied(alphas, powers, bws, cfg, eps, n_mc=n_mc, seed=(seed, k))
        total_mhz = bws.reshape(len(group), k).sum(axis=1) / 1e6
        rows.append(
            MetricsRow(
                k=k,
                availability=float(np.mean(ok)),
                total_bandwidth_mhz=float(np.mean(total_mhz)),
                n_samples=len(group),
            )
        )
    return rows


def with_eps_d(cfg, eps_d):
    """Copy of the config with a different training reliability target."""
    return replace(cfg, eps_d=eps_d)
