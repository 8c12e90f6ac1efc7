"""Empirical size-behavior checks for equivariant networks and policies.

Three statistics quantify how a per-object input/output relation moves with
the object count K when inputs are i.i.d.:

* size_invariance_curve / mean_invariance_check: a probe value is embedded
  as object 1 among K-1 fresh draws and its output is averaged over trials;
  with mean aggregation the curves at two large K nearly coincide, while
  sum and max aggregation drift.
* aggregator_drift_check: the same harness run for several aggregators over
  one shared weight set.
* policy_concentration: for an explicit allocation policy, the spread of
  K * (output of the probe object) across trials, which collapses as K
  grows because the other objects enter only through an empirical mean.

Feature draws default to a unit exponential: unbounded support keeps the
max aggregate moving with K (a bounded distribution pins its upper order
statistics and would mask the drift).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import penn
from .errors import ContractViolation
from .seeding import rng as make_rng

DEFAULT_PROBES = (0.1, 0.5, 1.0, 1.5, 2.3)  # roughly the exp(1) 10..90% quantiles


def exponential_features(rng, size):
    return rng.exponential(1.0, size=size)


def uniform_features(rng, size):
    return rng.uniform(0.0, 1.0, size=size)


def unit_mean_fading(rng, size, shape=8.0):
    """Multi-antenna style fading gains scaled to unit mean."""
    return rng.gamma(shape, 1.0 / shape, size=size)


@dataclass(frozen=True)
class InvarianceResult:
    aggregator: str
    k_small: int
    k_large: int
    probes: np.ndarray
    avg_small: np.ndarray
    avg_large: np.ndarray

    @property
    def deviation(self):
        return float(np.max(np.abs(self.avg_small - self.avg_large)))

    @property
    def output_range(self):
        lo = min(self.avg_small.min(), self.avg_large.min())
        hi = max(self.avg_small.max(), self.avg_large.max())
        return float(hi - lo)


def size_invariance_curve(model, probes, k, trials, seed, feature_sampler=exponential_features,
                          chunk=250):
    """Per-probe average of object 1's output among K-1 i.i.d. companions."""
    if k < 2:
        raise ContractViolation("the harness needs k >= 2")
    probes = np.asarray(probes, dtype=np.float64)
    rng = make_rng(seed)
    sums = np.zeros(probes.shape)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        companions = feature_sampler(rng, (n, k - 1))
        x = np.empty((n, k, 1))
        x[:, 1:, 0] = companions
        for i, probe in enumerate(probes):
            x[:, 0, 0] = probe
            out = penn.forward_policy(model, x)
            sums[i] += out[:, 0].sum()
        done += n
    return sums / trials


def mean_invariance_check(model, k_small, k_large, trials, seed,
                          probes=DEFAULT_PROBES, feature_sampler=exponential_features):
    """Deviation of the probe-response curve between two input sizes."""
    avg_small = size_invariance_curve(model, probes, k_small, trials, (seed, k_small),
                                      feature_sampler)
    avg_large = size_invariance_curve(model, probes, k_large, trials, (seed, k_large),
                                      feature_sampler)
    agg = model.layers[0].aggregator
    return InvarianceResult(agg, k_small, k_large, np.asarray(probes, float),
                            avg_small, avg_large)


def shared_weight_models(seed, hidden_width=4, aggregators=penn.AGGREGATORS):
    """One random weight set instantiated under several aggregator kinds."""
    rng = make_rng(seed)
    reference = penn.build_penn(rng, hidden_widths=(hidden_width,), head="identity")
    out = {}
    for agg in aggregators:
        layers = [
            penn.PennLayer(l.u, l.v, l.c, activation=l.activation, aggregator=agg)
            for l in reference.layers
        ]
        out[agg] = penn.PennModel(layers, head="identity")
    return out


def aggregator_drift_check(seed, k_small, k_large, trials,
                           probes=DEFAULT_PROBES, feature_sampler=exponential_features,
                           aggregators=penn.AGGREGATORS):
    """InvarianceResult per aggregator kind over one shared weight set."""
    models = shared_weight_models(seed, aggregators=aggregators)
    return {
        agg: mean_invariance_check(model, k_small, k_large, trials, seed,
                                   probes, feature_sampler)
        for agg, model in models.items()
    }


@dataclass(frozen=True)
class ConcentrationRow:
    k: int
    mean: float  # mean of K * output of the probe object
    std: float
    inv_gain_mean: float  # empirical mean of 1/gain over the same draws


def policy_concentration(policy, k_list, probe_gain, trials, seed,
                         gain_sampler=unit_mean_fading):
    """Spread of K * P_1 across trials for a policy on random gain vectors.

    `policy(gains) -> outputs` must accept a (trials, K) batch. The probe
    object's gain is pinned to `probe_gain`; the rest are i.i.d. draws.
    """
    rows = []
    for idx, k in enumerate(k_list):
        rng = make_rng(seed, idx)
        gains = gain_sampler(rng, (trials, k))
        gains[:, 0] = probe_gain
        outputs = np.asarray(policy(gains), dtype=np.float64)
        if outputs.shape != gains.shape:
            raise ContractViolation("policy output shape must match the gain batch")
        scaled = k * outputs[:, 0]
        rows.append(
            ConcentrationRow(
                k=int(k),
                mean=float(scaled.mean()),
                std=float(scaled.std()),
                inv_gain_mean=float(np.mean(1.0 / gains)),
            )
        )
    return rows


@dataclass(frozen=True)
class CheckRow:
    name: str
    statistic: float
    threshold: float
    comparison: str  # "<=" or ">="
    passed: bool


def _row(name, statistic, threshold, comparison):
    ok = statistic <= threshold if comparison == "<=" else statistic >= threshold
    return CheckRow(name, float(statistic), float(threshold), comparison, bool(ok))


def run_suite(seed=0, k_small=1024, k_large=4096, trials=2000,
              concentration_k=(10, 30, 100), concentration_trials=4000, p_max=1.0):
    """The full PASS/FAIL property table used by the command line.

    Mean aggregation must hold its probe-response curve steady between two
    large sizes (within 1% of the curve's range) while sum and max move at
    least ten times as much; the budget-split policy's K-scaled output must
    concentrate (std/mean <= 0.1 at the largest size, decreasing in K, mean
    within 5% of the inverse-gain prediction).
    """
    results = aggregator_drift_check(seed, k_small, k_large, trials)
    mean_res = results["mean"]
    scale = mean_res.output_range
    rows = [
        _row("mean_aggregator_deviation_fraction", mean_res.deviation / scale, 0.01, "<="),
        _row("sum_aggregator_drift_ratio", results["sum"].deviation / max(mean_res.deviation, 1e-300), 10.0, ">="),
        _row("max_aggregator_drift_ratio", results["max"].deviation / max(mean_res.deviation, 1e-300), 10.0, ">="),
    ]

    def budget_split(gains):
        inv = 1.0 / gains
        return p_max * inv / inv.sum(axis=-1, keepdims=True)

    conc = policy_concentration(budget_split, concentration_k, 1.0, concentration_trials, (seed, 1))
    ratios = [r.std / r.mean for r in conc]
    rows.append(_row("budget_split_std_over_mean_at_largest_k", ratios[-1], 0.1, "<="))
    rows.append(
        _row(
            "budget_split_spread_decreasing_in_k",
            float(min(a - b for a, b in zip(ratios, ratios[1:]))),
            0.0,
            ">=",
        )
    )
    last = conc[-1]
    predicted = p_max / (1.0 * last.inv_gain_mean)
    rows.append(
        _row(
            "budget_split_mean_matches_inverse_gain_prediction",
            abs(last.mean - predicted) / predicted,
            0.05,
            "<=",
        )
    )

    def per_object_closed_form(gains):
        return 0.37 / gains

    closed = policy_concentration(per_object_closed_form, (concentration_k[-1],), 1.0, 200, (seed, 2))
    # zero up to float reassociation in the mean
    rows.append(_row("per_object_policy_spread_is_zero", closed[0].std, 1e-9, "<="))
    return rows
