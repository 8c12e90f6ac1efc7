import numpy as np
import pytest

from sizegen import penn, size_checks


def test_no_aggregation_path_means_zero_deviation():
    # zeroing V removes every cross-object path, so the probe response
    # cannot depend on K at all
    models = size_checks.shared_weight_models(seed=1)
    model = models["mean"]
    for layer in model.layers:
        layer.v.data[:] = 0.0
    res = size_checks.mean_invariance_check(model, 64, 128, trials=50, seed=2)
    assert res.deviation == 0.0


def test_mean_aggregator_nearly_size_invariant_uniform_features():
    models = size_checks.shared_weight_models(seed=3)
    res = size_checks.mean_invariance_check(
        models["mean"], 1024, 4096, trials=2000, seed=4,
        probes=(0.1, 0.3, 0.5, 0.7, 0.9),
        feature_sampler=size_checks.uniform_features,
    )
    assert res.deviation <= 0.01 * res.output_range


def test_sum_aggregator_drifts_far_more_than_mean():
    models = size_checks.shared_weight_models(seed=3)
    kw = dict(trials=400, seed=5, probes=(0.2, 0.8),
              feature_sampler=size_checks.uniform_features)
    mean_res = size_checks.mean_invariance_check(models["mean"], 256, 1024, **kw)
    sum_res = size_checks.mean_invariance_check(models["sum"], 256, 1024, **kw)
    assert sum_res.deviation >= 10.0 * mean_res.deviation


def test_max_aggregate_of_uniforms_tracks_order_statistic():
    # single linear layer exposing the aggregate itself: for uniform
    # features the exclude-self max concentrates near K/(K+1), so the
    # larger size must sit strictly above the smaller by a positive margin
    layer = penn.PennLayer(
        np.zeros((1, 1)), np.ones((1, 1)), np.zeros(1), activation="identity", aggregator="max"
    )
    model = penn.PennModel([layer], head="identity")
    small = size_checks.size_invariance_curve(
        model, [0.5], 256, trials=3000, seed=6, feature_sampler=size_checks.uniform_features
    )
    large = size_checks.size_invariance_curve(
        model, [0.5], 4096, trials=3000, seed=7, feature_sampler=size_checks.uniform_features
    )
    assert large[0] > small[0] > 0.99
    assert large[0] - small[0] > 5e-4  # ~ 4096/4097 - 256/257 minus noise


def test_max_aggregator_drift_ratio_with_unbounded_features():
    results = size_checks.aggregator_drift_check(
        seed=8, k_small=512, k_large=2048, trials=800
    )
    mean_dev = results["mean"].deviation
    assert results["max"].deviation >= 10.0 * mean_dev
    assert results["sum"].deviation >= 10.0 * mean_dev


def test_policy_concentration_closed_form_is_exact():
    rows = size_checks.policy_concentration(
        lambda g: 0.37 / g, (10, 100), probe_gain=1.0, trials=200, seed=9
    )
    for row in rows:
        assert row.std <= 1e-12 * row.mean  # identical values, float reassociation only
        assert row.mean == pytest.approx(0.37 * row.k, rel=1e-12)


def test_policy_concentration_budget_split_shrinks_with_k():
    def policy(g):
        inv = 1.0 / g
        return inv / inv.sum(axis=-1, keepdims=True)

    rows = size_checks.policy_concentration(policy, (10, 30, 100), 1.0, trials=4000, seed=10)
    ratios = [r.std / r.mean for r in rows]
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[-1] <= 0.1
    predicted = 1.0 / rows[-1].inv_gain_mean
    assert rows[-1].mean == pytest.approx(predicted, rel=0.05)


def test_run_suite_all_pass_small():
    rows = size_checks.run_suite(seed=0, k_small=256, k_large=1024, trials=400,
                                 concentration_trials=2000)
    assert all(r.passed for r in rows)
    names = {r.name for r in rows}
    assert len(names) == len(rows)
