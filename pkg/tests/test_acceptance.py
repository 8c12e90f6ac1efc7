"""Acceptance gate: one test per numbered criterion, each printing a
PASS/FAIL line. Criteria 7 and 8 share one desk-scale training pipeline
(session-scoped) and dominate the runtime; run `pytest -m "not slow"` to
skip them during development."""

import time

import numpy as np
import pytest

from sizegen import autodiff as ad
from sizegen import closed_form as cf
from sizegen import penn, scaling, size_checks, training, urllc, wmmse
from sizegen import cli

CFG = urllc.UrllcConfig()


def report(n, text):
    print(f"\nACCEPTANCE {n}: {text} PASS")


# --------------------------------------------------------------------------
# 1. closed-form KKT


def test_criterion_1_closed_form_kkt():
    start = time.time()
    rng = np.random.default_rng(101)
    worst_simple = 0.0
    worst_joint = 0.0
    worst_softmax = 0.0
    for i in range(1000):
        k = int(rng.integers(1, 12))
        gains = rng.uniform(0.2, 5.0, size=k)
        if i % 2 == 0:
            problem = cf.SimpleAllocProblem(
                gains=gains,
                bandwidth_hz=float(rng.uniform(0.5, 3.0)),
                rate_bps=float(rng.uniform(0.5, 3.0)),
                noise_psd=float(rng.uniform(0.2, 2.0)),
            )
            powers = cf.solve_min_power(problem)
            rates = cf.rate_bps(powers, gains, problem.bandwidth_hz, problem.noise_psd)
            worst_simple = max(worst_simple, float(np.max(np.abs(rates / problem.rate_bps - 1.0))))
        else:
            problem = cf.JointAllocProblem(
                gains=gains,
                rate_bps=1.0,
                noise_psd=1.0,
                p_max=float(k * rng.uniform(1.5, 4.0)),
            )
            powers, bw = cf.solve_joint(problem, tol=1e-12)
            rates = cf.rate_bps(powers, gains, bw, problem.noise_psd)
            worst_joint = max(worst_joint, float(np.max(np.abs(rates / problem.rate_bps - 1.0))))
            softmax = cf.softmax_form_powers(gains, problem.p_max)
            worst_softmax = max(
                worst_softmax, float(np.max(np.abs(powers - softmax))) / problem.p_max
            )
    elapsed = time.time() - start
    assert worst_simple <= 1e-9
    assert worst_joint <= 1e-9
    assert worst_softmax <= 1e-12
    assert elapsed < 1.0
    report(1, f"KKT residuals {max(worst_simple, worst_joint):.2e} <= 1e-9, "
              f"softmax gap {worst_softmax:.2e} <= 1e-12, {elapsed:.2f}s < 1s;")


# --------------------------------------------------------------------------
# 2. equivariance


def test_criterion_2_equivariance():
    rng = np.random.default_rng(202)
    worst = 0.0
    for trial in range(100):
        aggregator = penn.AGGREGATORS[trial % 3]
        head = ("identity", "softplus", "softmax_power")[trial % 3]
        model = penn.build_penn(
            np.random.default_rng(trial),
            hidden_widths=(4,),
            head=head,
            aggregator=aggregator,
            p_max=3.0 if head == "softmax_power" else None,
        )
        k = int(rng.integers(2, 16))
        x = rng.normal(size=(k, 1))
        perm = rng.permutation(k)
        direct = penn.forward_policy(model, penn.permute_objects(x, perm))
        permuted = np.take(penn.forward_policy(model, x), perm, axis=-1)
        worst = max(worst, float(np.max(np.abs(direct - permuted))))
    assert worst <= 1e-12
    report(2, f"100 (model, input, permutation) triples, worst gap {worst:.2e} <= 1e-12;")


# --------------------------------------------------------------------------
# 3. gradients


def test_criterion_3_gradients():
    q = urllc.qos_params(CFG.eps_d, CFG)

    # rate chain w.r.t. power and bandwidth
    rng = np.random.default_rng(303)
    alpha = 10.0 ** rng.uniform(-12.0, -10.5, size=(1, 3))
    g = rng.gamma(8.0, 1.0, size=(1, 3))
    power = ad.Tensor(rng.uniform(0.5, 3.0, size=(1, 3)), requires_grad=True)
    bw = ad.Tensor(rng.uniform(1e5, 4e5, size=(1, 3)), requires_grad=True)
    coeff = rng.normal(size=(1, 3))

    def rate_loss():
        return ad.tsum(ad.mul(training.rate_graph(power, bw, alpha, g, q, CFG), coeff))

    rate_loss().backward()
    an_p, an_b = power.grad.copy(), bw.grad.copy()

    def rate_value():
        with ad.no_grad():
            return rate_loss().item()

    num_p = ad.finite_difference_grads(rate_value, [power], h=1e-6)[0]
    err_p = ad.relative_gradient_error(an_p, num_p)
    assert err_p <= 1e-4

    # softmax coupling and the positive heads, per head
    head_errs = []
    for head, p_max in (("softmax_power", 4.0), ("softplus", None)):
        model = penn.build_penn(
            np.random.default_rng(7), hidden_widths=(4,), head=head, p_max=p_max
        )
        params = model.parameters()
        x = rng.normal(size=(3, 1))
        w = rng.normal(size=3)

        def head_loss():
            return ad.tsum(ad.mul(model.forward(x), w))

        ad.zero_grads(params)
        head_loss().backward()
        analytic = [p.grad.copy() for p in params]

        def head_value():
            with ad.no_grad():
                return head_loss().item()

        numeric = ad.finite_difference_grads(head_value, params, h=1e-6)
        head_errs.extend(ad.relative_gradient_error(a, n) for a, n in zip(analytic, numeric))
    assert max(head_errs) <= 1e-4

    # whole system on a K=3 micro-instance (three nets, scale factor, rate
    # chain); directional derivatives keep the power path's tiny gradients
    # well-conditioned against truncation noise
    tc = training.TrainConfig(
        samples_per_k=4, val_samples_per_k=1, test_samples_per_k=1, batch_size=4, epochs=1
    )

    class Starved:
        def bandwidth_hz(self, alphas, ks):
            return np.full(np.asarray(alphas).shape, 0.18e6)

    ps = training.PennPolicySet.build(CFG, tc, Starved(), seed=11)
    samples = [urllc.generate_channels(3, CFG, seed=21)]
    scale = np.stack([ps.scale_units(s.alpha, s.k) for s in samples])
    params = [p for group in ps.parameter_groups() for p in group]
    ad.zero_grads(params)
    loss = training._batch_loss_graph(ps, samples, scale, q, CFG)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def system_value():
        with ad.no_grad():
            return training._batch_loss_graph(ps, samples, scale, q, CFG).item()

    numeric = ad.finite_difference_grads(system_value, params[6:], h=1e-6)
    coord_err = max(
        ad.relative_gradient_error(a, n) for a, n in zip(analytic[6:], numeric)
    )
    dir_err = ad.directional_gradient_error(system_value, params, analytic, h=1e-6,
                                            n_directions=25, seed=5)
    assert coord_err <= 1e-4 and dir_err <= 1e-4
    report(3, f"rate chain {err_p:.1e}, heads {max(head_errs):.1e}, "
              f"system coords {coord_err:.1e} / directions {dir_err:.1e} <= 1e-4;")


# --------------------------------------------------------------------------
# 4. size-behavior suite


@pytest.mark.slow
def test_criterion_4_size_behavior():
    start = time.time()
    results = size_checks.aggregator_drift_check(seed=404, k_small=1024, k_large=4096,
                                                 trials=2000)
    mean_res = results["mean"]
    frac = mean_res.deviation / mean_res.output_range
    sum_ratio = results["sum"].deviation / mean_res.deviation
    max_ratio = results["max"].deviation / mean_res.deviation
    assert frac <= 0.01
    assert sum_ratio >= 10.0
    assert max_ratio >= 10.0

    def budget_split(gains):
        inv = 1.0 / gains
        return inv / inv.sum(axis=-1, keepdims=True)

    conc = size_checks.policy_concentration(budget_split, (10, 30, 100), 1.0, 4000, seed=405)
    ratios = [r.std / r.mean for r in conc]
    assert ratios[-1] <= 0.1
    assert ratios[0] > ratios[1] > ratios[2]
    elapsed = time.time() - start
    assert elapsed < 120.0
    report(4, f"mean dev {frac:.4%} of range <= 1%, sum/max drift x{sum_ratio:.0f}/x{max_ratio:.0f} "
              f">= 10x, concentration {ratios[-1]:.3f} <= 0.1, {elapsed:.0f}s < 120s;")


# --------------------------------------------------------------------------
# 5. WMMSE


@pytest.mark.slow
def test_criterion_5_wmmse():
    start = time.time()
    # monotonicity is asserted inside every iteration; box feasibility here
    rng = np.random.default_rng(505)
    for _ in range(20):
        inst = wmmse.InterferenceInstance(wmmse.sample_gains(rng, 1, 8)[0], 1.0, 1.0)
        res = wmmse.wmmse_solve(inst)
        assert (res.powers >= 0).all() and (res.powers <= 1 + 1e-12).all()

    inst = wmmse.InterferenceInstance(np.array([[1.0, 10.0], [10.0, 1.0]]), 1.0, 1.0)
    grid = np.linspace(0, 1, 21)
    best = max(wmmse.sum_rate(inst, [a, b]) for a in grid for b in grid)
    res = wmmse.wmmse_solve(inst, init="random", seed=3)
    assert res.sum_rate >= best - 1e-3

    rows = wmmse.binary_fraction_table([10], 1000, seed=506)
    binary = rows[0][1]
    assert binary >= 0.90

    points = wmmse.full_power_curve(
        [50, 80], 10_000, g_grid=(0.5, 1.0, 1.5, 2.0, 2.5, 3.0), seed=507
    )
    by = {(p.k, p.g_center): p for p in points}
    assert by[(50, 3.0)].prob >= 0.9
    assert by[(50, 0.5)].prob <= 0.1
    elapsed = time.time() - start
    assert elapsed < 300.0
    test_criterion_5_wmmse.curve = points
    report(5, f"monotone iterates, grid-optimal K=2, binary {binary:.3f} >= 0.90, "
              f"curve probes ok, {elapsed:.0f}s < 300s;")


@pytest.mark.slow
def test_criterion_5_curve_size_invariance():
    """|prob(K=50) - prob(K=80)| <= 0.1 per well-populated (>=100 samples) bin.

    Asserted exactly as stated. The transition bins (direct gain 1.5-2.0)
    genuinely exceed the bound by ~0.02-0.04 with fully converged solutions
    and ~100k users per curve: total interference still grows ~7% from K=50
    to K=80, which shifts the steep part of the curve by more than 0.1 in
    probability. See the decisions ledger for the full analysis; the bound
    holds on every bin outside the transition and for larger size pairs.
    """
    points = getattr(test_criterion_5_wmmse, "curve", None)
    if points is None:
        points = wmmse.full_power_curve(
            [50, 80], 10_000, g_grid=(0.5, 1.0, 1.5, 2.0, 2.5, 3.0), seed=507
        )
    by = {(p.k, p.g_center): p for p in points}
    gaps = []
    for center in (0.5, 1.0, 1.5, 2.0, 2.5, 3.0):
        a, b = by[(50, center)], by[(80, center)]
        if a.count >= 100 and b.count >= 100:
            gaps.append((center, round(abs(a.prob - b.prob), 4), a.count, b.count))
    worst_gap = max(g for _, g, _, _ in gaps)
    assert worst_gap <= 0.1, (
        "size-invariance of the full-power curve between K=50 and K=80 "
        f"exceeds 0.1 at the transition bins (center, gap, n50, n80): {gaps}"
    )
    report(5, f"K-invariance gap {worst_gap:.3f} <= 0.1 per populated bin;")


# --------------------------------------------------------------------------
# 6. QoS numerics


def test_criterion_6_qos_numerics():
    q = urllc.qos_params(1e-5, CFG)
    assert q.theta == pytest.approx(1.96056, abs=1e-4)
    assert q.effective_bw == pytest.approx(0.62262, abs=1e-4)

    q_train = urllc.qos_params(CFG.eps_d, CFG)
    draws = scaling.label_fading_set(CFG)
    rng = np.random.default_rng(606)
    alphas = 10.0 ** rng.uniform(-12.5, -10.0, size=100)
    ks = rng.integers(1, 51, size=100).astype(float)
    labels = scaling.bv_labels(alphas, ks, CFG, draws=draws)
    caps = urllc.effective_capacity(alphas, CFG.p_max_w / ks, labels, q_train, CFG, draws=draws)
    worst = float(np.max(np.abs(caps - q_train.effective_bw)))
    assert worst <= 1e-3 * q_train.effective_bw

    alpha_grid = np.full(6, 10.0 ** -11.5)
    k_grid = np.array([1.0, 2.0, 5.0, 10.0, 25.0, 50.0])
    series = scaling.bv_labels(alpha_grid, k_grid, CFG, draws=draws)
    assert (np.diff(series) > 0).all()
    report(6, f"theta/S within 1e-4 of reference, 100 label residuals <= 1e-3*S "
              f"(worst {worst / q_train.effective_bw:.2e}), labels monotone in K;")


# --------------------------------------------------------------------------
# 7 + 8. the desk experiment (shared pipeline)

DESK_SEED = 1


@pytest.fixture(scope="module")
def desk_pipeline():
    cfg = CFG
    start = time.time()
    labels = scaling.make_bv_dataset(4000, cfg, k_max=50, seed=(DESK_SEED, 60))
    net = scaling.BandwidthScaleNet.build((DESK_SEED, 61), k_max=50)
    pre = scaling.pretrain_bv(labels, net, epochs=1000, seed=(DESK_SEED, 62))
    assert pre.meets_target, "scale-net fit above the 1%-of-variance budget"

    tc = training.TrainConfig(
        samples_per_k=2000,
        epochs=5000,
        test_k=(1, 2, 5, 10, 50),
        test_samples_per_k=50,
        seed=DESK_SEED,
    )
    datasets = training.generate_datasets(tc, cfg)
    result = training.train(tc, cfg, datasets, scale_net=net)
    rows = training.evaluate(
        result.policy_set, datasets.test, cfg, n_mc=tc.n_mc_eval, seed=(DESK_SEED, 80)
    )
    elapsed = time.time() - start

    baseline_cfg = urllc.with_eps_d(cfg, 5e-6)
    tc_base = training.TrainConfig(**{**tc.__dict__, "method": "m_penn"})
    datasets_base = training.generate_datasets(tc_base, baseline_cfg)
    result_base = training.train(tc_base, baseline_cfg, datasets_base, scale_net=None)
    rows_base = training.evaluate(
        result_base.policy_set, datasets_base.test, baseline_cfg,
        n_mc=tc.n_mc_eval, seed=(DESK_SEED, 80),
    )
    return {
        "proposed": {r.k: r for r in rows},
        "m_penn": {r.k: r for r in rows_base},
        "elapsed_proposed": elapsed,
    }


@pytest.mark.slow
def test_criterion_7_desk_experiment(desk_pipeline):
    rows = desk_pipeline["proposed"]
    elapsed = desk_pipeline["elapsed_proposed"]
    for k in (1, 2, 5, 10):
        assert rows[k].availability >= 0.95, f"availability {rows[k].availability} at K={k}"
    assert rows[50].availability >= 0.90
    ratio = rows[50].total_bandwidth_mhz / rows[10].total_bandwidth_mhz
    assert 4.0 <= ratio <= 9.0
    assert elapsed <= 1800.0
    report(7, "availability " + " ".join(f"K{k}={rows[k].availability:.2f}" for k in (1, 2, 5, 10, 50))
              + f", W50/W10={ratio:.2f} in [4,9], {elapsed/60:.1f} min <= 30 min;")


@pytest.mark.slow
def test_criterion_8_baseline_contrast(desk_pipeline):
    base = desk_pipeline["m_penn"]
    proposed = desk_pipeline["proposed"]
    assert base[50].availability <= 0.2, (
        f"scale-free baseline availability {base[50].availability} at K=50"
    )
    assert proposed[50].availability >= 0.9
    report(8, f"baseline A50={base[50].availability:.2f} <= 0.2 vs proposed "
              f"A50={proposed[50].availability:.2f} >= 0.9 (same budget and eval seed);")


# --------------------------------------------------------------------------
# 9. determinism (cheap commands; training determinism is covered in
# tests/test_cli.py and by the seeded trainer tests)


def test_criterion_9_determinism(tmp_path):
    fast = [
        "--set", "wmmse.k_list=6", "--set", "wmmse.realizations=60",
        "--set", "wmmse.binary_k_list=6", "--set", "wmmse.binary_realizations=60",
        "--set", "bv.samples=50", "--set", "bv.epochs=5", "--set", "bv.k_max=8",
    ]
    gains = tmp_path / "g.csv"
    gains.write_text("0.7\n1.3\n2.9\n")
    outputs = {}
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli.main(["--out", str(out), "--seed", "11", *fast,
                         "closed-form", "--gains", str(gains), "--p-max", "10.0"]) == 0
        assert cli.main(["--out", str(out), "--seed", "11", *fast, "wmmse-curve"]) == 0
        assert cli.main(["--out", str(out), "--seed", "11", *fast, "pretrain-bv"]) == 0
        outputs[tag] = {
            name: (out / name).read_bytes()
            for name in ("closed_form.csv", "wmmse_curve.csv", "wmmse_binary.csv",
                         "bv_labels.csv", "bv_summary.csv")
        }
    assert outputs["a"] == outputs["b"]
    report(9, "byte-identical CSVs across re-runs of closed-form, wmmse-curve, pretrain-bv;")
