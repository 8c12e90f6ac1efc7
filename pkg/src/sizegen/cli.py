"""Command-line front end.

Subcommands: closed-form, wmmse-curve, pretrain-bv, train, evaluate,
theory-checks, all-tables. Every command is deterministic given (--seed,
config); outputs are CSV files (with the seed and config hash in a header
comment) plus rendered figures alongside them.

Exit codes: 0 success, 1 numerical or infeasibility failure (including a
failed property check), 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, autodiff
from . import config as config_mod
from . import closed_form, report, scaling, size_checks, training, urllc, wmmse
from .errors import (
    ContractViolation,
    DependencyError,
    DomainError,
    InfeasibleError,
    NumericalError,
    TrainingError,
)

BV_NET_FILE = "bv_net.npz"
BV_LABELS_FILE = "bv_labels.csv"
POLICY_FILE_TEMPLATE = "policy_{method}.npz"


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


class Workspace:
    """Output directory plus the header stamped into every CSV."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = Path(cfg.resolved_out_dir())
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = [
            f"sizegen v{__version__}",
            f"seed={cfg.seed}",
            f"config={config_mod.config_hash(cfg)}",
        ]

    def path(self, name):
        return self.dir / name

    def write_csv(self, name, columns, rows):
        path = self.path(name)
        with open(path, "w", newline="") as fh:
            for line in self.header:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        return path

    def write_manifest(self, command, extra=None):
        manifest = {
            "tool": f"sizegen v{__version__}",
            "command": command,
            "seed": self.cfg.seed,
            "config_hash": config_mod.config_hash(self.cfg),
            "config": config_mod.to_dict(self.cfg),
        }
        if extra:
            manifest.update(extra)
        path = self.path(f"manifest_{command.replace('-', '_')}.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return path


def _load_gains(path):
    try:
        rows = []
        with open(path, newline="") as fh:
            for record in csv.reader(fh):
                if not record or record[0].startswith("#"):
                    continue
                rows.extend(float(cell) for cell in record if cell.strip() != "")
        if not rows:
            raise DomainError(f"no gains found in {path}")
        return np.array(rows)
    except (OSError, ValueError) as err:
        raise DomainError(f"cannot parse gains file {path}: {err}") from err


def cmd_closed_form(cfg, args, ws):
    gains = _load_gains(args.gains)
    if args.mode == "min-power":
        problem = closed_form.SimpleAllocProblem(
            gains=gains, bandwidth_hz=args.bandwidth, rate_bps=args.rate, noise_psd=args.noise
        )
        powers = closed_form.solve_min_power(problem)
        bandwidth = args.bandwidth
    else:
        problem = closed_form.JointAllocProblem(
            gains=gains, rate_bps=args.rate, noise_psd=args.noise, p_max=args.p_max
        )
        powers, bandwidth = closed_form.solve_joint(problem)
    rates = closed_form.rate_bps(powers, gains, bandwidth, args.noise)
    residual = np.abs(rates - args.rate) / args.rate
    rows = [
        (i, gains[i], powers[i], bandwidth, residual[i]) for i in range(len(gains))
    ]
    path = ws.write_csv(
        "closed_form.csv", ["user", "gain", "power_w", "bandwidth_hz", "rate_residual_rel"], rows
    )
    ws.write_manifest("closed-form")
    print(f"wrote {path} (max residual {residual.max():.3e})")
    return 0


def cmd_wmmse_curve(cfg, args, ws):
    w = cfg.wmmse
    points = wmmse.full_power_curve(
        w.k_list,
        w.realizations,
        g_grid=w.g_grid,
        delta=w.delta,
        p_max=w.p_max,
        noise=w.noise,
        seed=cfg.seed,
        max_iters=w.max_iters,
        tol=w.tol,
        gain_model=w.gain_model,
        threads=cfg.threads,
    )
    curve_path = ws.write_csv(
        "wmmse_curve.csv",
        ["K", "g_center", "prob", "count"],
        [(p.k, p.g_center, p.prob, p.count) for p in points],
    )
    fractions = wmmse.binary_fraction_table(
        w.binary_k_list,
        w.binary_realizations,
        p_max=w.p_max,
        noise=w.noise,
        seed=cfg.seed,
        max_iters=w.max_iters,
        tol=w.tol,
        gain_model=w.gain_model,
    )
    ws.write_csv("wmmse_binary.csv", ["K", "binary_fraction", "realizations"], fractions)
    report.curve_figure(points, ws.path("wmmse_curve.png"))
    ws.write_manifest("wmmse-curve")
    print(f"wrote {curve_path} and wmmse_binary.csv; binary fractions: "
          + ", ".join(f"K={k}: {f:.3f}" for k, f, _ in fractions))
    return 0


def cmd_pretrain_bv(cfg, args, ws):
    b = cfg.bv
    labels_path = ws.path(BV_LABELS_FILE)
    if args.labels:
        samples = scaling.load_labels(args.labels)
        print(f"loaded {len(samples)} cached labels from {args.labels}")
    else:
        samples = scaling.make_bv_dataset(
            b.samples, cfg.system, b.k_max, (cfg.seed, 60), tol_rel=b.label_tol_rel
        )
        scaling.save_labels(labels_path, samples)
        print(f"solved {len(samples)} labels -> {labels_path}")
    net = scaling.BandwidthScaleNet.build((cfg.seed, 61), b.k_max, hidden=b.hidden)
    result = scaling.pretrain_bv(
        samples,
        net,
        epochs=b.epochs,
        schedule=autodiff.LrSchedule(b.lr_base, b.lr_decay),
        batch_size=b.batch_size,
        seed=(cfg.seed, 62),
        val_fraction=b.val_fraction,
        mse_variance_target=b.mse_variance_target,
    )
    net.save(ws.path(BV_NET_FILE))
    alphas = np.array([s.alpha for s in samples])
    ks = np.array([float(s.k) for s in samples])
    labels_hz = np.array([s.bandwidth_hz for s in samples])
    preds_hz = net.bandwidth_hz(alphas, ks)
    rel = np.abs(preds_hz - labels_hz) / labels_hz
    ws.write_csv(
        "bv_summary.csv",
        ["val_mse", "label_variance", "mse_over_variance", "meets_target",
         "rel_err_p50", "rel_err_p90"],
        [(result.val_mse, result.label_variance, result.val_mse / result.label_variance,
          result.meets_target, float(np.quantile(rel, 0.5)), float(np.quantile(rel, 0.9)))],
    )
    report.bv_fit_figure(labels_hz, preds_hz, ws.path("bv_fit.png"))
    ws.write_manifest("pretrain-bv")
    print(
        f"scale net -> {ws.path(BV_NET_FILE)}  val_mse/var="
        f"{result.val_mse / result.label_variance:.4f} (target <= {b.mse_variance_target})"
    )
    return 0


def _system_for_method(cfg, method):
    if method == "m_penn":
        return urllc.with_eps_d(cfg.system, cfg.m_penn_eps_d)
    if method == "padded_fnn":
        return urllc.with_eps_d(cfg.system, cfg.fnn_eps_d)
    return cfg.system


def _load_scale_net(ws, needed):
    path = ws.path(BV_NET_FILE)
    if not path.exists():
        if needed:
            raise DependencyError(
                f"no scale net at {path}; run `sizegen pretrain-bv` first"
            )
        return None
    return scaling.BandwidthScaleNet.load(path)


def cmd_train(cfg, args, ws):
    method = cfg.train.method
    scale_net = _load_scale_net(ws, needed=method == "proposed")
    system = _system_for_method(cfg, method)
    tc = replace(cfg.train, seed=(cfg.seed, 70)) if args.fresh_seed else cfg.train
    datasets = training.generate_datasets(tc, system)
    print(
        f"training method={method} eps_d={system.eps_d:g} "
        f"({len(datasets.train)} samples, {tc.epochs} epochs)"
    )
    result = training.train(
        tc,
        system,
        datasets,
        scale_net=scale_net,
        progress=lambda e, s, l, a: print(
            f"  epoch {e}/{tc.epochs} objective={l:.4f} val_availability={a:.3f}", flush=True
        ),
    )
    policy_path = ws.path(POLICY_FILE_TEMPLATE.format(method=method))
    training.save_policy_set(policy_path, result.policy_set, method)
    ws.write_csv(
        f"loss_trace_{method}.csv",
        ["step", "objective", "val_availability"],
        result.trace,
    )
    report.loss_figure(result.trace, ws.path(f"loss_{method}.png"))
    ws.write_manifest("train", {"method": method, "policy_file": policy_path.name})
    print(f"saved policy -> {policy_path}")
    return 0


def cmd_evaluate(cfg, args, ws):
    methods = args.methods or [cfg.train.method]
    rows_by_method = {}
    all_rows = []
    for method in methods:
        policy_path = ws.path(POLICY_FILE_TEMPLATE.format(method=method))
        if not policy_path.exists():
            raise DependencyError(
                f"no trained policy at {policy_path}; run `sizegen train --set "
                f"train.method={method}` first"
            )
        scale_net = _load_scale_net(ws, needed=method == "proposed")
        policy_set, _ = training.load_policy_set(policy_path, scale_net=scale_net)
        system = _system_for_method(cfg, method)
        tc = cfg.train
        datasets = training.generate_datasets(tc, system)
        rows = training.evaluate(
            policy_set, datasets.test, system, n_mc=tc.n_mc_eval, seed=(cfg.seed, 80)
        )
        rows_by_method[method] = rows
        all_rows.extend(
            (method, r.k, r.availability, r.total_bandwidth_mhz, r.n_samples) for r in rows
        )
        print(
            f"{method}: "
            + "  ".join(f"K={r.k}: A={r.availability:.3f} W={r.total_bandwidth_mhz:.3f}MHz"
                        for r in rows)
        )
    path = ws.write_csv(
        "metrics.csv", ["method", "K", "availability", "total_bandwidth_mhz", "n_samples"], all_rows
    )
    report.metrics_figure(rows_by_method, ws.path("metrics.png"))
    ws.write_manifest("evaluate", {"methods": methods})
    print(f"wrote {path}")
    return 0


def cmd_theory_checks(cfg, args, ws):
    rows = size_checks.run_suite(seed=cfg.seed)
    ws.write_csv(
        "theory_checks.csv",
        ["check", "statistic", "threshold", "comparison", "passed"],
        [(r.name, r.statistic, r.threshold, r.comparison, "PASS" if r.passed else "FAIL")
         for r in rows],
    )
    report.checks_figure(rows, ws.path("theory_checks.png"))
    ws.write_manifest("theory-checks")
    failed = [r for r in rows if not r.passed]
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.statistic:.6g} {r.comparison} {r.threshold:g}")
    return 1 if failed else 0


def cmd_all_tables(cfg, args, ws):
    code = cmd_theory_checks(cfg, args, ws)
    cmd_wmmse_curve(cfg, args, ws)
    args.labels = None
    cmd_pretrain_bv(cfg, args, ws)
    for method in ("proposed", "m_penn"):
        method_cfg = config_mod.from_dict(
            {**config_mod.to_dict(cfg), "train": {**config_mod.to_dict(cfg)["train"], "method": method}}
        )
        args.fresh_seed = False
        cmd_train(method_cfg, args, ws)
    args.methods = ["proposed", "m_penn"]
    cmd_evaluate(cfg, args, ws)
    return code


COMMANDS = {
    "closed-form": cmd_closed_form,
    "wmmse-curve": cmd_wmmse_curve,
    "pretrain-bv": cmd_pretrain_bv,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "theory-checks": cmd_theory_checks,
    "all-tables": cmd_all_tables,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sizegen",
        description="Size-generalizable power and bandwidth allocation experiments",
    )
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (default $SIZEGEN_OUT or ./out)")
    parser.add_argument("--threads", type=int, help="worker processes for batched sweeps")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="dotted config override, e.g. train.epochs=100",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("closed-form", help="solve the convex allocation problems")
    p.add_argument("--gains", required=True, help="CSV of per-user channel gains")
    p.add_argument("--mode", choices=["min-power", "joint"], default="joint")
    p.add_argument("--bandwidth", type=float, default=1.0, help="shared bandwidth (min-power)")
    p.add_argument("--rate", type=float, default=1.0, help="per-user rate floor")
    p.add_argument("--noise", type=float, default=1.0, help="noise power spectral density")
    p.add_argument("--p-max", type=float, default=1.0, help="power budget (joint)")

    sub.add_parser("wmmse-curve", help="full-power probability curve and binary stats")

    p = sub.add_parser("pretrain-bv", help="solve labels and fit the bandwidth scale net")
    p.add_argument("--labels", help="reuse a label cache CSV instead of solving")

    p = sub.add_parser("train", help="primal-dual training of the allocation policies")
    p.add_argument("--fresh-seed", action="store_true",
                   help="derive a fresh training stream from the seed")

    p = sub.add_parser("evaluate", help="availability / bandwidth metrics on the test set")
    p.add_argument("--methods", nargs="*", help="policy files to evaluate (default: config method)")

    sub.add_parser("theory-checks", help="size-behavior property suite (PASS/FAIL)")
    sub.add_parser("all-tables", help="run the full pipeline end to end")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "labels"):
        args.labels = None
    if not hasattr(args, "fresh_seed"):
        args.fresh_seed = False
    if not hasattr(args, "methods"):
        args.methods = None
    try:
        cfg = config_mod.load(args.config)
        if args.set:
            cfg = config_mod.apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
        if args.threads is not None:
            cfg = replace(cfg, threads=args.threads)
        ws = Workspace(cfg)
        return COMMANDS[args.command](cfg, args, ws)
    except (DomainError, ContractViolation, FileNotFoundError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return 2
    except (InfeasibleError, NumericalError, TrainingError, DependencyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
