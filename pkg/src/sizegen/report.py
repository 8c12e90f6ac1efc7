"""Figure rendering for the command-line reports.

Every figure is derived from the same rows that go into the delimited
output and is written next to it. CSV stays the canonical record; the
figures are for eyeballing runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update(
    {
        "figure.figsize": (6.0, 3.6),
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "savefig.dpi": 130,
        "savefig.bbox": "tight",
    }
)


def curve_figure(points, path):
    """Full-power probability vs direct gain, one line per user count."""
    fig, ax = plt.subplots()
    by_k = {}
    for p in points:
        by_k.setdefault(p.k, []).append(p)
    for k, rows in sorted(by_k.items()):
        rows = sorted(rows, key=lambda r: r.g_center)
        xs = [r.g_center for r in rows if r.prob is not None]
        ys = [r.prob for r in rows if r.prob is not None]
        ax.plot(xs, ys, marker="o", label=f"K={k}")
    ax.set_xlabel("direct channel gain")
    ax.set_ylabel("probability of full power")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def loss_figure(trace, path):
    """Training objective and validation availability over steps."""
    fig, ax = plt.subplots()
    steps = [t for t, _, _ in trace]
    losses = [l for _, l, _ in trace]
    ax.plot(steps, losses, lw=0.8, label="objective")
    ax.set_xlabel("step")
    ax.set_ylabel("batch objective")
    marked = [(t, a) for t, _, a in trace if a is not None]
    if marked:
        ax2 = ax.twinx()
        ax2.plot(*zip(*marked), color="tab:red", marker="s", ms=3, lw=1.0,
                 label="validation availability")
        ax2.set_ylabel("availability")
        ax2.set_ylim(-0.05, 1.05)
        ax2.grid(False)
    fig.savefig(path)
    plt.close(fig)


def metrics_figure(rows_by_method, path):
    """Availability (bars) and total bandwidth (line) per user count."""
    fig, (ax_a, ax_w) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    methods = sorted(rows_by_method)
    width = 0.8 / max(len(methods), 1)
    all_ks = sorted({r.k for rows in rows_by_method.values() for r in rows})
    for i, method in enumerate(methods):
        rows = {r.k: r for r in rows_by_method[method]}
        pos = np.arange(len(all_ks)) + (i - (len(methods) - 1) / 2) * width
        ax_a.bar(pos, [rows[k].availability if k in rows else np.nan for k in all_ks],
                 width=width, label=method)
        ax_w.plot(all_ks, [rows[k].total_bandwidth_mhz if k in rows else np.nan for k in all_ks],
                  marker="o", label=method)
    ax_a.set_xticks(np.arange(len(all_ks)), [str(k) for k in all_ks])
    ax_a.set_xlabel("users K")
    ax_a.set_ylabel("availability")
    ax_a.set_ylim(0, 1.05)
    ax_w.set_xlabel("users K")
    ax_w.set_ylabel("total bandwidth (MHz)")
    ax_w.set_xscale("log")
    ax_a.legend(fontsize=7)
    fig.savefig(path)
    plt.close(fig)


def bv_fit_figure(labels_hz, predictions_hz, path):
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    labels = np.asarray(labels_hz) / 1e6
    preds = np.asarray(predictions_hz) / 1e6
    lim = (0.0, max(labels.max(), preds.max()) * 1.05)
    ax.plot(lim, lim, color="k", lw=0.8)
    ax.scatter(labels, preds, s=6, alpha=0.4)
    ax.set_xlabel("label bandwidth (MHz)")
    ax.set_ylabel("fitted bandwidth (MHz)")
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    fig.savefig(path)
    plt.close(fig)


def checks_figure(check_rows, path):
    fig, ax = plt.subplots(figsize=(6.5, 0.5 + 0.4 * len(check_rows)))
    names = [r.name for r in check_rows]
    ratios = []
    for r in check_rows:
        if r.comparison == "<=":
            ratios.append(r.statistic / r.threshold if r.threshold else 0.0)
        else:
            ratios.append(r.threshold / r.statistic if r.statistic else np.inf)
    colors = ["tab:green" if r.passed else "tab:red" for r in check_rows]
    y = np.arange(len(names))
    ax.barh(y, np.clip(ratios, 1e-12, None), color=colors)
    ax.axvline(1.0, color="k", lw=1.0)
    ax.set_yticks(y, names, fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("statistic / budget (pass < 1)")
    ax.invert_yaxis()
    fig.savefig(path)
    plt.close(fig)
