"""The bandwidth scale factor: a pre-trained map (alpha, K) -> Hz.

A per-user optimal bandwidth is asymptotically a function of the user's own
large-scale gain and the user count alone. This module produces that
function two ways: exactly, by bisecting the QoS-boundary equation under an
equal power split (labels), and as a small fully-connected net fitted to
those labels. The fitted net later multiplies the equivariant bandwidth
policy's outputs, supplying the growth with K that a size-invariant network
cannot express.

Label bisection evaluates the effective capacity on one fixed, seeded
fading sample set (common random numbers), making the capacity a
deterministic, monotone-on-the-bracket function of bandwidth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import urllc
from .errors import ContractViolation, DomainError, InfeasibleError, TrainingError

LABEL_DRAWS = 2000
LABEL_SEED = 902_143  # fixed stream for the common-random-number fading set
ALPHA_SHIFT = 30.0  # ln(alpha) + 30 keeps the gain feature O(1)
UNIT_HZ = 1e6  # the net learns bandwidth in these units

NET_FORMAT = "sizegen-model-v1"


@dataclass(frozen=True)
class BvSample:
    alpha: float
    k: int
    bandwidth_hz: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.k >= 1 and self.bandwidth_hz > 0):
            raise DomainError("BvSample fields must be positive")


def label_fading_set(cfg, n_draws=LABEL_DRAWS, seed=LABEL_SEED):
    return urllc.fading_gains(np.random.default_rng(seed), cfg, int(n_draws))


def bv_labels(alphas, ks, cfg, tol_rel=1e-3, draws=None, eps=None, max_growth=80, max_iters=200):
    """Vectorized boundary bandwidths: the smallest B with capacity == demand.

    For each (alpha, K) pair, power is the equal split p_max/K and the QoS
    target derives from `eps` (default: the training reliability target).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.float64)
    if alphas.shape != ks.shape:
        raise DomainError("alphas and ks must have matching shapes")
    if (alphas <= 0).any() or (ks < 1).any():
        raise DomainError("need alpha > 0 and k >= 1")
    q = urllc.qos_params(cfg.eps_d if eps is None else eps, cfg)
    if draws is None:
        draws = label_fading_set(cfg)
    power = cfg.p_max_w / ks
    target = q.effective_bw
    tol = tol_rel * target

    def capacity(bw):
        return np.atleast_1d(
            urllc.effective_capacity(alphas, power, bw, q, cfg, draws=draws)
        )

    lo = np.full(alphas.shape, 1.0)
    hi = np.full(alphas.shape, 2e4)
    for _ in range(max_growth):
        short = capacity(hi) < target
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2.0 * hi, hi)
    else:
        raise InfeasibleError(
            "no bandwidth bracket found: capacity stays below the required "
            f"service rate {target:g} packets/frame"
        )
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        cap = capacity(mid)
        if (np.abs(cap - target) <= tol).all():
            return mid if mid.shape else float(mid)
        below = cap < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    raise InfeasibleError(f"bisection residual did not reach {tol:g} within {max_iters} iterations")


def bv_label(alpha, k, cfg, tol_rel=1e-3, draws=None, eps=None):
    """Scalar convenience wrapper around bv_labels."""
    out = bv_labels(np.array([alpha]), np.array([float(k)]), cfg, tol_rel, draws, eps)
    return float(out[0])


def make_bv_dataset(n, cfg, k_max, seed, tol_rel=1e-3, eps=None):
    """n labelled samples with alpha from the deployment's path-loss law and
    K uniform on [1, k_max]."""
    rng = np.random.default_rng(seed)
    d = rng.uniform(cfg.d_min_m, cfg.cell_radius_m, size=n)
    alphas = 10.0 ** (-(cfg.pathloss_offset_db + cfg.pathloss_slope_db * np.log10(d)) / 10.0)
    ks = rng.integers(1, k_max + 1, size=n).astype(np.float64)
    labels = bv_labels(alphas, ks, cfg, tol_rel=tol_rel, eps=eps)
    return [BvSample(float(a), int(k), float(b)) for a, k, b in zip(alphas, ks, labels)]


class BandwidthScaleNet:
    """FNN (alpha, K) -> bandwidth in Hz, positive by construction.

    Inputs are scaled to (ln(alpha) + 30, K / k_max); the softplus output is
    in MHz-sized units.
    """

    def __init__(self, mlp, k_max):
        if k_max < 1:
            raise DomainError("k_max must be >= 1")
        self.mlp = mlp
        self.k_max = int(k_max)

    @classmethod
    def build(cls, seed, k_max, hidden=(200, 100, 100, 50)):
        rng = np.random.default_rng(seed)
        mlp = ad.Mlp.build(
            rng, [2, *hidden, 1], hidden_activation="leaky_relu", out_activation="softplus"
        )
        return cls(mlp, k_max)

    def parameters(self):
        return self.mlp.parameters()

    def features(self, alphas, ks):
        alphas = np.asarray(alphas, dtype=np.float64)
        ks = np.asarray(ks, dtype=np.float64)
        return np.stack(
            [np.log(alphas) + ALPHA_SHIFT, ks / self.k_max], axis=-1
        )

    def forward_units(self, alphas, ks):
        """Tensor of outputs in UNIT_HZ units (for training)."""
        feats = self.features(alphas, ks)
        out = self.mlp.forward(feats)
        return ad.reshape(out, out.data.shape[:-1])

    def bandwidth_hz(self, alphas, ks):
        """Frozen evaluation; ndarray (or float for scalar inputs) in Hz."""
        with ad.no_grad():
            out = self.forward_units(alphas, ks).data * UNIT_HZ
        return float(out) if out.ndim == 0 else out

    def save(self, path):
        meta = {
            "format": NET_FORMAT,
            "kind": "bandwidth_scale",
            "k_max": self.k_max,
            "widths": self.mlp.widths,
            "hidden_activation": self.mlp.hidden_activation,
            "out_activation": self.mlp.out_activation,
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, d in enumerate(self.mlp.dense):
            arrays[f"w{i}"] = d.weight.data
            arrays[f"b{i}"] = d.bias.data
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as blob:
            meta = json.loads(bytes(blob["meta"]).decode())
            if meta.get("format") != NET_FORMAT or meta.get("kind") != "bandwidth_scale":
                raise ContractViolation(f"not a bandwidth-scale net file: {path}")
            dense = []
            for i in range(len(meta["widths"]) - 1):
                dense.append(ad.DenseParam(blob[f"w{i}"], blob[f"b{i}"]))
        mlp = ad.Mlp(dense, meta["hidden_activation"], meta["out_activation"])
        return cls(mlp, meta["k_max"])


@dataclass
class PretrainResult:
    net: BandwidthScaleNet
    val_mse: float  # in UNIT_HZ^2
    label_variance: float  # same units, over the validation split
    meets_target: bool
    trace: list  # (epoch, train mse) pairs


def pretrain_bv(
    samples,
    net,
    epochs=2500,
    schedule=None,
    batch_size=100,
    seed=0,
    val_fraction=0.1,
    mse_variance_target=0.01,
):
    """Fit the scale net to labelled samples by mini-batch Adam on MSE.

    Deterministic in `seed`. Raises TrainingError on divergence. The
    returned validation MSE is in the net's internal (MHz-sized) units and
    is expected to land below `mse_variance_target` times the label
    variance (reported via `meets_target`).
    """
    if not samples:
        raise DomainError("empty pretraining dataset")
    schedule = schedule or ad.LrSchedule(base=0.001, decay=0.001)
    alphas = np.array([s.alpha for s in samples])
    ks = np.array([float(s.k) for s in samples])
    labels = np.array([s.bandwidth_hz for s in samples]) / UNIT_HZ

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(val_fraction * len(samples)))) if len(samples) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
    params = net.parameters()
    optimizer = ad.AdamState(params)
    t = 0
    trace = []
    for epoch in range(epochs):
        perm = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train_idx.size, batch_size):
            idx = train_idx[perm[start : start + batch_size]]
            ad.zero_grads(params)
            out = net.forward_units(alphas[idx], ks[idx])
            err = ad.sub(out, labels[idx])
            loss = ad.tmean(ad.mul(err, err))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("pretraining loss became non-finite", iteration=t)
            loss.backward()
            # rate schedule indexed by epoch, not step: per-step decay
            # freezes the fit an order of magnitude short of the target
            optimizer.step([p.grad for p in params], schedule, epoch, "descend")
            t += 1
            epoch_loss += value
            n_batches += 1
        if epoch % max(1, epochs // 20) == 0 or epoch == epochs - 1:
            trace.append((epoch, epoch_loss / max(n_batches, 1)))
    if val_idx.size:
        with ad.no_grad():
            pred = net.forward_units(alphas[val_idx], ks[val_idx]).data
        val_mse = float(np.mean((pred - labels[val_idx]) ** 2))
        label_var = float(np.var(labels[val_idx]))
        meets = val_mse <= mse_variance_target * label_var
    else:
        val_mse, label_var, meets = float("nan"), float("nan"), False
    return PretrainResult(
        net=net, val_mse=val_mse, label_variance=label_var, meets_target=meets, trace=trace
    )


def unsupervised_bv_loss(scale_fn, alphas, ks, cfg, n_mc=2000, seed=0, eps=None):
    """Mean squared QoS residual of a candidate scale function.

    `scale_fn(alphas, ks) -> Hz` (a BandwidthScaleNet's bandwidth_hz or any
    callable); the residual is (required rate - effective capacity) at the
    equal power split, squared and averaged over the batch.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.float64)
    q = urllc.qos_params(cfg.eps_d if eps is None else eps, cfg)
    draws = urllc.fading_gains(np.random.default_rng(seed), cfg, int(n_mc))
    bw = np.asarray(scale_fn(alphas, ks), dtype=np.float64)
    cap = urllc.effective_capacity(alphas, cfg.p_max_w / ks, bw, q, cfg, draws=draws)
    return float(np.mean((q.effective_bw - cap) ** 2))


def save_labels(path, samples):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "K", "B_v_star_hz"])
        for s in samples:
            writer.writerow([repr(s.alpha), s.k, repr(s.bandwidth_hz)])


def load_labels(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["alpha", "K", "B_v_star_hz"]:
            raise DomainError(f"unexpected label-cache header: {header}")
        for row in reader:
            out.append(BvSample(float(row[0]), int(row[1]), float(row[2])))
    return out
