"""Permutation-equivariant networks over sets of objects.

Each layer applies one shared affine map to every object's own state and a
second shared map to an aggregate of the *other* objects' states:

    out_k = act( U h_k + V agg_{j != k}(h_j) + c )

The `mean` aggregator divides the (K-1)-term sum by K (not K-1); `sum`
leaves it unscaled; `max` takes the elementwise maximum. With a single
object the aggregate is identically zero for all three kinds.

Output heads: a simplex head that maps K raw scores through a stabilized
softmax and scales by a power budget; a `softplus` head for positive
outputs; `softplus_scaled` which additionally multiplies each output by a
caller-supplied positive factor (treated as constant under backprop); and
`identity` for raw scores.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractViolation

AGGREGATORS = ("mean", "sum", "max")
HEADS = ("softmax_power", "softplus", "softplus_scaled", "identity")

MODEL_FORMAT = "sizegen-model-v1"


class PennLayer:
    """One weight-shared equivariant layer.

    `u` and `v` are (out_width, in_width); `c` is (out_width,). The same
    triple serves every object, which is what makes the layer equivariant.
    """

    def __init__(self, u, v, c, activation="leaky_relu", aggregator="mean"):
        self.u = u if isinstance(u, Tensor) else Tensor(u, requires_grad=True)
        self.v = v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
        self.c = c if isinstance(c, Tensor) else Tensor(c, requires_grad=True)
        if self.u.data.shape != self.v.data.shape:
            raise ContractViolation("U and V must share a shape")
        if self.c.data.shape != (self.u.data.shape[0],):
            raise ContractViolation("bias width must match the layer out-width")
        if aggregator not in AGGREGATORS:
            raise ContractViolation(f"unknown aggregator {aggregator!r}")
        self.activation = activation
        self.aggregator = aggregator

    @property
    def in_width(self):
        return self.u.data.shape[1]

    @property
    def out_width(self):
        return self.u.data.shape[0]

    def parameters(self):
        return [self.u, self.v, self.c]

    def forward(self, h):
        """h: (..., K, in_width) -> (..., K, out_width)."""
        h = as_tensor(h)
        if h.data.ndim < 2:
            raise ContractViolation("layer input must be (..., K, width)")
        k = h.data.shape[-2]
        if k == 0:
            raise ContractViolation("empty input: K must be >= 1")
        if h.data.shape[-1] != self.in_width:
            raise ContractViolation(
                f"layer width mismatch: got {h.data.shape[-1]}, expected {self.in_width}"
            )
        if self.aggregator == "mean":
            agg = ad.mul(ad.sum_others(h), 1.0 / k)
        elif self.aggregator == "sum":
            agg = ad.sum_others(h)
        else:
            agg = ad.max_others(h)
        pre = ad.add(
            ad.add(ad.matmul(h, ad.transpose2d(self.u)), ad.matmul(agg, ad.transpose2d(self.v))),
            self.c,
        )
        return ad.activation(self.activation, pre)


def init_layer(rng, out_width, in_width, activation="leaky_relu", aggregator="mean"):
    bound = 1.0 / np.sqrt(in_width)
    u = rng.uniform(-bound, bound, size=(out_width, in_width))
    v = rng.uniform(-bound, bound, size=(out_width, in_width))
    c = rng.uniform(-bound, bound, size=(out_width,))
    return PennLayer(u, v, c, activation=activation, aggregator=aggregator)


def softmax_power_head(raw, p_max):
    """Map K raw scores to K positive powers summing exactly to `p_max`.

    Shift-invariant in the raw scores; stabilized by subtracting the max.
    Accepts (..., K) tensors.
    """
    if p_max <= 0:
        raise ContractViolation("p_max must be positive")
    raw = as_tensor(raw)
    if raw.data.shape[-1] < 1:
        raise ContractViolation("need at least one object")
    return ad.mul(ad.softmax_last(raw), p_max)


class PennModel:
    """A stack of equivariant layers plus an output head.

    Per-object feature width of the first layer must match the input; the
    final layer must have out-width 1 (the head consumes one score per
    object).
    """

    def __init__(self, layers, head="identity", p_max=None):
        if head not in HEADS:
            raise ContractViolation(f"unknown head {head!r}")
        if head == "softmax_power" and (p_max is None or p_max <= 0):
            raise ContractViolation("softmax_power head requires a positive p_max")
        self.layers = list(layers)
        self.head = head
        self.p_max = p_max

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, x, scale=None):
        """x: (..., K, feat) -> per-object outputs (..., K).

        `scale` is required (positive, shape-compatible with the output) iff
        the head is `softplus_scaled`; it multiplies the softplus output and
        is constant with respect to the model parameters.
        """
        h = as_tensor(x)
        for layer in self.layers:
            h = layer.forward(h)
        if h.data.shape[-1] != 1:
            raise ContractViolation("final layer must have out-width 1")
        raw = ad.reshape(h, h.data.shape[:-1])
        if self.head == "identity":
            return raw
        if self.head == "softmax_power":
            return softmax_power_head(raw, self.p_max)
        out = ad.softplus(raw)
        if self.head == "softplus":
            if scale is not None:
                raise ContractViolation("scale is only valid for the softplus_scaled head")
            return out
        # softplus_scaled
        if scale is None:
            raise ContractViolation("softplus_scaled head requires a scale")
        scale = np.asarray(scale, dtype=np.float64)
        if scale.shape != out.data.shape:
            raise ContractViolation(
                f"scale shape {scale.shape} does not match output shape {out.data.shape}"
            )
        if not (scale > 0).all():
            raise ContractViolation("scale entries must be positive")
        return ad.mul(out, scale)


def forward_policy(model, x, scale=None):
    """Evaluate a frozen model without building a tape; returns an ndarray."""
    with ad.no_grad():
        return model.forward(x, scale=scale).data


def build_penn(rng, hidden_widths=(4,), feat_width=1, head="softplus", p_max=None,
               aggregator="mean", hidden_activation="leaky_relu"):
    """The stack used throughout: hidden equivariant layers plus a width-1
    linear equivariant output layer feeding the head."""
    widths = [feat_width] + list(hidden_widths) + [1]
    layers = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        layers.append(
            init_layer(
                rng,
                widths[i + 1],
                widths[i],
                activation="identity" if last else hidden_activation,
                aggregator=aggregator,
            )
        )
    return PennModel(layers, head=head, p_max=p_max)


def permute_objects(x, perm):
    """Apply a permutation along the object axis (-2 of a (..., K, F) array)."""
    return np.take(np.asarray(x), perm, axis=-2)


# ---------------------------------------------------------------------------
# persistence: exact round-trip of shapes, kinds and float64 parameters


def save_model(path, model):
    meta = {
        "format": MODEL_FORMAT,
        "kind": "penn",
        "head": model.head,
        "p_max": model.p_max,
        "layers": [
            {"activation": layer.activation, "aggregator": layer.aggregator}
            for layer in model.layers
        ],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, layer in enumerate(model.layers):
        arrays[f"u{i}"] = layer.u.data
        arrays[f"v{i}"] = layer.v.data
        arrays[f"c{i}"] = layer.c.data
    np.savez(path, **arrays)


def load_model(path):
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        if meta.get("format") != MODEL_FORMAT:
            raise ContractViolation(f"unsupported model file format: {meta.get('format')!r}")
        if meta.get("kind") != "penn":
            raise ContractViolation(f"not an equivariant model file: kind={meta.get('kind')!r}")
        layers = []
        for i, spec in enumerate(meta["layers"]):
            layers.append(
                PennLayer(
                    blob[f"u{i}"],
                    blob[f"v{i}"],
                    blob[f"c{i}"],
                    activation=spec["activation"],
                    aggregator=spec["aggregator"],
                )
            )
    return PennModel(layers, head=meta["head"], p_max=meta["p_max"])
