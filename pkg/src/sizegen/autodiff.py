"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: every operation returns a `Tensor` holding the forward value
and a closure that routes the upstream gradient to its parents. Calling
`backward()` on a scalar result fills `.grad` on every parameter that was
used to compute it. The op set is exactly what the networks and training
objectives in this package need; nothing more.

All arithmetic is float64. Broadcasting follows numpy; gradients of
broadcast operands are summed back to the operand's shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractViolation

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Sum `grad` over axes that numpy broadcasting expanded, back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, upstream=None):
        """Accumulate gradients of this (scalar) value into the graph leaves.

        A trace can be consumed once; a second backward over the same nodes
        raises ContractViolation.
        """
        if self._spent:
            raise ContractViolation("backward() called on an already-consumed trace")
        if upstream is None:
            if self.data.ndim != 0:
                raise ContractViolation("backward() without upstream requires a scalar result")
            upstream = np.ones((), dtype=np.float64)
        else:
            upstream = np.asarray(upstream, dtype=np.float64)
            if upstream.shape != self.data.shape:
                raise ContractViolation("upstream gradient shape mismatch")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = upstream
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._spent = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    # gradient arrays are never mutated in place, so aliasing is safe
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), back)


def matmul(a, b):
    """a @ b with b strictly 2-D; a may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2:
        raise ContractViolation("matmul right operand must be 2-D")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )

    def back(g):
        _accum(a, g @ b.data.T)
        ga = a.data.reshape(-1, a.data.shape[-1])
        gg = g.reshape(-1, g.shape[-1])
        _accum(b, ga.T @ gg)

    return _make(a.data @ b.data, (a, b), back)


def transpose2d(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("transpose2d requires a 2-D tensor")

    def back(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def back(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), back)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def texp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def tlog(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def tlog1p(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, g / (1.0 + a.data))

    return _make(np.log1p(a.data), (a,), back)


def tsqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * (0.5 / out_data))

    return _make(out_data, (a,), back)


def softplus(a):
    """log(1 + e^x), computed stably; strictly positive for finite x."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def back(g):
        _accum(a, g * expit(a.data))

    return _make(out_data, (a,), back)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data >= 0

    def back(g):
        _accum(a, g * np.where(pos, 1.0, slope))

    return _make(np.where(pos, a.data, slope * a.data), (a,), back)


def relu(a):
    """max(x, 0); the clamped region carries zero gradient."""
    a = as_tensor(a)
    pos = a.data > 0

    def back(g):
        _accum(a, g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), back)


def sum_others(a, axis=-2):
    """For each slot k along `axis`: sum of all other slots.

    Linear and symmetric, so the backward rule has the same form as the
    forward. A single slot along `axis` yields zeros (empty sum).
    """
    a = as_tensor(a)

    def back(g):
        _accum(a, g.sum(axis=axis, keepdims=True) - g)

    return _make(a.data.sum(axis=axis, keepdims=True) - a.data, (a,), back)


def max_others(a, axis=-2):
    """For each slot k along `axis`: elementwise max over the other slots.

    Defined as zeros when the axis has a single slot (empty max, matching
    the empty-sum convention). Gradient routes to the argmax slot.
    """
    a = as_tensor(a)
    x = np.moveaxis(a.data, axis, -2)
    k = x.shape[-2]
    if k == 1:
        def back_zero(g):
            _accum(a, np.zeros_like(a.data))

        return _make(np.zeros_like(a.data), (a,), back_zero)

    part = np.argpartition(x, k - 2, axis=-2)[..., -2:, :]  # top-2 indices, unordered
    vals = np.take_along_axis(x, part, axis=-2)
    first_is_top = vals[..., 1:2, :] >= vals[..., 0:1, :]
    i_top = np.where(first_is_top, part[..., 1:2, :], part[..., 0:1, :])
    top = np.where(first_is_top, vals[..., 1:2, :], vals[..., 0:1, :])
    i_second = np.where(first_is_top, part[..., 0:1, :], part[..., 1:2, :])
    second = np.where(first_is_top, vals[..., 0:1, :], vals[..., 1:2, :])
    is_top = np.arange(k).reshape((-1, 1)) == i_top
    out = np.where(is_top, second, top)

    def back(g):
        gm = np.moveaxis(g, axis, -2)
        grad = np.zeros_like(x)
        # slots other than the argmax route their gradient to the argmax slot
        contrib_top = np.where(is_top, 0.0, gm).sum(axis=-2, keepdims=True)
        np.put_along_axis(grad, i_top, contrib_top, axis=-2)
        # the argmax slot itself sees the second-largest value
        contrib_second = np.where(is_top, gm, 0.0).sum(axis=-2, keepdims=True)
        prev = np.take_along_axis(grad, i_second, axis=-2)
        np.put_along_axis(grad, i_second, prev + contrib_second, axis=-2)
        _accum(a, np.moveaxis(grad, -2, axis))

    return _make(np.moveaxis(out, -2, axis), (a,), back)


def gather_last(a, indices):
    """Reorder the last axis by integer indices (per leading slot).

    Indices must be unique along the axis (a permutation or subset); the
    backward scatter does not accumulate duplicates.
    """
    a = as_tensor(a)
    indices = np.asarray(indices)

    def back(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, indices, g, axis=-1)
        _accum(a, grad)

    return _make(np.take_along_axis(a.data, indices, axis=-1), (a,), back)


def slice_last(a, n):
    """First n entries of the last axis."""
    a = as_tensor(a)

    def back(g):
        grad = np.zeros_like(a.data)
        grad[..., :n] = g
        _accum(a, grad)

    return _make(a.data[..., :n], (a,), back)


def softmax_last(a):
    """Softmax along the last axis, stabilized by a detached max shift.

    The shift does not change the value or the Jacobian (the softmax
    Jacobian annihilates constant directions).
    """
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), back)


def activation(kind, x):
    """Elementwise activation dispatch: leaky_relu, softplus or identity."""
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "identity":
        return as_tensor(x)
    raise ContractViolation(f"unsupported activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# parameters, schedules, SGD


class DenseParam:
    """Parameters of one affine map: weight (out, in) and bias (out,)."""

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1:
            raise ContractViolation("DenseParam expects 2-D weight and 1-D bias")
        if self.weight.data.shape[0] != self.bias.data.shape[0]:
            raise ContractViolation("weight/bias out-width mismatch")
        if not (np.isfinite(self.weight.data).all() and np.isfinite(self.bias.data).all()):
            raise ContractViolation("DenseParam entries must be finite")

    @property
    def out_width(self):
        return self.weight.data.shape[0]

    @property
    def in_width(self):
        return self.weight.data.shape[1]

    def parameters(self):
        return [self.weight, self.bias]


def init_dense(rng, out_width, in_width):
    """Uniform init on [-1/sqrt(in_width), +1/sqrt(in_width)] for weight and bias."""
    bound = 1.0 / np.sqrt(in_width)
    w = rng.uniform(-bound, bound, size=(out_width, in_width))
    b = rng.uniform(-bound, bound, size=(out_width,))
    return DenseParam(w, b)


def dense_forward(p, x):
    """weight @ x + bias for a vector x, or batched rows (..., in) -> (..., out)."""
    x = as_tensor(x)
    if x.data.shape[-1] != p.in_width:
        raise ContractViolation(
            f"dense_forward width mismatch: input {x.data.shape[-1]}, expected {p.in_width}"
        )
    return add(matmul(x, transpose2d(p.weight)), p.bias)


@dataclass(frozen=True)
class LrSchedule:
    """Decaying step size: rate(t) = base / (1 + decay * t)."""

    base: float
    decay: float

    def __post_init__(self):
        if self.base <= 0 or self.decay < 0:
            raise ContractViolation("LrSchedule requires base > 0 and decay >= 0")

    def rate(self, t):
        return self.base / (1.0 + self.decay * t)


@dataclass
class GradientBundle:
    """Per-parameter gradient arrays, aligned with a parameter list."""

    arrays: list

    @classmethod
    def from_params(cls, params):
        missing = [i for i, p in enumerate(params) if p.grad is None]
        if missing:
            raise ContractViolation(f"parameters without gradients at indices {missing}")
        return cls([p.grad for p in params])


def sgd_step(params, grads, schedule, t, direction="descend"):
    """params <- params -/+ rate(t) * grads (sign per direction)."""
    if direction not in ("descend", "ascend"):
        raise ContractViolation(f"unknown direction {direction!r}")
    arrays = grads.arrays if isinstance(grads, GradientBundle) else list(grads)
    if len(arrays) != len(params):
        raise ContractViolation("gradient bundle length mismatch")
    lr = schedule.rate(t)
    sign = -1.0 if direction == "descend" else 1.0
    for p, g in zip(params, arrays):
        if g.shape != p.data.shape:
            raise ContractViolation("gradient shape mismatch")
        p.data += sign * lr * g


def zero_grads(params):
    for p in params:
        p.grad = None


class AdamState:
    """Adaptive-moment optimizer; step size still follows an LrSchedule.

    Used where plain SGD underfits (supervised pre-training); the
    primal-dual trainer keeps plain SGD steps.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads, schedule, t, direction="descend"):
        if direction not in ("descend", "ascend"):
            raise ContractViolation(f"unknown direction {direction!r}")
        arrays = grads.arrays if isinstance(grads, GradientBundle) else list(grads)
        if len(arrays) != len(self.params):
            raise ContractViolation("gradient bundle length mismatch")
        self.steps += 1
        lr = schedule.rate(t)
        sign = -1.0 if direction == "descend" else 1.0
        b1c = 1.0 - self.beta1**self.steps
        b2c = 1.0 - self.beta2**self.steps
        for i, (p, g) in enumerate(zip(self.params, arrays)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.data += sign * lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Mlp:
    """Plain fully-connected stack with one activation kind for hidden
    layers and one for the output."""

    def __init__(self, dense, hidden_activation="leaky_relu", out_activation="identity"):
        self.dense = list(dense)
        self.hidden_activation = hidden_activation
        self.out_activation = out_activation

    @classmethod
    def build(cls, rng, widths, hidden_activation="leaky_relu", out_activation="identity"):
        dense = [init_dense(rng, widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
        return cls(dense, hidden_activation, out_activation)

    @property
    def widths(self):
        return [self.dense[0].in_width] + [d.out_width for d in self.dense]

    def parameters(self):
        out = []
        for d in self.dense:
            out.extend(d.parameters())
        return out

    def forward(self, x):
        h = as_tensor(x)
        for i, d in enumerate(self.dense):
            h = dense_forward(d, h)
            kind = self.out_activation if i == len(self.dense) - 1 else self.hidden_activation
            h = activation(kind, h)
        return h


def relative_gradient_error(analytic, numeric, floor_scale=1e-3):
    """Worst-case relative disagreement between two gradient arrays.

    Denominators are floored at `floor_scale` times the array's own scale so
    that entries whose true gradient is orders of magnitude below the rest
    do not dominate with pure finite-difference truncation noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.abs(numeric).max()
    if scale < 1e-8 and np.abs(analytic).max() < 1e-8:
        return 0.0  # both numerically zero (e.g. an invariant direction)
    denom = np.maximum(np.abs(numeric), max(floor_scale * scale, 1e-12))
    return float(np.max(np.abs(analytic - numeric) / denom))


def directional_gradient_error(loss_fn, params, analytic, h=1e-6, n_directions=20, seed=0):
    """Worst relative disagreement between analytic directional derivatives
    and central finite differences along random unit directions.

    Well-conditioned even when parameter blocks carry gradients of very
    different magnitudes, where per-coordinate differences drown in
    truncation noise.
    """
    rng = np.random.default_rng(seed)
    dots, fds = [], []
    for _ in range(n_directions):
        dirs = [rng.normal(size=p.data.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        dots.append(sum(float((a * d).sum()) for a, d in zip(analytic, dirs)))
        for p, d in zip(params, dirs):
            p.data += h * d
        up = loss_fn()
        for p, d in zip(params, dirs):
            p.data -= 2.0 * h * d
        down = loss_fn()
        for p, d in zip(params, dirs):
            p.data += h * d
        fds.append((up - down) / (2.0 * h))
    return relative_gradient_error(np.array(dots), np.array(fds))


def finite_difference_grads(loss_fn, params, h=1e-6):
    """Central finite differences of `loss_fn()` w.r.t. every parameter entry.

    `loss_fn` must be a closure over `params` returning a float; it is
    re-evaluated with each entry perturbed in place.
    """
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out
