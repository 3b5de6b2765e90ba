"""Minimal dense tensors with reverse-mode differentiation.

Only the kernels needed by the depth network and the adaptation losses are
provided. Arrays are laid out channels-last (``H x W x C``) without a batch
axis; one frame is processed at a time.

Every differentiable op records a :class:`TapeNode` on its output. The graph
lives only as long as the tensors referencing it, so building a fresh graph
per frame needs no explicit reset.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError, UsageError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors.

    ``precision(np.float64)`` is the 64-bit mode used by gradient checks.
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported precision {dtype!r}")
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


@dataclass(eq=False)
class TapeNode:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients (``None`` entries mean "no gradient")."""

    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _dtype_of(*tensors):
    for t in tensors:
        if isinstance(t, Tensor):
            return t.data.dtype
    return np.dtype(default_dtype())


def make_result(data, inputs, backward_rule, op):
    """Wrap ``data`` as the output of ``op`` and record it on the tape when
    any input requires a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_rule)
    return out


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root):
    """Populate ``.grad`` of every leaf reachable from the scalar ``root``.

    Leaf gradients accumulate, matching the usual convention; call
    ``zero_grad`` on parameters between steps.
    """
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for tensor in reversed(_topological_order(root)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------- helpers


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_binary(a, b, op):
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    # trailing-axis broadcast of a per-channel vector is also allowed
    if b.data.ndim == 1 and a.data.shape[-1:] == b.data.shape:
        return
    if a.data.ndim == 1 and b.data.shape[-1:] == a.data.shape:
        return
    bad = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ", axes=bad or None)


def _coerce(a, b):
    dtype = _dtype_of(a, b)
    a = a if isinstance(a, Tensor) else Tensor(a, dtype=dtype)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=dtype)
    return a, b


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), rule, "add")


def sub(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), rule, "mul")


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)
    return make_result(a.data * a.data.dtype.type(factor), (a,),
                       lambda g: (g * factor,), "scale")


def abs_(a):
    """Absolute value; the subgradient at exactly zero is 0."""
    a = as_tensor(a)
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    gate = a.data > 0
    return make_result(np.where(gate, a.data, 0).astype(a.data.dtype), (a,),
                       lambda g: (g * gate,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def reciprocal(a):
    a = as_tensor(a)
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def add_scalar(a, value):
    a = as_tensor(a)
    return make_result(a.data + a.data.dtype.type(value), (a,), lambda g: (g,), "add_scalar")


def square(a):
    a = as_tensor(a)
    return make_result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": abs_,
    "relu": relu,
    "sigmoid": sigmoid,
    "scale": scale,
}


def elementwise(op, *operands):
    """Dispatch one of ``add, sub, mul, abs, relu, sigmoid, scale`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ------------------------------------------------------------------ reductions


def sum_(a):
    a = as_tensor(a)
    return make_result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),), "sum")


def mean(a):
    a = as_tensor(a)
    n = a.data.size

    def rule(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)

    return make_result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), rule, "mean")


def stack_sum(tensors):
    """Sum of a list of same-shaped tensors (scalars included)."""
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


# -------------------------------------------------------------------- layout


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree", axes=[ax])
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, rule, "concat")


def reshape(a, shape):
    a = as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- convolution


def conv_output_size(dim, k, stride, pad):
    return (dim + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]
    # windows: (Ho, Wo, Cin, k, k) -> rows ordered (ky, kx, cin)
    ho, wo = windows.shape[:2]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(ho * wo, -1)
    return cols, ho, wo


def conv2d(x, kernel, stride=1, pad=0, bias=None):
    """2-D cross-correlation of an ``H x W x Cin`` input with a
    ``k x k x Cin x Cout`` kernel.

    Output spatial size is ``floor((dim + 2*pad - k) / stride) + 1``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be HxWxC, got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d kernel must be k x k x Cin x Cout, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if cin != x.shape[2]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[2]}, kernel expects {cin}", axes=[2]
        )
    if k % 2 == 0:
        raise ParameterError(f"conv2d kernel size must be odd, got {k}")
    if int(stride) < 1 or int(pad) < 0:
        raise ParameterError(f"invalid stride {stride} / pad {pad}")
    h, w = x.shape[:2]
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d input {x.shape[:2]} smaller than kernel {k}", axes=[0, 1])
    inputs = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    if bias is not None and inputs[2].shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {inputs[2].shape}")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + inputs[2].data
    out = out.reshape(ho, wo, cout)

    def rule(g):
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
            padded = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=x.data.dtype)
            for ky in range(k):
                for kx in range(k):
                    padded[ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += gcols[:, :, ky, kx]
            gx = padded[pad:pad + h, pad:pad + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, inputs, rule, "conv2d")


# ------------------------------------------------------------ normalization


def batch_norm(x, gamma, beta, running_mean, running_var, eps=1e-5, mode="eval", momentum=0.1):
    """Per-channel batch normalization over the spatial axes of ``H x W x C``.

    ``running_mean`` and ``running_var`` are plain arrays; train mode updates
    them in place with ``momentum`` (unbiased variance, as in common
    frameworks).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if not eps > 0:
        raise ParameterError(f"batch_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"batch_norm {name} has shape {np.shape(arr)}, expected ({c},)")
    dt = x.data.dtype.type
    if mode == "train":
        axes = tuple(range(x.data.ndim - 1))
        n = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if n > 1:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * n / (n - 1)
    elif mode == "eval":
        mu = np.asarray(running_mean, dtype=x.data.dtype)
        var = np.asarray(running_var, dtype=x.data.dtype)
    else:
        raise ParameterError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.data.dtype)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def rule(g):
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if mode == "eval":
                gx = gxhat * inv_std
            else:
                m = g.size // c
                gx = (inv_std / m) * (
                    m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
                )
        return gx, ggamma, gbeta

    return make_result(out.astype(x.data.dtype), (x, gamma, beta), rule, "batch_norm")


# ---------------------------------------------------------------- resampling


def bilinear_matrix(n, factor, dtype=np.float64):
    """Interpolation matrix for 1-D upsampling with half-pixel centres
    (align_corners=False)."""
    out = n * factor
    mat = np.zeros((out, n), dtype=dtype)
    for o in range(out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


def upsample_bilinear(x, factor):
    x = as_tensor(x)
    factor = int(factor)
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 3:
        raise DimensionError(f"upsample input must be HxWxC, got {x.shape}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    h, w, _ = x.shape
    ah = bilinear_matrix(h, factor, x.data.dtype)
    aw = bilinear_matrix(w, factor, x.data.dtype)
    out = np.einsum("ph,hwc,qw->pqc", ah, x.data, aw, optimize=True)

    def rule(g):
        return (np.einsum("ph,pqc,qw->hwc", ah, g, aw, optimize=True),)

    return make_result(out, (x,), rule, "upsample_bilinear")
