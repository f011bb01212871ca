"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Operations record themselves on the active :class:`Tape` (one per thread) when at
least one input requires a gradient. Without an active tape every op is a plain
numpy computation, which is how evaluation metrics run "outside the tape".

Images use the channels-first layout C x H x W. Broadcasting is limited to a
0-d (scalar) operand in elementwise ops and the per-channel bias add in the
convolution ops.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

logger = logging.getLogger("ndtensor")

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


@dataclass
class TapeNode:
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so every node's inputs precede it. The tape
    is bound to the thread that entered it.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: "Tensor", inputs: Sequence["Tensor"], backward: BackwardFn) -> None:
        output.tape_node = len(self.nodes)
        output._tape = self
        self.nodes.append(TapeNode(tuple(inputs), output, backward))


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != dtype:
            return Tensor(x.data.astype(dtype))
        return x
    return Tensor(x, dtype=dtype)


def _wrap(x: ArrayLike, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def op_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor the loss depends on.

    Gradients accumulate into existing ``grad`` arrays; call ``zero_grad`` on
    leaves between steps.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}", shape=loss.shape)
    if loss._tape is None or loss.tape_node is None:
        raise ConfigError("loss was not recorded on a tape; run the forward pass inside `with Tape():`")

    tape = loss._tape
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.tape_node + 1]):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if gi.shape != inp.shape:
                raise ShapeError(f"gradient shape {gi.shape} does not match input {inp.shape}")
            inp.grad = gi if inp.grad is None else inp.grad + gi


# --- elementwise ---

def _check_elementwise(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}", left=a.shape, right=b.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    _check_elementwise(a, b)
    return op_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    _check_elementwise(a, b)
    return op_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    _check_elementwise(a, b)
    return op_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    _check_elementwise(a, b)
    return op_result(
        a.data / b.data,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return op_result(-x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return op_result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return op_result(out, (x,), lambda g: (0.5 * g / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return op_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return op_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # subgradient 0 at 0
    return op_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return op_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*log(x) with 0*log(0) := 0."""
    pos = x.data > 0
    safe = np.where(pos, x.data, 1)
    out = np.where(pos, x.data * np.log(safe), 0).astype(x.dtype)
    return op_result(out, (x,), lambda g: (g * np.where(pos, np.log(safe) + 1, 0),))


# --- reductions and reshapes ---

def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def _back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return op_result(out, (x,), _back)


def mean(x: Tensor) -> Tensor:
    return sum(x) / x.size


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return op_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Top-left ``height`` x ``width`` window of the last two axes."""
    out = x.data[..., :height, :width].copy()

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[..., :height, :width] = g
        return (gx,)

    return op_result(out, (x,), _back)


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """x[i+1] - x[i] along ``axis``; the result is one shorter along that axis."""
    out = np.diff(x.data, axis=axis)

    def _back(g):
        gx = np.zeros_like(x.data)
        n = x.shape[axis]
        hi = [slice(None)] * x.ndim
        lo = [slice(None)] * x.ndim
        hi[axis] = slice(1, n)
        lo[axis] = slice(0, n - 1)
        gx[tuple(hi)] += g
        gx[tuple(lo)] -= g
        return (gx,)

    return op_result(out, (x,), _back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot stack channels of {a.shape} and {b.shape}", left=a.shape, right=b.shape)
    c1 = a.shape[0]
    return op_result(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:c1], g[c1:]))


def split_channels(x: Tensor, c1: int) -> Tuple[Tensor, Tensor]:
    if x.ndim != 3 or not 0 <= c1 <= x.shape[0]:
        raise ShapeError(f"cannot split {x.shape} at channel {c1}", shape=x.shape)

    def _part(lo: int, hi: int) -> Tensor:
        def _back(g):
            gx = np.zeros_like(x.data)
            gx[lo:hi] = g
            return (gx,)

        return op_result(x.data[lo:hi].copy(), (x,), _back)

    return _part(0, c1), _part(c1, x.shape[0])


# --- convolution family ---

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k weights."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and 4-D weight, got {x.shape} and {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if c_in != x.shape[0]:
        raise ShapeError(
            f"conv2d weight expects {c_in} input channels, input has {x.shape[0]}",
            weight=weight.shape,
            input=x.shape,
        )
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # C x H' x W' x k x k
    h_out, w_out = cols.shape[1], cols.shape[2]
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 3, 4])) + bias.data[:, None, None]

    def _back(g):
        gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        gb = g.sum(axis=(1, 2))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h_out, j:j + w_out] += np.tensordot(weight.data[:, :, i, j], g, axes=([0], [0]))
        gx = gxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2]]
        return gx, gw, gb

    return op_result(out.astype(x.dtype, copy=False), (x, weight, bias), _back)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 block maximum. Ties route the gradient to the first element in row-major order."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}", shape=x.shape)
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return op_result(out, (x,), _back)


def upconv2x2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with C_in x C_out x 2 x 2 weights."""
    c_in, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c_in or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2x2 weight must be {c_in}xC_outx2x2, got {weight.shape}")
    c_out = weight.shape[1]
    if bias.shape != (c_out,):
        raise ShapeError(f"upconv2x2 bias must have shape ({c_out},), got {bias.shape}")

    # O x 2 x 2 x H x W -> O x H x 2 x W x 2
    spread = np.tensordot(weight.data, x.data, axes=([0], [0]))
    out = spread.transpose(0, 3, 1, 4, 2).reshape(c_out, 2 * h, 2 * w) + bias.data[:, None, None]

    def _back(g):
        gs = g.reshape(c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3)
        gx = np.tensordot(weight.data, gs, axes=([1, 2, 3], [0, 1, 2]))
        gw = np.tensordot(x.data, gs, axes=([1, 2], [3, 4]))
        return gx, gw, g.sum(axis=(1, 2))

    return op_result(out.astype(x.dtype, copy=False), (x, weight, bias), _back)


# --- fixed (non-learned) filters over the last two axes ---

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ConfigError(f"Gaussian sigma must be positive, got {sigma}")
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2 * sigma * sigma))
    return k / k.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    # reflective border: ... b a | a b c ... (numpy "symmetric")
    src = np.pad(np.arange(n), radius, mode="symmetric")
    m = np.zeros((n, n))
    for i in range(n):
        np.add.at(m[i], src[i:i + 2 * radius + 1], k)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def _box_matrix(n: int, window: int) -> np.ndarray:
    m = np.zeros((n - window + 1, n))
    for i in range(n - window + 1):
        m[i, i:i + window] = 1.0 / window
    m.flags.writeable = False
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = rows @ x.data @ cols.T
    return op_result(out, (x,), lambda g: (rows.T @ g @ cols,))


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian smoothing of the last two axes with a reflective border."""
    h, w = x.shape[-2:]
    return _separable(x, _blur_matrix(h, float(sigma)), _blur_matrix(w, float(sigma)))


def box_filter(x: Tensor, window: int) -> Tensor:
    """Uniform window mean at every valid (fully inside) window position."""
    h, w = x.shape[-2:]
    if window % 2 == 0 or window > min(h, w):
        raise ConfigError(f"window must be odd and at most {min(h, w)}, got {window}")
    return _separable(x, _box_matrix(h, window), _box_matrix(w, window))
