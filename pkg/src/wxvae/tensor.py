"""Dense tensors with reverse-mode automatic differentiation.

Storage and compute default to float32; reductions accumulate in float64.
Every op preserves the dtype of its inputs, so the same graph can be built
in float64 for finite-difference checking.

Convolutions are cross-correlations (no kernel flip), laid out as
``(N, C, D, H, W)`` for activations, ``(C_out, C_in, kd, kh, kw)`` for
``conv3`` kernels and ``(C_in, C_out, kd, kh, kw)`` for ``conv3_transpose``
kernels.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

# When set to a list, relu/clamp append their active-region masks to it so a
# finite-difference check can tell when a perturbation crossed a kink.
_kink_log: list | None = None


def record_kinks(log: list | None) -> None:
    global _kink_log
    _kink_log = log


class GradientError(RuntimeError):
    """Raised when backward is misused (non-scalar loss, stale gradients)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # Equal shapes, scalars, or trailing-aligned bias shapes only.
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data.astype(a.dtype, copy=False), (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data.astype(a.dtype, copy=False), (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "mul")
    bd = b.data.astype(a.dtype, copy=False)

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2 * g * x.data,)

    return _make(x.data * x.data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, v)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.logaddexp(0, v).astype(v.dtype)

    def backward(g):
        sig = np.empty_like(v)
        pos = v >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        e = np.exp(v[~pos])
        sig[~pos] = e / (1.0 + e)
        return (g * sig,)

    return _make(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient is zero wherever the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    if _kink_log is not None:
        _kink_log.append(inside)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape

def tsum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(total, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    avg = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(avg, (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the trailing axis of a 2-D tensor -> shape ``(N,)``."""
    out = x.data.sum(axis=1, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.repeat(g[:, None], x.shape[1], axis=1),)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward)


# ---------------------------------------------------------------------------
# affine layers

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, F_in)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _make(xd @ wd.T + bias.data, (x, weight, bias), backward)


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out_extent(
    size: int, kernel: int, stride: int, padding: int, output_padding: int = 0
) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _phases(xp: np.ndarray, stride: int, size) -> np.ndarray:
    """Split spatial axes into ``stride`` phases: ``(s, s, s, C, N, L/s...)``.

    ``out[a % s, b % s, c % s, :, :, i, j, k]`` is ``xp[:, :, a + s*i, ...]`` with
    ``i`` offset by ``a // s``, so every kernel tap becomes a contiguous slice.
    """
    n, c = xp.shape[:2]
    s = stride
    full = [-(-L // s) * s for L in size]
    if list(xp.shape[2:]) != full:
        grown = np.zeros((n, c, *full), dtype=xp.dtype)
        d, h, w = (min(x, f) for x, f in zip(xp.shape[2:], full))
        grown[:, :, :d, :h, :w] = xp[:, :, :d, :h, :w]
        xp = grown
    v = xp.reshape(n, c, full[0] // s, s, full[1] // s, s, full[2] // s, s)
    return v.transpose(3, 5, 7, 1, 0, 2, 4, 6)


def _im2col(xp: np.ndarray, ksize, stride: int, out) -> np.ndarray:
    """Gather kernel taps of padded ``xp`` into ``(C, taps, N, *out)``."""
    n, c = xp.shape[:2]
    kd, kh, kw = ksize
    s = stride
    cols = np.empty((c, kd * kh * kw, n, *out), dtype=xp.dtype)
    need = [(o - 1) * s + k for o, k in zip(out, ksize)]
    ph = _phases(xp, s, need) if s > 1 else xp.transpose(1, 0, 2, 3, 4)[None, None, None]
    i = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                src = ph[a % s, b % s, e % s]
                cols[:, i] = src[:, :, a // s : a // s + out[0], b // s : b // s + out[1], e // s : e // s + out[2]]
                i += 1
    return cols


def _conv3_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    c_out = w.shape[0]
    ks = w.shape[2:]
    out = tuple(conv_out_extent(s, k, stride, padding) for s, k in zip(x.shape[2:], ks))
    cols = _im2col(_pad(x, padding), ks, stride, out)
    flat = cols.reshape(-1, cols[0, 0].size)
    y = (w.reshape(c_out, -1) @ flat).reshape(c_out, x.shape[0], *out)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4)), flat


def _conv3t_raw(y: np.ndarray, w: np.ndarray, stride: int, padding: int, out) -> np.ndarray:
    """Scatter-add of ``y`` through kernel ``w`` of layout ``(C_in, C_out, k...)``."""
    n, c_in = y.shape[:2]
    c_out = w.shape[1]
    ks = w.shape[2:]
    src = y.shape[2:]
    # (C_out, kd, kh, kw, N, D, H, W): each kernel tap is a contiguous block
    yt = y.transpose(1, 0, 2, 3, 4).reshape(c_in, -1)
    taps = (w.reshape(c_in, -1).T @ yt).reshape(c_out, *ks, n, *src)
    s = stride
    size = [-(-max((n_ - 1) * s + k, padding + o) // s) for n_, k, o in zip(src, ks, out)]
    # phase-major accumulator, see _phases
    acc = np.zeros((s, s, s, c_out, n, *size), dtype=y.dtype)
    for a in range(ks[0]):
        for b in range(ks[1]):
            for c in range(ks[2]):
                acc[a % s, b % s, c % s, :, :, a // s : a // s + src[0], b // s : b // s + src[1], c // s : c // s + src[2]] += taps[
                    :, a, b, c
                ]
    buf = acc.transpose(4, 3, 5, 0, 6, 1, 7, 2).reshape(n, c_out, size[0] * s, size[1] * s, size[2] * s)
    p = padding
    return np.ascontiguousarray(buf[:, :, p : p + out[0], p : p + out[1], p : p + out[2]])


def _channels_first(g: np.ndarray) -> np.ndarray:
    return g.transpose(1, 0, 2, 3, 4).reshape(g.shape[1], -1)


def _check_conv(x: Tensor, kernel: Tensor, bias: Tensor, cin_axis: int, cout_axis: int, op: str) -> None:
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(f"{op}: expected 5-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[cin_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but kernel {kernel.shape} expects {kernel.shape[cin_axis]}"
        )
    if bias.shape != (kernel.shape[cout_axis],):
        raise ShapeError(f"{op}: bias {bias.shape} does not match kernel {kernel.shape}")


def conv3(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation plus per-channel bias."""
    _check_conv(x, kernel, bias, 1, 0, "conv3")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3: invalid stride {stride} / padding {padding}")
    for s, k in zip(x.shape[2:], kernel.shape[2:]):
        if k > s + 2 * padding:
            raise ShapeError(f"conv3: kernel {kernel.shape[2:]} exceeds padded input {x.shape[2:]}")
    wd = kernel.data
    y, cols = _conv3_raw(x.data, wd, stride, padding)
    y += bias.data[None, :, None, None, None]
    in_sp = x.shape[2:]

    def backward(g):
        gx = _conv3t_raw(g, wd, stride, padding, in_sp) if x.requires_grad else None
        gw = (_channels_first(g) @ cols.T).reshape(wd.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _make(y, (x, kernel, bias), backward)


def conv3_transpose(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv3` with matching stride and padding, plus bias.

    ``output_padding`` (less than ``stride``) extends the far edge so a
    stride-2 downsampling can be inverted exactly, e.g. 8 -> 16 with kernel 3
    and padding 1.
    """
    _check_conv(x, kernel, bias, 0, 1, "conv3_transpose")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3_transpose: invalid stride {stride} / padding {padding}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ShapeError(f"conv3_transpose: output_padding {output_padding} must be < stride {stride}")
    ks = kernel.shape[2:]
    out = tuple(conv_transpose_out_extent(s, k, stride, padding, output_padding) for s, k in zip(x.shape[2:], ks))
    if min(out) < 1:
        raise ShapeError(f"conv3_transpose: empty output for input {x.shape} and kernel {kernel.shape}")
    wd = kernel.data
    y = _conv3t_raw(x.data, wd, stride, padding, out)
    y += bias.data[None, :, None, None, None]
    src = x.shape[2:]

    def backward(g):
        # input and kernel gradients gather the same taps of the padded upstream gradient
        cols = _im2col(_pad(g, padding), ks, stride, src)
        flat = cols.reshape(-1, cols[0, 0].size)
        gx = None
        if x.requires_grad:
            gx = (wd.reshape(wd.shape[0], -1) @ flat).reshape(wd.shape[0], g.shape[0], *src)
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))
        gw = (_channels_first(x.data) @ flat.T).reshape(wd.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _make(y, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# reverse pass

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad.

    Leaves must have no gradient from an earlier pass; call ``zero_grad``
    between passes. Gradients never accumulate silently.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    leaves = [t for t in order if t.is_leaf]
    stale = [t for t in leaves if t.grad is not None]
    if stale:
        names = ", ".join(t.name or repr(t) for t in stale[:3])
        raise GradientError(f"gradients already populated ({names}); reset with zero_grad first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g, dtype=node.dtype).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
