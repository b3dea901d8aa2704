"""Dense BCHW tensors plus tape-based reverse-mode differentiation.

The op set is deliberately small: exactly the layer primitives the latent
nets, the generator and the losses need.  Every op computes its forward
result eagerly with numpy (convolutions go through the kernel dispatch in
``lcmkit._kernels``) and, when a tape is supplied, records a closure that
maps the output gradient to input gradients.

Values are float32 by default; call ``set_default_dtype(np.float64)`` (or
set ``LCMKIT_DTYPE=float64``) for the gradient-check suites.
"""

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes do not chain."""


class GeometryError(ValueError):
    """Valid shapes but degenerate output geometry (empty extents)."""


class ContractError(ValueError):
    """API contract violation, e.g. backward from a non-scalar."""


_DEFAULT_DTYPE = np.dtype(os.environ.get("LCMKIT_DTYPE", "float32"))


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype("float32"), np.dtype("float64")):
        raise ContractError(f"unsupported dtype {dt}, use float32 or float64")
    _DEFAULT_DTYPE = dt


class TensorMap:
    """Dense real array of order <= 4, laid out batch x channel x height x width."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim > 4:
            raise ShapeError(f"tensor order {data.ndim} > 4")
        if data.ndim and min(data.shape) < 1:
            raise ShapeError(f"empty extent in shape {data.shape}")
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def copy(self) -> "TensorMap":
        return TensorMap(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"TensorMap(shape={self.shape}, dtype={self.data.dtype})"


class ParamBlock:
    """Named parameter tensor with a gradient accumulator and optional box bound.

    ``bound=B`` constrains every entry to [-B, B]; ``project()`` clamps in
    place and is called after each gradient step.  ``frozen`` blocks skip
    gradient accumulation entirely (used for the generator during
    restoration).
    """

    __slots__ = ("name", "value", "grad", "bound", "frozen")

    def __init__(self, name: str, value, bound: Optional[float] = None):
        self.name = name
        self.value = value if isinstance(value, TensorMap) else TensorMap(value)
        self.grad = TensorMap(np.zeros_like(self.value.data))
        self.bound = bound
        self.frozen = False

    def zero_grad(self) -> None:
        self.grad.data[...] = 0

    def project(self) -> None:
        if self.bound is not None:
            np.clip(self.value.data, -self.bound, self.bound, out=self.value.data)

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.value.shape}, bound={self.bound})"


@dataclass
class NormStats:
    """Running per-channel statistics for a normalization layer."""

    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=None) -> "NormStats":
        dt = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: TensorMap
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Topologically ordered record of primitive applications."""

    entries: list = field(default_factory=list)

    def record(self, op, inputs, output, vjp) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, vjp))

    def __len__(self):
        return len(self.entries)


def backward(tape: Tape, loss: TensorMap) -> None:
    """Accumulate dLoss/dParam into every non-frozen ParamBlock on the tape.

    Gradients of intermediate tensors are propagated through the reversed
    entry list; gradients reaching non-parameter leaves are discarded.
    Callers are responsible for zeroing parameter grads beforehand.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.output), None)
        if gout is None:
            continue
        gins = entry.vjp(gout)
        for inp, g in zip(entry.inputs, gins):
            if g is None:
                continue
            if isinstance(inp, ParamBlock):
                inp.grad.data += g
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g


def _value(x) -> np.ndarray:
    return x.value.data if isinstance(x, ParamBlock) else x.data


# ---------------------------------------------------------------------------
# convolution layers


def conv2d(x: TensorMap, weight: ParamBlock, bias: Optional[ParamBlock] = None,
           stride: int = 1, padding: int = 0, tape: Optional[Tape] = None) -> TensorMap:
    """Cross-correlate x (n,ci,h,w) with weight (co,ci,kh,kw), plus bias.

    Output spatial extent is floor((in + 2*padding - k)/stride) + 1.
    """
    if stride < 1 or padding < 0:
        raise ContractError(f"bad conv geometry: stride={stride}, padding={padding}")
    xv, wv = x.data, weight.value.data
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {xv.shape} and {wv.shape}")
    n, ci, h, wd = xv.shape
    co, wci, kh, kw = wv.shape
    if ci != wci:
        raise ShapeError(f"input has {ci} channels but kernel expects {wci}")
    if bias is not None and bias.value.data.shape != (co,):
        raise ShapeError(f"bias shape {bias.value.shape} != ({co},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv output {oh}x{ow} is empty for input {h}x{wd}, kernel {kh}x{kw}")
    out = _kernels.conv2d_forward(xv, wv, stride, padding)
    if bias is not None:
        out += bias.value.data[None, :, None, None]
    result = TensorMap(out)
    if tape is None:
        return result

    def vjp(g):
        g = np.ascontiguousarray(g)
        dx = _kernels.conv2d_backward_dx(g, wv, stride, padding, h, wd)
        dw = None if weight.frozen else _kernels.conv2d_backward_dw(
            xv, g, stride, padding, kh, kw)
        if bias is None:
            return dx, dw
        db = None if bias.frozen else g.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape.record("conv2d", inputs, result, vjp)
    return result


def nearest_upsample(x: TensorMap, scale: int, out_hw=None,
                     tape: Optional[Tape] = None) -> TensorMap:
    """Replicate each pixel into a scale x scale block, optionally cropped to out_hw."""
    if scale < 1:
        raise ContractError(f"scale must be >= 1, got {scale}")
    xv = x.data
    n, c, h, w = xv.shape
    th, tw = out_hw if out_hw is not None else (h * scale, w * scale)
    if th > h * scale or tw > w * scale or th < 1 or tw < 1:
        raise GeometryError(f"cannot crop {h * scale}x{w * scale} upsample to {th}x{tw}")
    up = xv.repeat(scale, axis=2).repeat(scale, axis=3)[:, :, :th, :tw]
    result = TensorMap(np.ascontiguousarray(up))
    if tape is None:
        return result

    def vjp(g):
        gp = g
        if th < h * scale or tw < w * scale:
            gp = np.zeros((n, c, h * scale, w * scale), dtype=g.dtype)
            gp[:, :, :th, :tw] = g
        return (gp.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    tape.record("nearest_upsample", (x,), result, vjp)
    return result


def upsample_conv(x: TensorMap, weight: ParamBlock, bias: Optional[ParamBlock],
                  scale: int, tape: Optional[Tape] = None) -> TensorMap:
    """Nearest-neighbor upsample by scale, then a size-preserving convolution."""
    if scale < 2:
        raise ContractError(f"upsample_conv needs scale >= 2, got {scale}")
    k = weight.value.shape[2]
    if k % 2 != 1:
        raise ContractError(f"size-preserving conv needs an odd kernel, got {k}")
    up = nearest_upsample(x, scale, tape=tape)
    return conv2d(up, weight, bias, stride=1, padding=(k - 1) // 2, tape=tape)


# ---------------------------------------------------------------------------
# activations and normalization


def leaky_relu(x: TensorMap, slope: float = 0.2, tape: Optional[Tape] = None) -> TensorMap:
    """Elementwise max(x, slope * x) for 0 <= slope < 1."""
    if not 0 <= slope < 1:
        raise ContractError(f"slope must be in [0, 1), got {slope}")
    xv = x.data
    pos = xv >= 0
    result = TensorMap(np.where(pos, xv, xv * slope))
    if tape is None:
        return result

    def vjp(g):
        return (np.where(pos, g, g * slope),)

    tape.record("leaky_relu", (x,), result, vjp)
    return result


def sigmoid(x: TensorMap, tape: Optional[Tape] = None) -> TensorMap:
    xv = x.data
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    y[~pos] = ex / (1.0 + ex)
    result = TensorMap(y)
    if tape is None:
        return result

    def vjp(g):
        return (g * y * (1.0 - y),)

    tape.record("sigmoid", (x,), result, vjp)
    return result


def channel_norm(x: TensorMap, gain: ParamBlock, shift: ParamBlock, stats: NormStats,
                 mode: str = "train", tape: Optional[Tape] = None) -> TensorMap:
    """Per-channel batch normalization with an affine transform.

    Train mode normalizes by the current batch statistics (biased variance)
    and updates the running statistics; eval mode normalizes by the running
    statistics and leaves them untouched.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    xv = x.data
    c = xv.shape[1]
    if gain.value.shape != (c,) or shift.value.shape != (c,):
        raise ShapeError(
            f"gain/shift must have shape ({c},), got {gain.value.shape}/{shift.value.shape}")
    if mode == "train":
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mu
        stats.var[...] = (1 - m) * stats.var + m * var
    else:
        mu = stats.mean
        var = stats.var
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gain.value.data[None, :, None, None] + shift.value.data[None, :, None, None]
    result = TensorMap(out)
    if tape is None:
        return result

    def vjp(g):
        dgain = None if gain.frozen else (g * xhat).sum(axis=(0, 2, 3))
        dshift = None if shift.frozen else g.sum(axis=(0, 2, 3))
        dxhat = g * gain.value.data[None, :, None, None]
        if mode == "train":
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgain, dshift

    tape.record("channel_norm", (x, gain, shift), result, vjp)
    return result


# ---------------------------------------------------------------------------
# pointwise arithmetic and reductions


def _binary(op, a, b, fwd, vjp_builder, tape):
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"{op}: shapes {av.shape} and {bv.shape} differ")
    result = TensorMap(fwd(av, bv))
    if tape is not None:
        tape.record(op, (a, b), result, vjp_builder(av, bv))
    return result


def add(a, b, tape: Optional[Tape] = None) -> TensorMap:
    return _binary("add", a, b, np.add, lambda av, bv: lambda g: (g, g), tape)


def sub(a, b, tape: Optional[Tape] = None) -> TensorMap:
    return _binary("sub", a, b, np.subtract, lambda av, bv: lambda g: (g, -g), tape)


def mul(a, b, tape: Optional[Tape] = None) -> TensorMap:
    return _binary("mul", a, b, np.multiply,
                   lambda av, bv: lambda g: (g * bv, g * av), tape)


def mul_scalar(x, c: float, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    result = TensorMap(xv * xv.dtype.type(c))
    if tape is not None:
        tape.record("mul_scalar", (x,), result, lambda g: (g * xv.dtype.type(c),))
    return result


def square(x, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    result = TensorMap(xv * xv)
    if tape is not None:
        tape.record("square", (x,), result, lambda g: (2.0 * xv * g,))
    return result


def abs_(x, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    result = TensorMap(np.abs(xv))
    if tape is not None:
        tape.record("abs", (x,), result, lambda g: (g * np.sign(xv),))
    return result


def mean_all(x, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    result = TensorMap(xv.mean())
    if tape is not None:
        n = xv.size

        def vjp(g):
            return (np.broadcast_to(g / n, xv.shape),)

        tape.record("mean_all", (x,), result, vjp)
    return result


def sum_all(x, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    result = TensorMap(xv.sum())
    if tape is not None:

        def vjp(g):
            return (np.broadcast_to(g, xv.shape),)

        tape.record("sum_all", (x,), result, vjp)
    return result


def channel_mean(x: TensorMap, tape: Optional[Tape] = None) -> TensorMap:
    """Average over the channel axis, keeping a singleton channel."""
    xv = x.data
    c = xv.shape[1]
    result = TensorMap(xv.mean(axis=1, keepdims=True))
    if tape is not None:

        def vjp(g):
            return (np.broadcast_to(g / c, xv.shape).copy(),)

        tape.record("channel_mean", (x,), result, vjp)
    return result


# ---------------------------------------------------------------------------
# structure ops


def as_tensor(p: ParamBlock, tape: Optional[Tape] = None) -> TensorMap:
    """Expose a parameter's value as a tensor on the tape (identity vjp)."""
    result = TensorMap(p.value.data)
    if tape is not None:
        tape.record("as_tensor", (p,), result,
                    lambda g: (None if p.frozen else g,))
    return result


def reshape(x, shape, tape: Optional[Tape] = None) -> TensorMap:
    xv = _value(x)
    if int(np.prod(shape)) != xv.size:
        raise ShapeError(f"cannot reshape {xv.shape} to {tuple(shape)}")
    result = TensorMap(xv.reshape(shape))
    if tape is not None:
        tape.record("reshape", (x,), result, lambda g: (g.reshape(xv.shape),))
    return result


def linear(x: TensorMap, weight: ParamBlock, bias: Optional[ParamBlock] = None,
           tape: Optional[Tape] = None) -> TensorMap:
    """Affine map of rows: (n, d) @ (k, d)^T + (k,)."""
    xv, wv = x.data, weight.value.data
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: shapes {xv.shape} and {wv.shape} do not chain")
    out = xv @ wv.T
    if bias is not None:
        out += bias.value.data
    result = TensorMap(out)
    if tape is None:
        return result

    def vjp(g):
        dx = g @ wv
        dw = None if weight.frozen else g.T @ xv
        if bias is None:
            return dx, dw
        db = None if bias.frozen else g.sum(axis=0)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape.record("linear", inputs, result, vjp)
    return result


def concat_batch(parts: Sequence[TensorMap], tape: Optional[Tape] = None) -> TensorMap:
    """Concatenate along the batch axis."""
    arrs = [p.data for p in parts]
    result = TensorMap(np.concatenate(arrs, axis=0))
    if tape is not None:
        sizes = [a.shape[0] for a in arrs]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

        tape.record("concat_batch", tuple(parts), result, vjp)
    return result


def concat_channels(a: TensorMap, b: TensorMap, tape: Optional[Tape] = None) -> TensorMap:
    """Concatenate along the channel axis (skip connections)."""
    av, bv = a.data, b.data
    if av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {av.shape} and {bv.shape} differ")
    result = TensorMap(np.concatenate([av, bv], axis=1))
    if tape is not None:
        ca = av.shape[1]

        def vjp(g):
            return g[:, :ca], g[:, ca:]

        tape.record("concat_channels", (a, b), result, vjp)
    return result


def separable_resample(x: TensorMap, row_op: np.ndarray, col_op: np.ndarray,
                       tape: Optional[Tape] = None) -> TensorMap:
    """Apply a linear operator separably: out = row_op @ x @ col_op^T.

    Both operators act on the spatial axes; this realizes pyramid smoothing,
    Lanczos resampling and any other separable linear filter, and its vjp is
    simply the transposed pair.
    """
    xv = x.data
    if row_op.shape[1] != xv.shape[2] or col_op.shape[1] != xv.shape[3]:
        raise ShapeError(
            f"resample operators {row_op.shape}/{col_op.shape} do not match input {xv.shape}")
    mr = row_op.astype(xv.dtype, copy=False)
    mc = col_op.astype(xv.dtype, copy=False)
    out = np.matmul(np.matmul(mr, xv), mc.T)
    result = TensorMap(out)
    if tape is not None:

        def vjp(g):
            return (np.matmul(np.matmul(mr.T, g), mc),)

        tape.record("separable_resample", (x,), result, vjp)
    return result
