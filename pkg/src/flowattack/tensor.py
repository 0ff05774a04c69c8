"""Minimal define-by-run reverse-mode autodiff on top of numpy.

Operations executed while a :class:`Tape` is active are recorded on it, and
:func:`backward` replays the tape in reverse to populate ``grad`` on every
tensor that requires gradients. Outside of a tape the same functions run as
plain numpy forwards, which is what inference and evaluation use.

Image-like data follows the (batch, channels, height, width) layout.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; each thread has its own stack of tapes, so a tape
    is confined to the worker that created it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: tuple, out_data, backward_fn) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(np.asarray(out_data))
    tape = _active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.nodes.append(Node(inputs, out, backward_fn, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    for key, t in seen.items():
        t.grad = grads[key]


# ---------------------------------------------------------------------------
# elementwise and reductions


def _operand(x):
    """(tensor-or-None, raw data); python scalars stay weakly typed."""
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, (int, float)):
        return None, x
    t = Tensor(x)
    return t, t.data


def _shape(d) -> tuple:
    return np.shape(d)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op: str, a, b, fwd, grad_a, grad_b) -> Tensor:
    ta, ad = _operand(a)
    tb, bd = _operand(b)
    out = fwd(ad, bd)
    sa, sb = _shape(ad), _shape(bd)

    def bw(g):
        ga = _unbroadcast(grad_a(g, ad, bd, out), sa) if ta is not None and ta.requires_grad else None
        gb = _unbroadcast(grad_b(g, ad, bd, out), sb) if tb is not None and tb.requires_grad else None
        return ga, gb

    return _record(op, (ta, tb), out, bw)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), np.asarray(out), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (x,), x.data[index], bw)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    out = np.maximum(x.data, x.data * slope)

    def bw(g):
        factor = np.where(x.data > 0, 1.0, slope).astype(g.dtype, copy=False)
        return (g * factor,)

    return _record("leaky_relu", (x,), out, bw)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels",
                             f"expected (N={ref[0]}, *, H={ref[2]}, W={ref[3]}), got {t.shape}")
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _record("concat_channels", tuple(inputs),
                   np.concatenate([t.data for t in inputs], axis=1), bw)


def concat_batch(inputs: Sequence[Tensor]) -> Tensor:
    """Stack along the leading (batch) axis."""
    inputs = [as_tensor(t) for t in inputs]
    ref = inputs[0].shape[1:]
    for t in inputs[1:]:
        if t.shape[1:] != ref:
            raise ShapeError("concat_batch", f"expected trailing shape {ref}, got {t.shape[1:]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in inputs])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _record("concat_batch", tuple(inputs),
                   np.concatenate([t.data for t in inputs], axis=0), bw)


# ---------------------------------------------------------------------------
# convolutions


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        y0 = i * dilation
        for j in range(k):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + ys:stride, x0:x0 + xs:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        y0 = i * dilation
        for j in range(k):
            x0 = j * dilation
            out[:, :, y0:y0 + ys:stride, x0:x0 + xs:stride] += cols[:, :, i, j]
    return out


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T without materializing transposed copies."""
    acc = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ b[i].T
    return acc


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with weight layout (out_ch, in_ch, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d", f"only square kernels are supported, got {k}x{k2}")
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError("conv2d", f"input channels {c} != weight in_ch {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"input {h}x{w} too small for kernel {k} dilation {dilation}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    wm = weight.data.reshape(o, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)
    xp_shape = xp.shape

    def bw(g):
        g = g.reshape(n, o, ho * wo)
        gw = _batched_outer(g, cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(np.matmul(wm.T, g), xp_shape, k, stride, dilation, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", inputs, out, bw)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Transposed convolution with weight layout (in_ch, out_ch, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("transposed_conv2d",
                         f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    ci, o, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("transposed_conv2d", f"only square kernels are supported, got {k}x{k2}")
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError("transposed_conv2d", f"input channels {c} != weight in_ch {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("transposed_conv2d", f"bias shape {bias.shape} != ({o},)")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError("transposed_conv2d", f"padding {padding} leaves empty output")
    wm = weight.data.reshape(ci, -1)
    xf = x.data.reshape(n, ci, h * w)
    full = _col2im(np.matmul(wm.T, xf), (n, o, hf, wf), k, stride, 1, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, k, stride, 1, h, w)
        gx = np.matmul(wm, gcols).reshape(x.shape) if x.requires_grad else None
        gw = _batched_outer(xf, gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("transposed_conv2d", inputs, out, bw)


# ---------------------------------------------------------------------------
# correlation and resampling


def correlation(f1: Tensor, f2: Tensor, max_displacement: int) -> Tensor:
    """Pointwise cost volume between two feature maps.

    Output channel ``(dy + md) * (2 md + 1) + (dx + md)`` holds
    ``mean_c f1[c, y, x] * f2[c, y + dy, x + dx]``; displaced positions outside
    the map contribute zero.
    """
    if f1.shape != f2.shape:
        raise ShapeError("correlation", f"feature shapes differ: {f1.shape} vs {f2.shape}")
    if f1.ndim != 4:
        raise ShapeError("correlation", f"expected 4-D features, got {f1.shape}")
    if max_displacement < 1:
        raise ValueError("max_displacement must be positive")
    md = max_displacement
    d = 2 * md + 1
    n, c, h, w = f1.shape
    a = f1.data
    bp = _pad(f2.data, md)
    scale = 1.0 / c
    out = np.empty((n, d * d, h, w), dtype=np.result_type(a, bp))
    for dy in range(d):
        for dx in range(d):
            out[:, dy * d + dx] = np.einsum("nchw,nchw->nhw", a, bp[:, :, dy:dy + h, dx:dx + w]) * scale

    def bw(g):
        g = g * scale
        ga = np.zeros_like(a) if f1.requires_grad else None
        gbp = np.zeros_like(bp) if f2.requires_grad else None
        for dy in range(d):
            for dx in range(d):
                gi = g[:, dy * d + dx][:, None]
                if ga is not None:
                    ga += gi * bp[:, :, dy:dy + h, dx:dx + w]
                if gbp is not None:
                    gbp[:, :, dy:dy + h, dx:dx + w] += gi * a
        gb = gbp[:, :, md:md + h, md:md + w] if gbp is not None else None
        return ga, gb

    return _record("correlation", (f1, f2), out, bw)


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    src = np.arange(n_out) / factor
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling where output pixel ``factor * i`` samples input pixel ``i``.

    Positions past the last input row/column replicate the border.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _record("upsample_bilinear", (x,), x.data.copy(), lambda g: (g,))
    n, c, h, w = x.shape
    ay = _interp_matrix(h, factor, x.dtype)
    ax = _interp_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(ay, x.data), ax.T)

    def bw(g):
        return (np.matmul(np.matmul(ay.T, g), ax),)

    return _record("upsample_bilinear", (x,), out, bw)


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping average pooling of the two trailing axes (no gradient)."""
    if factor == 1:
        return x
    *lead, h, w = x.shape
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def gather_linear(x: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[..., p] = sum_k weights[k, p] * x_flat[..., index[k, p]]``.

    ``x`` is flattened over its trailing two axes; used for differentiable
    bilinear resampling with precomputed taps.
    """
    lead = x.shape[:-2]
    npix = x.shape[-2] * x.shape[-1]
    xf = x.data.reshape(*lead, npix)
    out = (xf[..., index] * weights).sum(axis=-2)

    def bw(g):
        gx = np.zeros((*lead, npix), dtype=g.dtype)
        contrib = g[..., None, :] * weights
        flat_lead = int(np.prod(lead)) if lead else 1
        gx2 = gx.reshape(flat_lead, npix)
        c2 = contrib.reshape(flat_lead, -1)
        idx = index.reshape(-1)
        for r in range(flat_lead):
            gx2[r] = np.bincount(idx, weights=c2[r], minlength=npix)
        return (gx.reshape(x.shape),)

    return _record("gather_linear", (x,), out, bw)


def scatter_overwrite(base: Tensor, values: Tensor, positions: np.ndarray) -> Tensor:
    """Copy of ``base`` with flat spatial ``positions`` overwritten by ``values``.

    ``base`` is (..., H, W); ``values`` is (..., P) broadcastable to base's leading axes.
    """
    lead = base.shape[:-2]
    h, w = base.shape[-2:]
    out = base.data.reshape(*lead, h * w).copy()
    out[..., positions] = values.data
    out = out.reshape(base.shape)
    vshape = values.shape

    def bw(g):
        gf = g.reshape(*lead, h * w)
        gv = _unbroadcast(gf[..., positions], vshape) if values.requires_grad else None
        gb = None
        if base.requires_grad:
            gb = gf.copy()
            gb[..., positions] = 0.0
            gb = gb.reshape(base.shape)
        return gb, gv

    return _record("scatter_overwrite", (base, values), out, bw)
