"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: a ``Tape`` records every primitive evaluation
as an append-only node, so parents always precede children and the reverse
sweep is a single backwards walk.  A ``DiffTensor`` is an immutable value;
it carries a ``node_id`` into its tape, or ``None`` when it is a constant
that no gradient will ever reach.

A tensor joins a tape through its inputs: if any operand of a primitive is
taped, the result is recorded on that tape.  Operations on constants only
are evaluated eagerly and stay constant, which keeps pure preprocessing
(identity grids, image pyramids) off the tape for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform to the shape rule."""


class UnknownPrimitiveError(ValueError):
    """Raised for a primitive kind the engine does not implement."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class DiffTensor:
    """Immutable float64 array, optionally attached to a tape node.

    ``data`` is row-major and write-protected; gradients live on the tape,
    never inside the tensor.
    """

    __slots__ = ("value", "tape", "node_id")

    # make ndarray + DiffTensor defer to our __radd__ instead of object arrays
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        arr = _as_array(value)
        arr = arr.copy() if arr.flags["WRITEABLE"] and tape is None and node_id is None else arr
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f"node={self.node_id}" if self.node_id is not None else "const"
        return f"DiffTensor(shape={self.value.shape}, {tag})"

    # arithmetic sugar; every path goes through primitive_forward
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def constant(value) -> DiffTensor:
    """Wrap an array as an untaped constant."""
    return DiffTensor(value)


def _tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


@dataclass
class TapeNode:
    kind: str
    parent_ids: tuple
    inputs: tuple  # saved forward values (np arrays)
    attrs: dict
    value: np.ndarray


class Tape:
    """Append-only record of one forward pass.

    Parent ids always precede child ids, so topological order is the list
    order itself.  A tape plus its leaf values fully determines the forward
    pass; ``replay`` re-executes it and must reproduce every node value
    bit for bit.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> DiffTensor:
        arr = _as_array(value).copy()
        arr.flags.writeable = False
        node = TapeNode("leaf", (), (), {"name": name}, arr)
        self.nodes.append(node)
        return DiffTensor(arr, self, len(self.nodes) - 1)

    def _record(self, kind, parent_ids, inputs, attrs, value) -> DiffTensor:
        value.flags.writeable = False
        self.nodes.append(TapeNode(kind, tuple(parent_ids), tuple(inputs), dict(attrs), value))
        return DiffTensor(value, self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Re-run the recorded forward pass from the leaf values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
                continue
            ins = [
                values[pid] if pid is not None else node.inputs[k]
                for k, pid in enumerate(node.parent_ids)
            ]
            fwd, _ = _PRIMITIVES[node.kind]
            values.append(fwd(ins, node.attrs))
        return values


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------
# kind -> (forward(inputs, attrs) -> array, vjp(grad, inputs, attrs, out) -> grads)
_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _register(kind: str):
    def deco(pair_builder):
        _PRIMITIVES[kind] = pair_builder()
        return pair_builder

    return deco


def _shape_err(kind: str, shapes) -> ShapeError:
    return ShapeError(f"{kind}: incompatible input shapes {[tuple(s) for s in shapes]}")


def primitive_forward(kind: str, inputs: Sequence, attrs: dict | None = None) -> DiffTensor:
    """Evaluate one primitive, recording it on the inputs' tape if any.

    Raises ``UnknownPrimitiveError`` for an unregistered kind and
    ``ShapeError`` when inputs violate the kind's shape rule.
    """
    if kind not in _PRIMITIVES:
        raise UnknownPrimitiveError(f"unknown primitive kind: {kind!r}")
    attrs = dict(attrs or {})
    tensors = [_tensor(x) for x in inputs]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError(f"{kind}: inputs belong to different tapes")
            tape = t.tape
    fwd, _ = _PRIMITIVES[kind]
    value = fwd([t.value for t in tensors], attrs)
    value = _as_array(value)
    if tape is None:
        return DiffTensor(value)
    parent_ids = [t.node_id for t in tensors]
    saved = [t.value if t.node_id is None else None for t in tensors]
    return tape._record(kind, parent_ids, saved, attrs, value)


# --- broadcasting helpers ---------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded, restoring ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_err(kind, [a.shape, b.shape]) from None


# --- elementwise binary -----------------------------------------------------


@_register("add")
def _():
    def fwd(ins, attrs):
        a, b = ins
        _check_broadcast("add", a, b)
        return a + b

    def vjp(g, ins, attrs, out):
        a, b = ins
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, vjp


@_register("sub")
def _():
    def fwd(ins, attrs):
        a, b = ins
        _check_broadcast("sub", a, b)
        return a - b

    def vjp(g, ins, attrs, out):
        a, b = ins
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return fwd, vjp


@_register("mul")
def _():
    def fwd(ins, attrs):
        a, b = ins
        _check_broadcast("mul", a, b)
        return a * b

    def vjp(g, ins, attrs, out):
        a, b = ins
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, vjp


@_register("div")
def _():
    def fwd(ins, attrs):
        a, b = ins
        _check_broadcast("div", a, b)
        return a / b

    def vjp(g, ins, attrs, out):
        a, b = ins
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return fwd, vjp


@_register("scalar_mul")
def _():
    def fwd(ins, attrs):
        return ins[0] * attrs["c"]

    def vjp(g, ins, attrs, out):
        return (g * attrs["c"],)

    return fwd, vjp


# --- elementwise unary ------------------------------------------------------


@_register("square")
def _():
    return (
        lambda ins, attrs: ins[0] * ins[0],
        lambda g, ins, attrs, out: (2.0 * ins[0] * g,),
    )


@_register("sqrt")
def _():
    return (
        lambda ins, attrs: np.sqrt(ins[0]),
        lambda g, ins, attrs, out: (g * (0.5 / out),),
    )


@_register("exp_elementwise")
def _():
    return (
        lambda ins, attrs: np.exp(ins[0]),
        lambda g, ins, attrs, out: (g * out,),
    )


@_register("tanh")
def _():
    def vjp(g, ins, attrs, out):
        # g * (1 - out^2) with one temporary; out must stay untouched
        t = out * out
        np.subtract(1.0, t, out=t)
        np.multiply(g, t, out=t)
        return (t,)

    return (lambda ins, attrs: np.tanh(ins[0]), vjp)


@_register("leaky_relu")
def _():
    def fwd(ins, attrs):
        x = ins[0]
        s = attrs.get("slope", 0.1)
        return np.where(x > 0.0, x, s * x)

    def vjp(g, ins, attrs, out):
        s = attrs.get("slope", 0.1)
        return (np.where(ins[0] > 0.0, g, s * g),)

    return fwd, vjp


@_register("clamp")
def _():
    def fwd(ins, attrs):
        return np.clip(ins[0], attrs["lo"], attrs["hi"])

    def vjp(g, ins, attrs, out):
        x = ins[0]
        inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
        return (np.where(inside, g, 0.0),)

    return fwd, vjp


# --- structure --------------------------------------------------------------


@_register("transpose")
def _():
    def fwd(ins, attrs):
        return np.transpose(ins[0], attrs["axes"]).copy()

    def vjp(g, ins, attrs, out):
        inv = np.argsort(attrs["axes"])
        return (np.transpose(g, inv).copy(),)

    return fwd, vjp


@_register("reshape")
def _():
    def fwd(ins, attrs):
        try:
            return np.reshape(ins[0], attrs["shape"]).copy()
        except ValueError:
            raise _shape_err("reshape", [ins[0].shape, attrs["shape"]]) from None

    def vjp(g, ins, attrs, out):
        return (g.reshape(ins[0].shape),)

    return fwd, vjp


@_register("concat")
def _():
    def fwd(ins, attrs):
        axis = attrs["axis"]
        ref = list(ins[0].shape)
        for x in ins[1:]:
            s = list(x.shape)
            s[axis] = ref[axis]
            if s != ref:
                raise _shape_err("concat", [t.shape for t in ins])
        return np.concatenate(ins, axis=axis)

    def vjp(g, ins, attrs, out):
        axis = attrs["axis"]
        sizes = [x.shape[axis] for x in ins]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return fwd, vjp


@_register("crop")
def _():
    def fwd(ins, attrs):
        sl = tuple(slice(a, b) for a, b in attrs["bounds"])
        return ins[0][sl].copy()

    def vjp(g, ins, attrs, out):
        gx = np.zeros_like(ins[0])
        sl = tuple(slice(a, b) for a, b in attrs["bounds"])
        gx[sl] = g
        return (gx,)

    return fwd, vjp


def _pad_axis_edge_fold(g: np.ndarray, axis: int, before: int, after: int) -> np.ndarray:
    """Adjoint of edge-replicate padding along one axis."""
    n = g.shape[axis] - before - after
    core = np.take(g, range(before, before + n), axis=axis).copy()
    if before:
        head = np.take(g, range(0, before), axis=axis).sum(axis=axis, keepdims=True)
        first = [slice(None)] * g.ndim
        first[axis] = slice(0, 1)
        core[tuple(first)] += head
    if after:
        tail = np.take(g, range(before + n, before + n + after), axis=axis).sum(axis=axis, keepdims=True)
        last = [slice(None)] * g.ndim
        last[axis] = slice(n - 1, n)
        core[tuple(last)] += tail
    return core


@_register("pad")
def _():
    def fwd(ins, attrs):
        widths = attrs["widths"]
        mode = attrs.get("mode", "zero")
        np_mode = "edge" if mode == "edge" else "constant"
        return np.pad(ins[0], widths, mode=np_mode)

    def vjp(g, ins, attrs, out):
        widths = attrs["widths"]
        mode = attrs.get("mode", "zero")
        if mode == "edge":
            for axis, (b, a) in enumerate(widths):
                if b or a:
                    g = _pad_axis_edge_fold(g, axis, b, a)
            return (g,)
        sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, ins[0].shape))
        return (g[sl].copy(),)

    return fwd, vjp


# --- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduce_vjp(g, x, axis, keepdims, scale):
    if axis is None:
        return np.full_like(x, 1.0) * (g * scale)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g * scale, x.shape).copy()


@_register("sum")
def _():
    def fwd(ins, attrs):
        axis = _norm_axis(attrs.get("axis"), ins[0].ndim)
        return np.sum(ins[0], axis=axis, keepdims=attrs.get("keepdims", False))

    def vjp(g, ins, attrs, out):
        axis = _norm_axis(attrs.get("axis"), ins[0].ndim)
        return (_reduce_vjp(g, ins[0], axis, attrs.get("keepdims", False), 1.0),)

    return fwd, vjp


@_register("mean")
def _():
    def fwd(ins, attrs):
        axis = _norm_axis(attrs.get("axis"), ins[0].ndim)
        return np.mean(ins[0], axis=axis, keepdims=attrs.get("keepdims", False))

    def vjp(g, ins, attrs, out):
        x = ins[0]
        axis = _norm_axis(attrs.get("axis"), x.ndim)
        count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))
        return (_reduce_vjp(g, x, axis, attrs.get("keepdims", False), 1.0 / count),)

    return fwd, vjp


# --- linear algebra ---------------------------------------------------------


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@_register("matmul")
def _():
    def fwd(ins, attrs):
        a, b = ins
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise _shape_err("matmul", [a.shape, b.shape])
        return np.matmul(a, b)

    def vjp(g, ins, attrs, out):
        a, b = ins
        ga = np.matmul(g, _swap_last(b))
        gb = np.matmul(_swap_last(a), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return fwd, vjp


# --- convolution & pooling --------------------------------------------------


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _conv2d_forward(x, kern, stride):
    if x.ndim != 4 or kern.ndim != 4 or x.shape[3] != kern.shape[2]:
        raise _shape_err("conv2d", [x.shape, kern.shape])
    n, h, w, ci = x.shape
    kh, kw, _, co = kern.shape
    oh, pt, pb = _same_pad(h, kh, stride)
    ow, pl, pr = _same_pad(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, oh, ow, ci, kh, kw) -> (n*oh*ow, kh*kw*ci)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * ci)
    y = cols @ kern.reshape(kh * kw * ci, co)
    return y.reshape(n, oh, ow, co), (oh, ow, pt, pb, pl, pr, cols)


@_register("conv2d")
def _():
    def fwd(ins, attrs):
        stride = attrs.get("stride", 1)
        if stride not in (1, 2):
            raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
        y, _ = _conv2d_forward(ins[0], ins[1], stride)
        return y

    def vjp(g, ins, attrs, out):
        x, kern = ins
        stride = attrs.get("stride", 1)
        n, h, w, ci = x.shape
        kh, kw, _, co = kern.shape
        _, (oh, ow, pt, pb, pl, pr, cols) = _conv2d_forward(x, kern, stride)
        gmat = g.reshape(n * oh * ow, co)
        gk = (cols.T @ gmat).reshape(kh, kw, ci, co)
        gcols = (gmat @ kern.reshape(kh * kw * ci, co).T).reshape(n, oh, ow, kh, kw, ci)
        gxp = np.zeros((n, h + pt + pb, w + pl + pr, ci))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp
        if pt or pb:
            gx = _pad_axis_edge_fold(gx, 1, pt, pb)
        if pl or pr:
            gx = _pad_axis_edge_fold(gx, 2, pl, pr)
        return gx, gk

    return fwd, vjp


@_register("avg_pool2")
def _():
    def fwd(ins, attrs):
        x = ins[0]
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise _shape_err("avg_pool2", [x.shape])
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g, ins, attrs, out):
        n, h, w, c = ins[0].shape
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx,)

    return fwd, vjp


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian truncated at 3 sigma and renormalized to sum 1."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x, k, axis):
    r = (len(k) - 1) // 2
    widths = [(0, 0)] * x.ndim
    widths[axis] = (r, r)
    xp = np.pad(x, widths, mode="edge")
    out = np.zeros_like(x)
    n = x.shape[axis]
    for i, w in enumerate(k):
        out += w * np.take(xp, range(i, i + n), axis=axis)
    return out


def _blur_axis_adjoint(g, k, axis):
    r = (len(k) - 1) // 2
    n = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n + 2 * r
    gp = np.zeros(shape)
    idx = [slice(None)] * g.ndim
    for i, w in enumerate(k):
        idx[axis] = slice(i, i + n)
        gp[tuple(idx)] += w * g
    return _pad_axis_edge_fold(gp, axis, r, r)


@_register("gaussian_blur")
def _():
    def fwd(ins, attrs):
        x = ins[0]
        if x.ndim not in (2, 3):
            raise _shape_err("gaussian_blur", [x.shape])
        k = gaussian_kernel1d(attrs["sigma"])
        y = _blur_axis(x, k, x.ndim - 2)
        return _blur_axis(y, k, x.ndim - 1)

    def vjp(g, ins, attrs, out):
        x = ins[0]
        k = gaussian_kernel1d(attrs["sigma"])
        gy = _blur_axis_adjoint(g, k, x.ndim - 1)
        return (_blur_axis_adjoint(gy, k, x.ndim - 2),)

    return fwd, vjp


# --- bilinear sampling ------------------------------------------------------


def _sample_setup(img, coords):
    """Normalize to batched form: img (B,H,W), coords (B,M,2).

    A 2-d image takes coordinates of any shape (...,2); a batched (B,H,W)
    image requires coordinates (B,...,2) so every image gets its own set.
    """
    if coords.ndim < 1 or coords.shape[-1] != 2 or img.ndim not in (2, 3):
        raise _shape_err("grid_sample", [img.shape, coords.shape])
    if img.ndim == 2:
        ib = img.reshape(1, *img.shape)
        cb = coords.reshape(1, -1, 2)
    else:
        if coords.ndim < 3 or coords.shape[0] != img.shape[0]:
            raise _shape_err("grid_sample", [img.shape, coords.shape])
        ib = img
        cb = coords.reshape(img.shape[0], -1, 2)
    return ib, cb, coords.shape[:-1]


def _bilinear_parts(ib, cb):
    b, h, w = ib.shape
    x = cb[..., 0] * w - 0.5
    y = cb[..., 1] * h - 0.5
    xin = (x >= 0.0) & (x <= w - 1.0)
    yin = (y >= 0.0) & (y <= h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp) if w > 1 else np.zeros_like(xc, dtype=np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp) if h > 1 else np.zeros_like(yc, dtype=np.intp)
    tx = xc - x0
    ty = yc - y0
    bi = np.broadcast_to(np.arange(b)[:, None], x0.shape)
    v00 = ib[bi, y0, x0]
    v01 = ib[bi, y0, x0 + 1] if w > 1 else v00
    v10 = ib[bi, y0 + 1, x0] if h > 1 else v00
    v11 = ib[bi, y0 + 1, x0 + 1] if (h > 1 and w > 1) else v00
    return x0, y0, tx, ty, xin, yin, bi, v00, v01, v10, v11


@_register("grid_sample")
def _():
    def fwd(ins, attrs):
        img, coords = ins
        if not np.all(np.isfinite(coords)):
            raise ValueError("grid_sample: non-finite coordinates")
        ib, cb, out_shape = _sample_setup(img, coords)
        _, _, tx, ty, _, _, _, v00, v01, v10, v11 = _bilinear_parts(ib, cb)
        top = v00 * (1.0 - tx) + v01 * tx
        bot = v10 * (1.0 - tx) + v11 * tx
        return (top * (1.0 - ty) + bot * ty).reshape(out_shape)

    def vjp(g, ins, attrs, out):
        img, coords = ins
        ib, cb, _ = _sample_setup(img, coords)
        b, h, w = ib.shape
        x0, y0, tx, ty, xin, yin, bi, v00, v01, v10, v11 = _bilinear_parts(ib, cb)
        gf = g.reshape(tx.shape)

        base = (bi * h + y0) * w + x0
        idx = [base]
        wts = [gf * (1.0 - tx) * (1.0 - ty)]
        if w > 1:
            idx.append(base + 1)
            wts.append(gf * tx * (1.0 - ty))
        if h > 1:
            idx.append(base + w)
            wts.append(gf * (1.0 - tx) * ty)
        if h > 1 and w > 1:
            idx.append(base + w + 1)
            wts.append(gf * tx * ty)
        gimg = np.bincount(
            np.concatenate([i.ravel() for i in idx]),
            weights=np.concatenate([v.ravel() for v in wts]),
            minlength=b * h * w,
        ).reshape(b, h, w)

        dx = ((v01 - v00) * (1.0 - ty) + (v11 - v10) * ty) * w
        dy = ((v10 - v00) * (1.0 - tx) + (v11 - v01) * tx) * h
        gc = np.stack([gf * dx * xin, gf * dy * yin], axis=-1)
        return gimg.reshape(img.shape), gc.reshape(coords.shape)

    return fwd, vjp


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def add(a, b):
    return primitive_forward("add", [a, b])


def sub(a, b):
    return primitive_forward("sub", [a, b])


def mul(a, b):
    return primitive_forward("mul", [a, b])


def div(a, b):
    return primitive_forward("div", [a, b])


def scalar_mul(a, c: float):
    return primitive_forward("scalar_mul", [a], {"c": float(c)})


def matmul(a, b):
    return primitive_forward("matmul", [a, b])


def transpose(a, axes):
    return primitive_forward("transpose", [a], {"axes": tuple(axes)})


def reshape(a, shape):
    return primitive_forward("reshape", [a], {"shape": tuple(shape)})


def concat(parts: Iterable, axis: int):
    return primitive_forward("concat", list(parts), {"axis": axis})


def crop(a, bounds):
    return primitive_forward("crop", [a], {"bounds": tuple(tuple(b) for b in bounds)})


def pad(a, widths, mode: str = "zero"):
    return primitive_forward("pad", [a], {"widths": tuple(tuple(w) for w in widths), "mode": mode})


def tsum(a, axis=None, keepdims=False):
    return primitive_forward("sum", [a], {"axis": axis, "keepdims": keepdims})


def tmean(a, axis=None, keepdims=False):
    return primitive_forward("mean", [a], {"axis": axis, "keepdims": keepdims})


def square(a):
    return primitive_forward("square", [a])


def tsqrt(a):
    return primitive_forward("sqrt", [a])


def texp(a):
    return primitive_forward("exp_elementwise", [a])


def tanh(a):
    return primitive_forward("tanh", [a])


def leaky_relu(a, slope: float = 0.1):
    return primitive_forward("leaky_relu", [a], {"slope": slope})


def clamp(a, lo: float, hi: float):
    return primitive_forward("clamp", [a], {"lo": float(lo), "hi": float(hi)})


def conv2d(x, kern, stride: int = 1):
    return primitive_forward("conv2d", [x, kern], {"stride": stride})


def avg_pool2(x):
    return primitive_forward("avg_pool2", [x])


def gaussian_blur(x, sigma: float):
    return primitive_forward("gaussian_blur", [x], {"sigma": float(sigma)})


def grid_sample(img, coords):
    """Bilinear lookup of ``img`` at normalized [0,1]^2 coordinates.

    ``img`` is (H,W) with ``coords`` (...,2), or (B,H,W) with per-image
    coordinates (B,...,2); the last axis is ordered (x, y).  Out-of-range
    coordinates clamp to the border, and the result is differentiable with
    respect to both arguments (coordinate gradients vanish where clamping
    is active).
    """
    return primitive_forward("grid_sample", [img, coords])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Gradients:
    """Mapping node_id -> d(loss)/d(node); unread nodes are zero."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        g = self._grads.get(node_id)
        if g is None:
            return np.zeros_like(self._tape.nodes[node_id].value)
        return g

    def of(self, t: DiffTensor) -> np.ndarray:
        if t.node_id is None:
            raise ValueError("constant tensors carry no gradient")
        return self[t.node_id]

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._grads


def backprop(loss: DiffTensor) -> Gradients:
    """Reverse sweep from a scalar loss over its tape.

    Returns gradients for every tape node; nodes the loss does not depend
    on read as zero.
    """
    if loss.value.size != 1:
        raise ValueError(f"backprop: loss must be scalar, got shape {loss.value.shape}")
    if loss.tape is None or loss.node_id is None:
        raise ValueError("backprop: loss is not recorded on a tape")
    tape = loss.tape
    nodes = tape.nodes

    needed = {loss.node_id}
    for nid in range(loss.node_id, -1, -1):
        if nid in needed:
            for pid in nodes[nid].parent_ids:
                if pid is not None:
                    needed.add(pid)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(nodes[loss.node_id].value)}
    for nid in range(loss.node_id, -1, -1):
        if nid not in grads or nodes[nid].kind == "leaf":
            continue
        node = nodes[nid]
        ins = [
            nodes[pid].value if pid is not None else node.inputs[k]
            for k, pid in enumerate(node.parent_ids)
        ]
        _, vjp = _PRIMITIVES[node.kind]
        per_parent = vjp(grads[nid], ins, node.attrs, node.value)
        for pid, g in zip(node.parent_ids, per_parent):
            if pid is None or g is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g
    return Gradients(tape, grads)


PRIMITIVE_KINDS = tuple(sorted(_PRIMITIVES.keys()))
