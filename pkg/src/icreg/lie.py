"""Lie algebra elements, exponential maps, and composable transforms.

Transforms map normalized [0,1]^D coordinates to normalized coordinates,
so they are resolution independent.  An ``ExpPrimitive`` keeps its algebra
element and a scalar factor; square roots and inverses are exact scale
manipulations (0.5 and -1) rather than numeric inversions, which is what
makes consistency-preserving composition possible.

Affine-family transforms act about the image center: exp maps a matrix
algebra element to x ↦ c + R(x-c) + t with c = (0.5, 0.5).  A zero algebra
element is therefore the identity, and a raw (non-exponential) map with
zero coefficients sends nothing to the corner.
"""

from __future__ import annotations

import math

import numpy as np

from . import tape as tp
from .tape import DiffTensor

DEFAULT_SQUARINGS = 9
DEFAULT_RK4_STEPS = 16

# velocity MLP widths D -> 16 -> 16 -> D; the middle layer carries no bias
# so negating the packed parameter vector negates the velocity everywhere
MLP_WIDTHS = (2, 16, 16, 2)

_GRID_CACHE: dict[tuple, np.ndarray] = {}
# id() of every cached grid array; entries are never evicted, so the ids
# stay valid and a transform can recognize "these points are the identity
# grid" by object identity and reuse per-instance results
_GRID_IDS: dict[int, tuple] = {}


def identity_grid(h: int, w: int, batch: int | None = None) -> np.ndarray:
    """(H,W,2) pixel-center coordinates: entry (i,j) = ((j+.5)/W, (i+.5)/H).

    With ``batch`` the same array broadcast to (batch,H,W,2).  Returned
    arrays are cached, read only, and shared between callers.
    """
    key = (h, w) if batch is None else (h, w, batch)
    if key not in _GRID_CACHE:
        if batch is None:
            ys, xs = np.mgrid[0:h, 0:w]
            grid = np.stack([(xs + 0.5) / w, (ys + 0.5) / h], axis=-1)
        else:
            # materialized, not a broadcast view: tensor construction keeps
            # contiguous arrays as-is, which preserves the id for recognition
            grid = np.tile(identity_grid(h, w), (batch, 1, 1, 1))
        grid.flags.writeable = False
        _GRID_CACHE[key] = grid
        _GRID_IDS[id(grid)] = key
    return _GRID_CACHE[key]


def _tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


# ---------------------------------------------------------------------------
# algebra elements
# ---------------------------------------------------------------------------


class HomMatrix:
    """(D+1)x(D+1) affine algebra matrix with zero last row, optional batch axis."""

    def __init__(self, mat):
        mat = _tensor(mat)
        if mat.ndim < 2 or mat.shape[-1] != mat.shape[-2] or mat.shape[-1] < 2:
            raise ValueError(f"HomMatrix: expected square matrices, got {mat.shape}")
        if np.any(mat.value[..., -1, :] != 0.0):
            raise ValueError("HomMatrix: last row must be exactly zero")
        self.mat = mat
        self.dim = mat.shape[-1] - 1
        self.batch = mat.shape[:-2]

    def detach(self) -> "HomMatrix":
        return HomMatrix(DiffTensor(self.mat.value))


class VelocityGrid:
    """(H,W,D) stationary velocity field of normalized displacements."""

    def __init__(self, field):
        field = _tensor(field)
        if field.ndim < 3 or field.shape[-1] != 2:
            raise ValueError(f"VelocityGrid: expected (...,H,W,2), got {field.shape}")
        self.field = field
        self.dim = field.shape[-1]
        self.batch = field.shape[:-3]

    def detach(self) -> "VelocityGrid":
        return VelocityGrid(DiffTensor(self.field.value))


class VelocityMlp:
    """Packed weights of a small velocity network z ↦ v(z), R^D → R^D."""

    def __init__(self, packed, widths=MLP_WIDTHS):
        packed = _tensor(packed)
        need = mlp_param_count(widths)
        if packed.shape[-1] != need:
            raise ValueError(
                f"VelocityMlp: packed vector has {packed.shape[-1]} entries, need {need}"
            )
        self.packed = packed
        self.widths = tuple(widths)
        self.dim = widths[0]
        self.batch = packed.shape[:-1]

    def detach(self) -> "VelocityMlp":
        return VelocityMlp(DiffTensor(self.packed.value), self.widths)


def mlp_param_count(widths=MLP_WIDTHS) -> int:
    d0, h1, h2, d3 = widths
    return d0 * h1 + h1 + h1 * h2 + h2 * d3 + d3


def mlp_unpack(packed: DiffTensor, widths=MLP_WIDTHS) -> tuple:
    """Slice a packed parameter vector into (w1, b1, w2, w3, b3) tensors.

    Packing order: [w1 (d0*h1), b1 (h1), w2 (h1*h2), w3 (h2*d3), b3 (d3)].
    """
    d0, h1, h2, d3 = widths
    need = mlp_param_count(widths)
    if packed.shape[-1] != need:
        raise ValueError(
            f"mlp_unpack: packed vector has {packed.shape[-1]} entries, need {need}"
        )
    batch = packed.shape[:-1]

    def seg(a, b, shape):
        bounds = [(0, n) for n in batch] + [(a, b)]
        return tp.reshape(tp.crop(packed, bounds), batch + shape)

    o = 0
    w1 = seg(o, o + d0 * h1, (d0, h1))
    o += d0 * h1
    b1 = seg(o, o + h1, (1, h1))
    o += h1
    w2 = seg(o, o + h1 * h2, (h1, h2))
    o += h1 * h2
    w3 = seg(o, o + h2 * d3, (h2, d3))
    o += h2 * d3
    b3 = seg(o, o + d3, (1, d3))
    return w1, b1, w2, w3, b3


def mlp_apply(weights: tuple, z: DiffTensor) -> DiffTensor:
    """Run the velocity network on points z (...,M,D) given unpacked weights."""
    w1, b1, w2, w3, b3 = weights
    h = tp.tanh(tp.matmul(z, w1) + b1)
    h = tp.tanh(tp.matmul(h, w2))
    return tp.matmul(h, w3) + b3


def mlp_velocity(packed: DiffTensor, z: DiffTensor, widths=MLP_WIDTHS) -> DiffTensor:
    """Evaluate the packed velocity network at points z (...,M,D).

    The function is odd in ``packed``: v(-params) = -v(params), which turns
    an antisymmetrized parameter vector into an antisymmetric velocity.
    """
    return mlp_apply(mlp_unpack(packed, widths), z)


# ---------------------------------------------------------------------------
# exponential maps
# ---------------------------------------------------------------------------


def mat_exp(m) -> DiffTensor:
    """Matrix exponential by scaling, an 18-term Taylor series, and squaring.

    Accepts (...,n,n); the halving count is chosen so the scaled 1-norm is
    at most 0.5 (shared across a batch), and gradients flow through every
    arithmetic step.
    """
    m = _tensor(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"mat_exp: expected square matrices, got {m.shape}")
    if not np.all(np.isfinite(m.value)):
        raise ValueError("mat_exp: non-finite entries")
    n = m.shape[-1]
    norm = float(np.abs(m.value).sum(axis=-2).max())
    s = 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))
    x = tp.scalar_mul(m, 0.5**s) if s else m
    eye = np.broadcast_to(np.eye(n), m.shape)
    # Horner form of the 18-term series: I + x(I + x/2(I + ... (I + x/17)))
    acc = tp.add(eye, tp.scalar_mul(x, 1.0 / 17))
    for k in range(16, 0, -1):
        acc = tp.add(eye, tp.scalar_mul(tp.matmul(x, acc), 1.0 / k))
    for _ in range(s):
        acc = tp.matmul(acc, acc)
    return acc


def _channel(field: DiffTensor, c: int) -> DiffTensor:
    bounds = [(0, n) for n in field.shape]
    bounds[-1] = (c, c + 1)
    return tp.reshape(tp.crop(field, bounds), field.shape[:-1])


def _sample_field(field: DiffTensor, coords: DiffTensor) -> DiffTensor:
    """Interpolate a (...,H,W,D) field at (...,M,2) points, channelwise."""
    parts = []
    for c in range(field.shape[-1]):
        sampled = tp.grid_sample(_channel(field, c), coords)
        parts.append(tp.reshape(sampled, sampled.shape + (1,)))
    return tp.concat(parts, axis=-1)


def svf_exp(v, squarings: int = DEFAULT_SQUARINGS) -> DiffTensor:
    """Flow of a stationary velocity field to t=1 by scaling and squaring.

    Starts from phi_0 = id + v/2^K and self-composes K times; returns the
    final position field over the identity grid, same shape as ``v``.
    """
    v = _tensor(v)
    if squarings < 1:
        raise ValueError(f"svf_exp: squarings must be >= 1, got {squarings}")
    if v.ndim < 3 or v.shape[-1] != 2:
        raise ValueError(f"svf_exp: expected (...,H,W,2), got {v.shape}")
    if not np.all(np.isfinite(v.value)):
        raise ValueError("svf_exp: non-finite velocity")
    h, w = v.shape[-3], v.shape[-2]
    grid = identity_grid(h, w)
    d = tp.scalar_mul(v, 0.5**squarings)
    for _ in range(squarings):
        coords = tp.add(grid, d)
        d = tp.add(d, _sample_field(d, coords))
    return tp.add(grid, d)


def rk4_flow(velocity, points, steps: int = DEFAULT_RK4_STEPS) -> DiffTensor:
    """Integrate dz/dt = velocity(z) from t=0 to 1 with classical RK4.

    ``velocity`` maps a (...,M,D) DiffTensor to one of the same shape.
    """
    if steps < 1:
        raise ValueError(f"rk4_flow: steps must be >= 1, got {steps}")
    z = _tensor(points)
    h = 1.0 / steps
    for _ in range(steps):
        k1 = velocity(z)
        if not np.all(np.isfinite(k1.value)):
            raise ValueError("rk4_flow: non-finite velocity output")
        k2 = velocity(z + tp.scalar_mul(k1, h / 2))
        k3 = velocity(z + tp.scalar_mul(k2, h / 2))
        k4 = velocity(z + tp.scalar_mul(k3, h))
        incr = k1 + tp.scalar_mul(k2, 2.0) + tp.scalar_mul(k3, 2.0) + k4
        z = z + tp.scalar_mul(incr, h / 6.0)
    return z


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


class Transform:
    """A map [0,1]^D → [0,1]^D applicable to point sets of shape (...,D)."""

    dim: int
    batch: tuple
    can_apply = True
    can_scale_algebra = False

    def apply(self, points) -> DiffTensor:
        raise NotImplementedError

    def detach(self) -> "Transform":
        """Copy with all tensors off any tape, for evaluation-only use."""
        raise NotImplementedError

    def position_field(self, h: int, w: int, batch: int | None = None) -> DiffTensor:
        """Transform the (H,W) identity grid; tiles to a batch when needed."""
        if batch is None and self.batch:
            batch = self.batch[0]
        if batch is not None and self.batch and self.batch[0] != batch:
            raise ValueError(f"position_field: batch {batch} vs transform {self.batch}")
        return self.apply(DiffTensor(identity_grid(h, w, batch)))

    def _coerce_points(self, points) -> DiffTensor:
        pts = _tensor(points)
        if pts.shape[-1] != self.dim:
            raise ValueError(f"apply: points have dim {pts.shape[-1]}, transform dim {self.dim}")
        if self.batch and (pts.ndim < 3 or pts.shape[0] != self.batch[0]):
            if pts.node_id is None:
                tiled = np.broadcast_to(pts.value, self.batch + pts.shape)
                return DiffTensor(tiled)
            raise ValueError(
                f"apply: batched transform {self.batch} needs per-batch points, got {pts.shape}"
            )
        return pts


def _apply_homogeneous(mat: DiffTensor, pts: DiffTensor) -> DiffTensor:
    """Apply exp'd homogeneous matrices about the image center (0.5, 0.5)."""
    d = mat.shape[-1] - 1
    batch = mat.shape[:-2]
    if batch:
        flat_shape = (batch[0], pts.size // (batch[0] * d), d)
    else:
        flat_shape = (pts.size // d, d)
    flat = tp.reshape(pts, flat_shape)
    centered = flat - 0.5
    ones = np.ones(flat_shape[:-1] + (1,))
    hom = tp.concat([centered, ones], axis=-1)
    axes = tuple(range(mat.ndim - 2)) + (mat.ndim - 1, mat.ndim - 2)
    out = tp.matmul(hom, tp.transpose(mat, axes))
    bounds = [(0, n) for n in out.shape[:-1]] + [(0, d)]
    y = tp.crop(out, bounds) + 0.5
    return tp.reshape(y, pts.shape)


class ExpPrimitive(Transform):
    """exp(scale * algebra): the only transform kind with exact algebra scaling."""

    can_scale_algebra = True

    def __init__(self, algebra, scale: float = 1.0, *, squarings: int = DEFAULT_SQUARINGS,
                 rk4_steps: int = DEFAULT_RK4_STEPS):
        if not isinstance(algebra, (HomMatrix, VelocityGrid, VelocityMlp)):
            raise TypeError(f"ExpPrimitive: unsupported algebra {type(algebra).__name__}")
        self.algebra = algebra
        self.scale = float(scale)
        self.squarings = squarings
        self.rk4_steps = rk4_steps
        self.dim = algebra.dim
        self.batch = algebra.batch
        self._cache: dict = {}

    def scale_algebra(self, s: float) -> "ExpPrimitive":
        return ExpPrimitive(self.algebra, self.scale * s,
                            squarings=self.squarings, rk4_steps=self.rk4_steps)

    def inverse(self) -> "ExpPrimitive":
        return self.scale_algebra(-1.0)

    def detach(self) -> "ExpPrimitive":
        return ExpPrimitive(self.algebra.detach(), self.scale,
                            squarings=self.squarings, rk4_steps=self.rk4_steps)

    def _scaled(self, t: DiffTensor) -> DiffTensor:
        return t if self.scale == 1.0 else tp.scalar_mul(t, self.scale)

    def apply(self, points) -> DiffTensor:
        pts = self._coerce_points(points)
        # a consistent composition evaluates the same half-step transform at
        # the identity grid more than once per pass; recognizing the cached
        # grid array by identity lets those calls share one result node
        memo = None
        if pts.node_id is None and id(pts.value) in _GRID_IDS:
            memo = ("pts",) + _GRID_IDS[id(pts.value)]
            hit = self._cache.get(memo)
            if hit is not None:
                return hit
        out = self._apply(pts)
        if memo is not None:
            self._cache[memo] = out
        return out

    def _apply(self, pts: DiffTensor) -> DiffTensor:
        a = self.algebra
        if isinstance(a, HomMatrix):
            if "mat" not in self._cache:
                self._cache["mat"] = mat_exp(self._scaled(a.mat))
            return _apply_homogeneous(self._cache["mat"], pts)
        if isinstance(a, VelocityGrid):
            if "disp" not in self._cache:
                phi = svf_exp(self._scaled(a.field), self.squarings)
                grid = identity_grid(a.field.shape[-3], a.field.shape[-2])
                self._cache["disp"] = tp.sub(phi, grid)
            return pts + _sample_field(self._cache["disp"], pts)

        if "mlp_w" not in self._cache:
            self._cache["mlp_w"] = mlp_unpack(a.packed, a.widths)
        weights = self._cache["mlp_w"]

        # the network is nonlinear in its weights, so scaling must act on the
        # velocity it emits: flowing s*v for unit time equals flowing v for time s
        def velocity(z):
            v = mlp_apply(weights, z)
            return v if self.scale == 1.0 else tp.scalar_mul(v, self.scale)

        # the velocity network consumes flat point lists (...,M,D)
        if a.batch:
            flat_shape = (a.batch[0], pts.size // (a.batch[0] * a.dim), a.dim)
        else:
            flat_shape = (pts.size // a.dim, a.dim)
        out = rk4_flow(velocity, tp.reshape(pts, flat_shape), self.rk4_steps)
        return tp.reshape(out, pts.shape)


class AffineMap(Transform):
    """Raw affine map x ↦ c + (I + A)(x − c) + t about the center, no exponential.

    ``coeffs`` is (...,D,D+1) holding [A | t].  scale_algebra interpolates the
    coefficients linearly toward zero; that is an exact square root only for
    pure translations, so compositions built on it are not inverse consistent.
    """

    can_scale_algebra = True

    def __init__(self, coeffs, scale: float = 1.0):
        coeffs = _tensor(coeffs)
        if coeffs.ndim < 2 or coeffs.shape[-1] != coeffs.shape[-2] + 1:
            raise ValueError(f"AffineMap: expected (...,D,D+1) coefficients, got {coeffs.shape}")
        self.coeffs = coeffs
        self.scale = float(scale)
        self.dim = coeffs.shape[-2]
        self.batch = coeffs.shape[:-2]
        self._cache: dict[str, DiffTensor] = {}

    def scale_algebra(self, s: float) -> "AffineMap":
        return AffineMap(self.coeffs, self.scale * s)

    def inverse(self) -> "AffineMap":
        return self.scale_algebra(-1.0)

    def detach(self) -> "AffineMap":
        return AffineMap(DiffTensor(self.coeffs.value), self.scale)

    def apply(self, points) -> DiffTensor:
        pts = self._coerce_points(points)
        if "mat" not in self._cache:
            c = self.coeffs if self.scale == 1.0 else tp.scalar_mul(self.coeffs, self.scale)
            widths = [(0, 0)] * c.ndim
            widths[-2] = (0, 1)
            padded = tp.pad(c, widths, "zero")
            eye = np.broadcast_to(np.eye(self.dim + 1), padded.shape)
            self._cache["mat"] = tp.add(padded, eye)
        return _apply_homogeneous(self._cache["mat"], pts)


class CompositeTransform(Transform):
    """Function composition; parts apply right to left, so parts[0] acts last."""

    can_scale_algebra = False

    def __init__(self, parts):
        flat: list[Transform] = []
        for p in parts:
            flat.extend(p.parts if isinstance(p, CompositeTransform) else [p])
        if not flat:
            raise ValueError("CompositeTransform: empty part list")
        dims = {p.dim for p in flat}
        if len(dims) != 1:
            raise ValueError(f"CompositeTransform: mixed dims {sorted(dims)}")
        batches = {p.batch for p in flat if p.batch}
        if len(batches) > 1:
            raise ValueError(f"CompositeTransform: mixed batch shapes {sorted(batches)}")
        self.parts = tuple(flat)
        self.dim = flat[0].dim
        self.batch = next(iter(batches)) if batches else ()

    def apply(self, points) -> DiffTensor:
        pts = self._coerce_points(points)
        for part in reversed(self.parts):
            pts = part.apply(pts)
        return pts

    def detach(self) -> "CompositeTransform":
        return CompositeTransform([p.detach() for p in self.parts])


def exponentiate(algebra, s: float = 1.0, **settings) -> ExpPrimitive:
    """Wrap an algebra element as the transform exp(s * algebra)."""
    return ExpPrimitive(algebra, s, **settings)


def compose(first: Transform, second: Transform) -> CompositeTransform:
    """compose(T1, T2) applies T2 first: x ↦ T1(T2(x))."""
    if first.dim != second.dim:
        raise ValueError(f"compose: dim mismatch {first.dim} vs {second.dim}")
    return CompositeTransform([first, second])


def identity_transform(dim: int = 2) -> ExpPrimitive:
    return ExpPrimitive(HomMatrix(np.zeros((dim + 1, dim + 1))))


def apply_points(transform: Transform, pts) -> DiffTensor:
    return transform.apply(pts)


def warp_image(img, transform: Transform) -> DiffTensor:
    """Resample ``img`` at transformed grid positions: (I ∘ T)(x) = I(T(x))."""
    img = _tensor(img)
    h, w = img.shape[-2], img.shape[-1]
    batch = img.shape[0] if img.ndim == 3 else None
    coords = transform.position_field(h, w, batch=batch)
    return tp.grid_sample(img, coords)
