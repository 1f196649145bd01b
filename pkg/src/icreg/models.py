"""Registration models: antisymmetrized step networks and composition trees.

A leaf step evaluates its backbone on both image orders and subtracts the
raw outputs, so swapping the pair negates the algebra element and the
resulting transform family is inverse consistent by construction.  Internal
nodes chain steps, either plainly (two_step_baseline, which breaks that
symmetry) or through square roots of the first step (two_step_consistent,
which keeps it).

Composition order: ``compose(t1, t2)`` applies ``t2`` to the point first,
and warping an image samples it at the transformed points.  A worked
two-step example: with ``t1`` from the first step and ``t2`` from the
second evaluated on the once-warped pair, the combined map sends ``x`` to
``t1(t2(x))``, so the moving image is effectively warped by ``t1`` and the
residual ``t2`` refines it.
"""

from __future__ import annotations

import numpy as np

from . import tape as tp
from .backbones import ConvMatrixNet, SmallUnet, downsample_images, pack_pair
from .lie import (
    AffineMap,
    HomMatrix,
    Transform,
    VelocityGrid,
    VelocityMlp,
    compose,
    exponentiate,
    mlp_param_count,
    warp_image,
)
from .params import ParamStore
from .tape import DiffTensor, Tape

FAMILIES = ("rigid", "affine", "svf", "mlp")
PARAMETERIZATIONS = ("antisym", "exp", "direct")

#: fixed smoothing (in pixels) of the emitted velocity grid; keeps the
#: stationary-field exponential and its inverse in their accurate regime
SVF_SMOOTH_SIGMA = 2.0


def _smooth_velocity(raw, sigma: float = SVF_SMOOTH_SIGMA) -> DiffTensor:
    bsz, h, w, d = raw.shape
    chans = []
    for c in range(d):
        ch = tp.reshape(tp.crop(raw, [(0, bsz), (0, h), (0, w), (c, c + 1)]), (bsz, h, w))
        ch = tp.gaussian_blur(ch, sigma)
        chans.append(tp.reshape(ch, (bsz, h, w, 1)))
    return tp.concat(chans, axis=3)


def _as_batched(x) -> DiffTensor:
    if not isinstance(x, DiffTensor):
        x = DiffTensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 2:
        x = tp.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ValueError(f"expected (H,W) or (B,H,W) images, got {x.shape}")
    return x


class _Node:
    """Shared interface of model-tree nodes."""

    resolution: int
    produces_scalable: bool

    def register_leaves(self, tape: Tape, out: dict | None = None) -> dict[str, DiffTensor]:
        """Put every parameter of the subtree on ``tape`` exactly once."""
        if out is None:
            out = {}
        self._register(tape, out)
        return out

    def forward(self, tape: Tape, a, b) -> tuple[Transform, list[DiffTensor]]:
        """Evaluate on a pair, managing parameter leaves internally."""
        leaves = self.register_leaves(tape)
        return self.forward_leaves(leaves, _as_batched(a), _as_batched(b))

    def _register(self, tape, out):
        raise NotImplementedError

    def forward_leaves(self, leaves, a, b):
        raise NotImplementedError

    def leaf_steps(self):
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


class StepNetwork(_Node):
    """One antisymmetrized registration step.

    ``family`` picks the algebra: matrix families use the pooled conv
    backbone (rigid projects the linear block to skew-symmetric, both zero
    the homogeneous row), svf uses the unet, and mlp reshapes the pooled
    head output into the packed coordinate-network weights.

    ``parameterization`` exists for the affine convergence experiments:
    "antisym" is the inverse-consistent construction, "exp" exponentiates
    the raw forward output only, and "direct" uses the raw output as
    displacement-style affine coefficients with no exponential at all.
    """

    produces_scalable = True

    def __init__(
        self,
        family: str,
        store: ParamStore,
        prefix: str,
        seed: int,
        resolution: int = 32,
        parameterization: str = "antisym",
    ):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(
                f"unknown parameterization {parameterization!r}, expected one of {PARAMETERIZATIONS}"
            )
        if parameterization != "antisym" and family != "affine":
            raise ValueError(f"parameterization {parameterization!r} is only defined for affine steps")
        self.family = family
        self.store = store
        self.prefix = prefix
        self.seed = int(seed)
        self.resolution = int(resolution)
        self.parameterization = parameterization
        if family == "svf":
            self.backbone = SmallUnet(store, prefix, 2, seed)
        elif family == "mlp":
            self.backbone = ConvMatrixNet(store, prefix, mlp_param_count(), seed)
        else:
            self.backbone = ConvMatrixNet(store, prefix, 6, seed)

    @property
    def backbone_kind(self) -> str:
        return "small_unet" if isinstance(self.backbone, SmallUnet) else "conv_matrix_net"

    def _register(self, tape, out):
        for name in self.backbone.param_names():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r} in model tree")
            out[name] = tape.leaf(self.store[name], name)

    def leaf_steps(self):
        yield self

    def _at_resolution(self, x) -> DiffTensor:
        _, h, w = x.shape
        if h != w:
            raise ValueError(f"step networks expect square images, got {x.shape}")
        if h == self.resolution:
            return x
        if h % self.resolution:
            raise ValueError(f"cannot reduce {h}x{w} images to working resolution {self.resolution}")
        return downsample_images(x, h // self.resolution)

    def raw_output(self, leaves, a, b) -> DiffTensor:
        """Backbone output for the ordered pair, at working resolution."""
        return self.backbone(leaves, pack_pair(a, b))

    def algebra(self, leaves, a, b):
        """Antisymmetrized and post-processed algebra element for (a, b)."""
        if a.shape != b.shape:
            raise ValueError(f"image pair shape mismatch: {a.shape} vs {b.shape}")
        a = self._at_resolution(_as_batched(a))
        b = self._at_resolution(_as_batched(b))
        raw = self.raw_output(leaves, a, b) - self.raw_output(leaves, b, a)
        return self._postprocess(raw)

    def _postprocess(self, raw):
        if self.family == "svf":
            return VelocityGrid(_smooth_velocity(raw))
        if self.family == "mlp":
            return VelocityMlp(raw)
        bsz = raw.shape[0]
        m = tp.reshape(raw, (bsz, 2, 3))
        if self.family == "rigid":
            blk = tp.crop(m, [(0, bsz), (0, 2), (0, 2)])
            tcol = tp.crop(m, [(0, bsz), (0, 2), (2, 3)])
            skew = tp.scalar_mul(blk - tp.transpose(blk, (0, 2, 1)), 0.5)
            m = tp.concat([skew, tcol], axis=2)
        return HomMatrix(tp.pad(m, ((0, 0), (0, 1), (0, 0)), mode="zero"))

    def forward_leaves(self, leaves, a, b):
        if a.shape != b.shape:
            raise ValueError(f"image pair shape mismatch: {a.shape} vs {b.shape}")
        if self.parameterization == "antisym":
            alg = self.algebra(leaves, a, b)
            vels = [alg.field] if self.family == "svf" else []
            return exponentiate(alg, 1.0), vels
        ad = self._at_resolution(a)
        bd = self._at_resolution(b)
        raw = self.raw_output(leaves, ad, bd)
        coeffs = tp.reshape(raw, (raw.shape[0], 2, 3))
        if self.parameterization == "direct":
            return AffineMap(coeffs), []
        hom = tp.pad(coeffs, ((0, 0), (0, 1), (0, 0)), mode="zero")
        return exponentiate(HomMatrix(hom), 1.0), []

    def descriptor(self) -> dict:
        return {
            "kind": "step",
            "family": self.family,
            "parameterization": self.parameterization,
            "backbone": self.backbone_kind,
            "resolution": self.resolution,
            "seed": self.seed,
            "prefix": self.prefix,
        }


class _PairNode(_Node):
    produces_scalable = False
    kind = ""

    def __init__(self, first: _Node, rest: _Node):
        self.first = first
        self.rest = rest
        self.resolution = max(first.resolution, rest.resolution)

    def _register(self, tape, out):
        self.first._register(tape, out)
        self.rest._register(tape, out)

    def leaf_steps(self):
        yield from self.first.leaf_steps()
        yield from self.rest.leaf_steps()

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "resolution": self.resolution,
            "first": self.first.descriptor(),
            "rest": self.rest.descriptor(),
        }


class TwoStepNode(_PairNode):
    """Plain refinement: rest sees the pair already warped by first.

    Each half is inverse consistent on the pair it sees, but the halves see
    different pairs, so the composition is not.  Kept as the comparison
    operator for the convergence experiments.
    """

    kind = "two_step"

    def forward_leaves(self, leaves, a, b):
        t1, v1 = self.first.forward_leaves(leaves, a, b)
        warped = warp_image(a, t1)
        t2, v2 = self.rest.forward_leaves(leaves, warped, b)
        return compose(t1, t2), v1 + v2


class TwoStepConsistentNode(_PairNode):
    """Symmetric refinement through the square root of the first step.

    Both images move to the halfway frame of the first transform, the rest
    registers them there, and the halves re-attach on both sides, so the
    swap symmetry of the leaves survives composition.
    """

    kind = "two_step_consistent"

    def __init__(self, first: _Node, rest: _Node):
        if not first.produces_scalable:
            raise ValueError(
                "two_step_consistent: first child must produce an algebra-scalable transform"
            )
        super().__init__(first, rest)

    def forward_leaves(self, leaves, a, b):
        t1, v1 = self.first.forward_leaves(leaves, a, b)
        half = t1.scale_algebra(0.5)
        half_inv = t1.scale_algebra(-0.5)
        a_mid = warp_image(a, half)
        b_mid = warp_image(b, half_inv)
        t2, v2 = self.rest.forward_leaves(leaves, a_mid, b_mid)
        return compose(half, compose(t2, half)), v1 + v2


def antisymmetrize_eval(net: StepNetwork, a, b):
    """Algebra element of one step on one pair, on a throwaway tape."""
    tape = Tape()
    leaves = net.register_leaves(tape)
    return net.algebra(leaves, _as_batched(a), _as_batched(b))


def _run(node: _Node, a, b) -> Transform:
    # evaluation-only entry points hand back tape-free transforms so results
    # from separate runs can be composed and measured together
    return node.forward(Tape(), a, b)[0].detach()


def step_forward(net: StepNetwork, a, b) -> Transform:
    """Transform of a single step: the exponential of its algebra element."""
    return _run(net, a, b)


def two_step_baseline(phi: _Node, psi: _Node, a, b) -> Transform:
    return _run(TwoStepNode(phi, psi), a, b)


def two_step_consistent(phi: _Node, psi: _Node, a, b) -> Transform:
    return _run(TwoStepConsistentNode(phi, psi), a, b)


def n_step_model(steps: list[_Node]) -> _Node:
    """Right-fold a step list into nested consistent two-step nodes."""
    if not steps:
        raise ValueError("n_step_model: need at least one step")
    node = steps[-1]
    for step in reversed(steps[:-1]):
        node = TwoStepConsistentNode(step, node)
    return node


def n_step_consistent(steps: list[_Node], a, b) -> Transform:
    return _run(n_step_model(steps), a, b)


# --- descriptors and stock models -------------------------------------------


def build_model(desc: dict, store: ParamStore) -> _Node:
    """Rebuild a model tree from its descriptor, registering parameters.

    Seeds in the descriptor make the rebuilt initialization identical, so
    a checkpoint saved from the same descriptor loads cleanly.
    """
    kind = desc.get("kind")
    if kind == "step":
        return StepNetwork(
            desc["family"],
            store,
            desc["prefix"],
            desc["seed"],
            desc["resolution"],
            desc.get("parameterization", "antisym"),
        )
    if kind == "two_step":
        return TwoStepNode(build_model(desc["first"], store), build_model(desc["rest"], store))
    if kind == "two_step_consistent":
        return TwoStepConsistentNode(
            build_model(desc["first"], store), build_model(desc["rest"], store)
        )
    raise ValueError(f"unknown model node kind {kind!r}")


#: registration zoo: name -> list of (family, resolution); multi-step
#: entries fold through two_step_consistent, earlier steps at half resolution
ZOO = {
    "rigid": [("rigid", 32)],
    "affine": [("affine", 32)],
    "svf": [("svf", 32)],
    "mlp": [("mlp", 32)],
    "tsc_mlp_svf": [("mlp", 16), ("svf", 32)],
    "nsc_affine2_svf2": [("affine", 16), ("affine", 16), ("svf", 32), ("svf", 32)],
}


def build_zoo_model(name: str, store: ParamStore, seed: int = 0) -> _Node:
    if name not in ZOO:
        raise ValueError(f"unknown zoo model {name!r}, expected one of {sorted(ZOO)}")
    steps = [
        StepNetwork(family, store, f"s{i}", seed + 101 * i, resolution)
        for i, (family, resolution) in enumerate(ZOO[name])
    ]
    return n_step_model(steps)


GRID_PARAMETERIZATIONS = ("direct", "exp", "antisym")
GRID_COMPOSITIONS = ("one_step", "two_step", "two_step_consistent")


def build_grid_model(
    parameterization: str,
    composition: str,
    store: ParamStore,
    seed: int = 0,
    resolution: int = 32,
) -> _Node:
    """One cell of the affine convergence grid: 3 parameterizations x 3 compositions."""
    if composition not in GRID_COMPOSITIONS:
        raise ValueError(f"unknown composition {composition!r}, expected one of {GRID_COMPOSITIONS}")

    def step(i):
        return StepNetwork(
            "affine", store, f"s{i}", seed + 101 * i, resolution, parameterization
        )

    if composition == "one_step":
        return step(0)
    if composition == "two_step":
        return TwoStepNode(step(0), step(1))
    return TwoStepConsistentNode(step(0), step(1))
