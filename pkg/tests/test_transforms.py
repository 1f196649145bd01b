import math

import numpy as np
import pytest

from icreg import tape as tp
from icreg.fileio import load_warp, save_warp
from icreg.lie import (
    AffineMap,
    CompositeTransform,
    ExpPrimitive,
    HomMatrix,
    VelocityGrid,
    VelocityMlp,
    apply_points,
    compose,
    exponentiate,
    identity_grid,
    identity_transform,
    mat_exp,
    mlp_param_count,
    warp_image,
)
from icreg.tape import DiffTensor, Tape

RNG = np.random.default_rng(63)


def affine_algebra(block=None, trans=None):
    m = np.zeros((3, 3))
    if block is not None:
        m[:2, :2] = block
    if trans is not None:
        m[:2, 2] = trans
    return HomMatrix(m)


def translation_transform(tx, ty):
    return exponentiate(affine_algebra(trans=[tx, ty]))


def rotation_transform(theta):
    return exponentiate(affine_algebra(block=[[0.0, -theta], [theta, 0.0]]))


def smooth_velocity(h, w, scale=0.02, seed=11):
    r = np.random.default_rng(seed)
    grid = identity_grid(h, w)
    x, y = grid[..., 0], grid[..., 1]
    f = np.zeros((h, w, 2))
    for _ in range(3):
        fx, fy = r.integers(1, 3, size=2)
        px, py = r.uniform(0, 2 * np.pi, size=2)
        a = r.uniform(0.3, 1.0, size=2)
        f[..., 0] += a[0] * np.sin(2 * np.pi * fx * x + px) * np.cos(2 * np.pi * fy * y + py)
        f[..., 1] += a[1] * np.cos(2 * np.pi * fx * x + px) * np.sin(2 * np.pi * fy * y + py)
    return f * scale


def random_mlp_algebra(scale=0.4, seed=13):
    r = np.random.default_rng(seed)
    return VelocityMlp(r.normal(size=(mlp_param_count(),)) * scale)


def interior_grid(h, w, border=4):
    return identity_grid(h, w)[border:-border, border:-border]


def mean_interior_deviation(transform_a, transform_b, h=32, w=32, border=4):
    """Mean point-norm difference between two transforms on interior grid points."""
    pts = interior_grid(h, w, border).reshape(-1, 2)
    ya = transform_a.apply(pts).value
    yb = transform_b.apply(pts).value
    return np.linalg.norm(ya - yb, axis=-1).mean()


def roundtrip_deviation(fwd, bwd, h=32, w=32, border=4):
    pts = interior_grid(h, w, border).reshape(-1, 2)
    back = fwd.apply(bwd.apply(pts)).value
    return np.linalg.norm(back - pts, axis=-1).mean()


# --- exponentiate basics --------------------------------------------------------


def test_zero_scale_is_identity_for_every_family():
    pts = RNG.random((30, 2))
    algebras = [
        affine_algebra(block=RNG.normal(size=(2, 2)), trans=RNG.normal(size=2) * 0.1),
        VelocityGrid(smooth_velocity(16, 16)),
        random_mlp_algebra(),
    ]
    for g in algebras:
        out = exponentiate(g, 0.0).apply(pts).value
        np.testing.assert_allclose(out, pts, atol=1e-12)


def test_identity_transform_fixes_points():
    pts = RNG.random((10, 2))
    np.testing.assert_allclose(identity_transform().apply(pts).value, pts, atol=1e-15)


def test_rotation_fixes_center():
    center = np.array([[0.5, 0.5]])
    out = apply_points(rotation_transform(math.pi / 2), center).value
    np.testing.assert_allclose(out, center, atol=1e-14)


def test_rotation_quarter_turn_moves_axis_point():
    t = rotation_transform(math.pi / 2)
    out = t.apply(np.array([[0.7, 0.5]])).value
    # (0.2, 0) about center rotates to (0, 0.2)
    np.testing.assert_allclose(out, [[0.5, 0.7]], atol=1e-12)


def test_scale_algebra_composes_multiplicatively():
    t = rotation_transform(0.8)
    half = t.scale_algebra(0.5)
    quarter = half.scale_algebra(0.5)
    assert quarter.scale == pytest.approx(0.25)
    assert t.can_scale_algebra and quarter.can_scale_algebra


# --- group laws / square roots ---------------------------------------------------


def test_affine_sqrt_self_composition_exact():
    g = affine_algebra(block=RNG.normal(size=(2, 2)) * 0.5, trans=[0.05, -0.03])
    whole = exponentiate(g, 1.0)
    half = exponentiate(g, 0.5)
    dev = mean_interior_deviation(compose(half, half), whole)
    assert dev < 1e-12


def test_affine_inverse_roundtrip_exact():
    g = affine_algebra(block=RNG.normal(size=(2, 2)) * 0.4, trans=[0.02, 0.04])
    fwd = exponentiate(g, 1.0)
    dev = roundtrip_deviation(fwd, fwd.inverse())
    assert dev < 1e-12


def test_affine_scale_additivity():
    g = affine_algebra(block=RNG.normal(size=(2, 2)) * 0.5, trans=[0.01, 0.02])
    lhs = compose(exponentiate(g, 0.3), exponentiate(g, 0.7))
    dev = mean_interior_deviation(lhs, exponentiate(g, 1.0))
    assert dev < 1e-12


def test_svf_sqrt_self_composition():
    g = VelocityGrid(smooth_velocity(32, 32, scale=0.03))
    whole = exponentiate(g, 1.0)
    half = exponentiate(g, 0.5)
    dev = mean_interior_deviation(compose(half, half), whole)
    assert dev < 1e-3


def test_svf_inverse_roundtrip():
    g = VelocityGrid(smooth_velocity(32, 32, scale=0.03, seed=21))
    fwd = exponentiate(g, 1.0)
    dev = roundtrip_deviation(fwd, fwd.inverse())
    assert dev < 1e-3


def test_mlp_sqrt_self_composition():
    g = random_mlp_algebra(scale=0.5, seed=17)
    whole = exponentiate(g, 1.0)
    half = exponentiate(g, 0.5)
    dev = mean_interior_deviation(compose(half, half), whole)
    assert dev < 1e-3


def test_mlp_inverse_roundtrip():
    g = random_mlp_algebra(scale=0.5, seed=19)
    fwd = exponentiate(g, 1.0)
    dev = roundtrip_deviation(fwd, fwd.inverse())
    assert dev < 1e-3


# --- composition ------------------------------------------------------------------


def test_compose_identity_passthrough():
    t = rotation_transform(0.4)
    pts = RNG.random((12, 2))
    got = compose(identity_transform(), t).apply(pts).value
    np.testing.assert_allclose(got, t.apply(pts).value, atol=1e-13)


def test_compose_applies_second_argument_first():
    shift_x = translation_transform(0.25, 0.0)
    rot = rotation_transform(math.pi / 2)
    # rot(shift(p)): p=(0.5,0.5) -> (0.75,0.5) -> rotated to (0.5,0.75)
    out = compose(rot, shift_x).apply(np.array([[0.5, 0.5]])).value
    np.testing.assert_allclose(out, [[0.5, 0.75]], atol=1e-12)
    # shift(rot(p)) differs
    out2 = compose(shift_x, rot).apply(np.array([[0.5, 0.5]])).value
    np.testing.assert_allclose(out2, [[0.75, 0.5]], atol=1e-12)


def test_compose_two_affines_matches_matrix_product():
    m1 = np.zeros((3, 3))
    m1[:2] = RNG.normal(size=(2, 3)) * 0.4
    m2 = np.zeros((3, 3))
    m2[:2] = RNG.normal(size=(2, 3)) * 0.4
    t1 = exponentiate(HomMatrix(m1))
    t2 = exponentiate(HomMatrix(m2))
    pts = RNG.random((40, 2))
    got = compose(t1, t2).apply(pts).value

    e1, e2 = mat_exp(m1).value, mat_exp(m2).value
    hom = np.concatenate([pts - 0.5, np.ones((40, 1))], axis=1)
    want = (hom @ (e1 @ e2).T)[:, :2] + 0.5
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_composite_has_no_algebra_scaling():
    t = compose(rotation_transform(0.3), translation_transform(0.1, 0.0))
    assert not t.can_scale_algebra
    assert t.can_apply
    assert not hasattr(t, "scale_algebra")


def test_composite_flattens_nested_parts():
    a, b, c = (rotation_transform(x) for x in (0.1, 0.2, 0.3))
    t = compose(a, compose(b, c))
    assert len(t.parts) == 3


def test_compose_rejects_dim_mismatch():
    t2 = rotation_transform(0.1)
    g4 = HomMatrix(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="dim"):
        compose(t2, exponentiate(g4))


# --- raw affine map (no exponential) ----------------------------------------------


def test_affine_map_zero_coeffs_is_identity():
    t = AffineMap(np.zeros((2, 3)))
    pts = RNG.random((15, 2))
    np.testing.assert_allclose(t.apply(pts).value, pts, atol=1e-15)


def test_affine_map_matches_hand_expansion():
    coeffs = RNG.normal(size=(2, 3)) * 0.3
    t = AffineMap(coeffs)
    pts = RNG.random((25, 2))
    got = t.apply(pts).value
    want = (pts - 0.5) @ (np.eye(2) + coeffs[:, :2]).T + coeffs[:, 2] + 0.5
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_affine_map_translation_only_inverts_exactly():
    t = AffineMap(np.array([[0.0, 0.0, 0.08], [0.0, 0.0, -0.05]]))
    assert roundtrip_deviation(t, t.scale_algebra(-1.0)) < 1e-12


def test_affine_map_generic_scaling_is_not_a_true_inverse():
    coeffs = np.zeros((2, 3))
    coeffs[:2, :2] = [[0.3, 0.1], [-0.2, 0.25]]
    t = AffineMap(coeffs)
    dev = roundtrip_deviation(t, t.scale_algebra(-1.0))
    assert dev > 1e-3  # linear interpolation toward identity is not a group inverse


# --- batching ----------------------------------------------------------------------


def test_batched_affine_matches_per_item():
    mats = np.zeros((3, 3, 3))
    mats[:, :2] = RNG.normal(size=(3, 2, 3)) * 0.4
    batched = exponentiate(HomMatrix(mats))
    pts = RNG.random((3, 11, 2))
    got = batched.apply(pts).value
    for i in range(3):
        single = exponentiate(HomMatrix(mats[i])).apply(pts[i]).value
        np.testing.assert_allclose(got[i], single, atol=1e-12)


def test_batched_transform_tiles_constant_points():
    mats = np.zeros((2, 3, 3))
    mats[:, :2, 2] = [[0.1, 0.0], [0.0, 0.1]]
    t = exponentiate(HomMatrix(mats))
    pts = RNG.random((7, 2))
    got = t.apply(pts).value
    assert got.shape == (2, 7, 2)
    np.testing.assert_allclose(got[0], pts + [0.1, 0.0], atol=1e-12)
    np.testing.assert_allclose(got[1], pts + [0.0, 0.1], atol=1e-12)


def test_batched_transform_rejects_taped_unbatched_points():
    mats = np.zeros((2, 3, 3))
    t = exponentiate(HomMatrix(mats))
    tape = Tape()
    pts = tape.leaf(RNG.random((7, 2)))
    with pytest.raises(ValueError, match="per-batch"):
        t.apply(pts)


def test_position_field_batch_tiling():
    mats = np.zeros((2, 3, 3))
    t = exponentiate(HomMatrix(mats))
    field = t.position_field(8, 8).value
    assert field.shape == (2, 8, 8, 2)
    np.testing.assert_allclose(field[0], identity_grid(8, 8), atol=1e-14)


# --- warping ------------------------------------------------------------------------


def test_warp_with_identity_returns_image():
    img = RNG.random((12, 10))
    out = warp_image(img, identity_transform()).value
    # centering costs a rounding step, so exactness means the self-registration bound
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_warp_one_pixel_translation_shifts_interior():
    img = RNG.random((8, 8))
    out = warp_image(img, translation_transform(1.0 / 8, 0.0)).value
    np.testing.assert_allclose(out[:, :-1], img[:, 1:], atol=1e-12)


def test_warp_batched_images_and_transforms():
    imgs = RNG.random((2, 8, 8))
    mats = np.zeros((2, 3, 3))
    mats[0, :2, 2] = [1.0 / 8, 0.0]
    t = exponentiate(HomMatrix(mats))
    out = warp_image(imgs, t).value
    np.testing.assert_allclose(out[0, :, :-1], imgs[0, :, 1:], atol=1e-12)
    np.testing.assert_array_equal(out[1], imgs[1])


def test_warp_gradient_reaches_algebra():
    tape = Tape()
    m = tape.leaf(np.zeros((3, 3)))
    masked = m * np.array([[1.0, 1, 1], [1, 1, 1], [0, 0, 0]])
    t = exponentiate(HomMatrix(masked))
    img = RNG.random((8, 8))
    warped = warp_image(img, t)
    loss = tp.tmean(tp.square(warped - RNG.random((8, 8))))
    g = tp.backprop(loss).of(m)
    assert np.abs(g[:2]).max() > 0


# --- warp container ------------------------------------------------------------------


def test_warp_file_round_trip(tmp_path):
    field = rotation_transform(0.3).position_field(16, 16).value
    path = tmp_path / "t.icwarp"
    save_warp(path, field)
    loaded = load_warp(path)
    assert np.array_equal(loaded, field)
    assert path.read_bytes()[:8] == b"ICWARP01"


def test_warp_file_bad_magic(tmp_path):
    path = tmp_path / "bad.icwarp"
    path.write_bytes(b"XXXXXXXX" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_warp(path)
