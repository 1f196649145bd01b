"""Synthetic dataset generators, pair sampling, and IDX ingestion."""

import struct

import numpy as np
import pytest

from icreg.data import (
    Dataset,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    PairSampler,
    gen_blob_digits,
    gen_tri_circ,
    load_idx,
)


# --- outline shapes ---------------------------------------------------------------


def test_tri_circ_deterministic_per_seed():
    d1 = gen_tri_circ(12, 32, seed=42)
    d2 = gen_tri_circ(12, 32, seed=42)
    assert np.array_equal(d1.images, d2.images)
    assert np.array_equal(d1.landmarks, d2.landmarks)
    assert d1.meta["classes"] == d2.meta["classes"]
    d3 = gen_tri_circ(12, 32, seed=43)
    assert not np.array_equal(d1.images, d3.images)


def test_tri_circ_intensities_and_shapes():
    ds = gen_tri_circ(10, 32, seed=1)
    assert ds.images.shape == (10, 32, 32)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.landmarks.shape == (10, 3, 2)
    assert set(ds.meta["classes"]) <= {"circle", "triangle"}


def test_circle_band_pixel_count_matches_annulus():
    # pixels at >= 0.5 intensity lie within stroke/2 of the curve, so their
    # count approximates perimeter * stroke
    ds = gen_tri_circ(40, 64, seed=5)
    checked = 0
    for n, cls in enumerate(ds.meta["classes"]):
        if cls != "circle":
            continue
        img = ds.images[n]
        anchors = ds.landmarks[n]
        center = anchors.mean(axis=0)
        radius = np.linalg.norm(anchors - center, axis=1).mean()
        count = int((img >= 0.5).sum())
        # stroke is drawn from [2, 3] px; bracket with the extremes
        perimeter = 2.0 * np.pi * radius * 64
        assert perimeter * 2.0 * 0.85 < count < perimeter * 3.0 * 1.15
        checked += 1
    assert checked >= 5


def test_landmarks_sit_on_rendered_outline():
    ds = gen_tri_circ(25, 32, seed=9)
    size = 32
    for img, pts in zip(ds.images, ds.landmarks):
        for x, y in pts:
            j = int(np.clip(round(x * size - 0.5), 0, size - 1))
            i = int(np.clip(round(y * size - 0.5), 0, size - 1))
            assert img[i, j] >= 0.5, (x, y, img[i, j])


def test_blob_digits_deterministic_and_bounded():
    d1 = gen_blob_digits(8, 32, seed=42)
    d2 = gen_blob_digits(8, 32, seed=42)
    assert np.array_equal(d1.images, d2.images)
    assert d1.images.min() >= 0.0 and d1.images.max() <= 1.0
    assert d1.landmarks is None
    assert all(c in (2, 3, 4) for c in d1.meta["classes"])


def test_blob_digits_vary_across_seeds():
    a = gen_blob_digits(6, 32, seed=1).images
    b = gen_blob_digits(6, 32, seed=2).images
    frac = np.mean(np.abs(a - b) > 0.1)
    assert frac > 0.05


def test_generators_reject_tiny_sizes():
    with pytest.raises(ValueError, match="size"):
        gen_tri_circ(4, 16, seed=0)
    with pytest.raises(ValueError, match="size"):
        gen_blob_digits(4, 16, seed=0)


# --- dataset container -------------------------------------------------------------


def test_dataset_round_trip_with_landmarks(tmp_path):
    ds = gen_tri_circ(7, 32, seed=3)
    ds.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert np.array_equal(back.images, ds.images)
    assert back.meta == ds.meta
    assert np.array_equal(back.landmarks, ds.landmarks)


def test_dataset_round_trip_without_landmarks(tmp_path):
    ds = gen_blob_digits(5, 32, seed=4)
    ds.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert np.array_equal(back.images, ds.images)
    assert back.landmarks is None


def test_dataset_rejects_out_of_range_intensities():
    with pytest.raises(ValueError, match="intensities"):
        Dataset(np.full((2, 8, 8), 1.5))
    with pytest.raises(ValueError, match="images must be"):
        Dataset(np.zeros((8, 8)))


# --- pair sampling -----------------------------------------------------------------


def test_pair_sampler_deterministic():
    s1 = PairSampler(10, seed=5)
    s2 = PairSampler(10, seed=5)
    for _ in range(4):
        a1, b1 = s1.batch(16)
        a2, b2 = s2.batch(16)
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_pair_sampler_never_pairs_an_image_with_itself():
    s = PairSampler(3, seed=8)
    for _ in range(200):
        ia, ib = s.batch(32)
        assert np.all(ia != ib)
        assert ia.min() >= 0 and ia.max() < 3
        assert ib.min() >= 0 and ib.max() < 3


def test_pair_sampler_needs_two_images():
    with pytest.raises(ValueError, match="at least 2"):
        PairSampler(1, seed=0)


# --- IDX files ---------------------------------------------------------------------


def write_idx_pair(tmp_path, images_u8, labels_u8, img_magic=IDX_IMAGES_MAGIC, lbl_magic=IDX_LABELS_MAGIC):
    n, r, c = images_u8.shape
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "lbls.idx"
    ip.write_bytes(struct.pack(">IIII", img_magic, n, r, c) + images_u8.tobytes())
    lp.write_bytes(struct.pack(">II", lbl_magic, len(labels_u8)) + bytes(labels_u8))
    return ip, lp


def test_idx_round_trip_scales_and_pads(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    raw[0, 0, 0] = 255
    ip, lp = write_idx_pair(tmp_path, raw, [7, 1, 7])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (3, 32, 32)
    assert ds.images[0, 2, 2] == 1.0  # 255 maps to exactly 1.0, offset by the pad
    assert np.array_equal(ds.images[:, 2:30, 2:30], raw / 255.0)
    assert np.array_equal(ds.images[:, :2, :], np.zeros((3, 2, 32)))
    assert ds.meta["classes"] == [7, 1, 7]


def test_idx_digit_filter_keeps_matching_labels(tmp_path):
    raw = np.zeros((3, 28, 28), dtype=np.uint8)
    raw[0] = 10
    raw[2] = 30
    ip, lp = write_idx_pair(tmp_path, raw, [5, 3, 5])
    ds = load_idx(ip, lp, digit_filter=5)
    assert ds.images.shape[0] == 2
    assert ds.meta["classes"] == [5, 5]
    assert ds.meta["digit_filter"] == 5
    assert np.allclose(ds.images[0, 2:30, 2:30], 10 / 255.0)
    assert np.allclose(ds.images[1, 2:30, 2:30], 30 / 255.0)


def test_idx_non_mnist_sizes_pass_through_unpadded(tmp_path):
    raw = np.zeros((2, 32, 32), dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, raw, [0, 1])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 32, 32)


def test_idx_bad_image_magic_reports_value(tmp_path):
    raw = np.zeros((1, 28, 28), dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, raw, [0], img_magic=0x00000899)
    with pytest.raises(ValueError, match="bad image magic 0x00000899"):
        load_idx(ip, lp)


def test_idx_swapped_magics_rejected(tmp_path):
    raw = np.zeros((1, 28, 28), dtype=np.uint8)
    # images magic in the labels slot
    ip, lp = write_idx_pair(tmp_path, raw, [0], lbl_magic=IDX_IMAGES_MAGIC)
    with pytest.raises(ValueError, match="bad label magic 0x00000803"):
        load_idx(ip, lp)


def test_idx_truncation_reports_byte_counts(tmp_path):
    raw = np.zeros((2, 28, 28), dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, raw, [0, 1])
    whole = ip.read_bytes()
    ip.write_bytes(whole[: 16 + 28 * 28 + 5])
    with pytest.raises(ValueError, match=rf"truncated at byte {16 + 28 * 28 + 5}, need {16 + 2 * 28 * 28}"):
        load_idx(ip, lp)
    ip.write_bytes(whole[:10])
    with pytest.raises(ValueError, match="truncated header at byte 10"):
        load_idx(ip, lp)


def test_idx_label_count_mismatch_rejected(tmp_path):
    raw = np.zeros((2, 28, 28), dtype=np.uint8)
    ip, _ = write_idx_pair(tmp_path, raw, [0, 1])
    lp = tmp_path / "short.idx"
    lp.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, 1) + bytes([4]))
    with pytest.raises(ValueError, match="label count 1 does not match image count 2"):
        load_idx(ip, lp)
