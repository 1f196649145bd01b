"""Synthetic 2D datasets and IDX digit ingestion.

A dataset on disk is a directory: ``images.bin`` holds the image stack in
the shared binary container, ``meta.json`` records how it was made, and
``landmarks.csv`` (when present) lists per-image outline anchors in
normalized coordinates.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import load_image_stack, save_image_stack

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N,H,W) float64 in [0,1]
    meta: dict = field(default_factory=dict)
    landmarks: np.ndarray | None = None  # (N,K,2) normalized (x, y)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"Dataset: images must be (N,H,W), got {self.images.shape}")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"Dataset: intensities must lie in [0,1], got [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_image_stack(out / "images.bin", self.images)
        with open(out / "meta.json", "w") as f:
            json.dump(self.meta, f, indent=1, sort_keys=True)
        if self.landmarks is not None:
            with open(out / "landmarks.csv", "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["image", "point", "x", "y"])
                for i, pts in enumerate(self.landmarks):
                    for k, (x, y) in enumerate(pts):
                        wr.writerow([i, k, format(x, ".17g"), format(y, ".17g")])
        return out

    @staticmethod
    def load(in_dir) -> "Dataset":
        src = Path(in_dir)
        images = load_image_stack(src / "images.bin")
        with open(src / "meta.json") as f:
            meta = json.load(f)
        landmarks = None
        lm_path = src / "landmarks.csv"
        if lm_path.exists():
            rows = {}
            with open(lm_path, newline="") as f:
                for rec in csv.DictReader(f):
                    rows.setdefault(int(rec["image"]), []).append(
                        (int(rec["point"]), float(rec["x"]), float(rec["y"]))
                    )
            pts = []
            for i in range(len(images)):
                ordered = sorted(rows.get(i, []))
                pts.append([(x, y) for _, x, y in ordered])
            landmarks = np.asarray(pts, dtype=np.float64)
        return Dataset(images, meta, landmarks)


class PairSampler:
    """Uniform ordered pairs (i, j), i != j, reproducible per seed."""

    def __init__(self, count: int, seed: int):
        if count < 2:
            raise ValueError(f"PairSampler: need at least 2 images, got {count}")
        self.count = int(count)
        self._rng = np.random.default_rng(seed)

    def batch(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        ia = self._rng.integers(0, self.count, size=k)
        ib = self._rng.integers(0, self.count - 1, size=k)
        ib = np.where(ib >= ia, ib + 1, ib)
        return ia, ib


# --- hollow triangles and circles ---------------------------------------------


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")  # px[i,j] = x of column j


def _outline_image(dist_px: np.ndarray, stroke_px: float, ramp_px: float = 1.0) -> np.ndarray:
    # anti-aliased band: half intensity exactly at the nominal stroke edge,
    # linear falloff over ``ramp_px`` pixels centered there
    return np.clip((stroke_px / 2.0 + ramp_px / 2.0 - dist_px) / ramp_px, 0.0, 1.0)


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    t = ((px - ax) * vx + (py - ay) * vy) / max(vx * vx + vy * vy, 1e-30)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def gen_tri_circ(count: int, size: int, seed: int) -> Dataset:
    """Hollow circles and equilateral triangles with outline landmarks.

    Centers land in the middle 60% of the frame and radii in
    [0.15, 0.35] of the width; the center range additionally shrinks so the
    whole outline stays in frame, keeping landmarks on rendered pixels.
    Stroke width is 2-3 px and edges are anti-aliased over one pixel.
    """
    if size < 32:
        raise ValueError(f"gen_tri_circ: size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    xs, ys = _pixel_centers(size)
    images = np.zeros((count, size, size))
    landmarks = np.zeros((count, 3, 2))
    classes = []
    for n in range(count):
        shape = "circle" if rng.random() < 0.5 else "triangle"
        radius = rng.uniform(0.15, 0.35)
        stroke = rng.uniform(2.0, 3.0)
        margin = radius + (stroke / 2.0 + 1.0) / size
        lo, hi = max(0.2, margin), min(0.8, 1.0 - margin)
        cx = rng.uniform(lo, hi)
        cy = rng.uniform(lo, hi)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        if shape == "circle":
            dist = np.abs(np.hypot(xs - cx, ys - cy) - radius) * size
            angles = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
            anchors = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
        else:
            angles = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
            verts = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
            dist = np.minimum.reduce(
                [_segment_distance(xs, ys, verts[i], verts[(i + 1) % 3]) for i in range(3)]
            ) * size
            anchors = verts
        images[n] = _outline_image(dist, stroke)
        landmarks[n] = anchors
        classes.append(shape)
    meta = {"count": count, "size": size, "seed": seed, "generator": "tri_circ", "classes": classes}
    return Dataset(images, meta, landmarks)


# --- digit-like blobs ----------------------------------------------------------


def _bezier_points(p0, p1, p2, p3, samples: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    u = 1.0 - t
    return u**3 * p0 + 3 * u**2 * t * p1 + 3 * u * t**2 * p2 + t**3 * p3


def gen_blob_digits(count: int, size: int, seed: int) -> Dataset:
    """Closed smooth strokes from chained random cubic Bezier segments.

    Shapes share a size range but wander around the frame center, so pairs
    are roughly alignable while still individually distinct; the soft 2.5 px
    edge ramp keeps similarity gradients alive at small overlaps.
    """
    if size < 32:
        raise ValueError(f"gen_blob_digits: size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    xs, ys = _pixel_centers(size)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    stroke = 4.0
    images = np.zeros((count, size, size))
    classes = []
    for n in range(count):
        n_seg = int(rng.integers(2, 5))
        base = rng.uniform(0.0, 2.0 * np.pi)
        angles = base + np.arange(n_seg) * 2.0 * np.pi / n_seg + rng.uniform(-0.4, 0.4, n_seg)
        radii = rng.uniform(0.20, 0.26, n_seg)
        center = 0.5 + rng.uniform(-0.14, 0.14, 2)
        anchors = center + radii[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        pts = []
        for k in range(n_seg):
            p0, p3 = anchors[k], anchors[(k + 1) % n_seg]
            p1 = p0 + rng.uniform(-0.08, 0.08, 2)
            p2 = p3 + rng.uniform(-0.08, 0.08, 2)
            pts.append(_bezier_points(p0, p1, p2, p3, 64))
        curve = np.clip(np.concatenate(pts), 0.05, 0.95)
        d2 = np.sum((pix[:, None, :] - curve[None, :, :]) ** 2, axis=2)
        dist = np.sqrt(d2.min(axis=1)).reshape(size, size) * size
        images[n] = _outline_image(dist, stroke, ramp_px=2.5)
        classes.append(n_seg)
    meta = {
        "count": count,
        "size": size,
        "seed": seed,
        "generator": "blob_digits",
        "classes": classes,
    }
    return Dataset(images, meta, None)


# --- IDX ingestion --------------------------------------------------------------


def _read_u32s(buf: bytes, offset: int, n: int, path) -> tuple[int, ...]:
    end = offset + 4 * n
    if len(buf) < end:
        raise ValueError(f"{path}: truncated header at byte {len(buf)}, need {end}")
    return struct.unpack(f">{n}I", buf[offset:end])


def load_idx(images_path, labels_path, digit_filter: int | None = None) -> Dataset:
    """Read big-endian IDX image/label files, as distributed for MNIST.

    Intensities scale to [0,1] with u8 255 mapping to exactly 1.0, and
    28x28 images are zero-padded to 32x32.
    """
    img_buf = Path(images_path).read_bytes()
    (magic,) = _read_u32s(img_buf, 0, 1, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad image magic 0x{magic:08x} at byte 0")
    n, rows, cols = _read_u32s(img_buf, 4, 3, images_path)
    need = 16 + n * rows * cols
    if len(img_buf) < need:
        raise ValueError(f"{images_path}: truncated at byte {len(img_buf)}, need {need}")
    images = np.frombuffer(img_buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = images.reshape(n, rows, cols).astype(np.float64) / 255.0

    lbl_buf = Path(labels_path).read_bytes()
    (magic,) = _read_u32s(lbl_buf, 0, 1, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x} at byte 0")
    (n_lbl,) = _read_u32s(lbl_buf, 4, 1, labels_path)
    if len(lbl_buf) < 8 + n_lbl:
        raise ValueError(f"{labels_path}: truncated at byte {len(lbl_buf)}, need {8 + n_lbl}")
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_lbl, offset=8).astype(int)
    if n_lbl != n:
        raise ValueError(f"label count {n_lbl} does not match image count {n}")

    if digit_filter is not None:
        keep = labels == digit_filter
        images, labels = images[keep], labels[keep]
    if images.shape[1:] == (28, 28):
        images = np.pad(images, ((0, 0), (2, 2), (2, 2)))
    meta = {
        "count": int(images.shape[0]),
        "size": int(images.shape[1]),
        "generator": "idx",
        "classes": labels.tolist(),
        "digit_filter": digit_filter,
    }
    return Dataset(images, meta, None)
