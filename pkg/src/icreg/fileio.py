"""Binary array containers and PGM image I/O.

Array container layout (used for warp fields and image stacks):

    8 bytes   magic (``ICWARP01`` for position fields, ``ICIMGS01`` for stacks)
    4 bytes   u32 little-endian rank
    4*rank    u32 little-endian extents
    ...       little-endian float64 payload, row-major
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

WARP_MAGIC = b"ICWARP01"
IMAGES_MAGIC = b"ICIMGS01"


def write_array(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(np.uint32(arr.ndim).tobytes())
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_array(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != magic:
        raise ValueError(f"{path}: expected magic {magic!r}, found {raw[:8]!r}")
    rank = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    shape = tuple(int(n) for n in np.frombuffer(raw[12 : 12 + 4 * rank], dtype="<u4"))
    start = 12 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) - start < count * 8:
        raise ValueError(f"{path}: payload truncated, expected {count} float64 values")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()


def save_warp(path, field: np.ndarray) -> None:
    """Write a position field (H,W,D) as an ICWARP01 file."""
    write_array(path, WARP_MAGIC, field)


def load_warp(path) -> np.ndarray:
    return read_array(path, WARP_MAGIC)


def save_image_stack(path, images: np.ndarray) -> None:
    """Write an (N,H,W) intensity stack as an ICIMGS01 file."""
    write_array(path, IMAGES_MAGIC, images)


def load_image_stack(path) -> np.ndarray:
    return read_array(path, IMAGES_MAGIC)


def write_pgm(path, img: np.ndarray) -> None:
    """Write intensities in [0,1] as a binary (P5) PGM, maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    w, h, maxval = (int(x) for x in fields)
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval
