"""Input checks shared by the estimator and the command line."""

import numpy as np


def as_image_stack(x, name: str = "X") -> np.ndarray:
    """Coerce to a float64 (N,H,W) stack of square images with values in [0,1].

    A single (H,W) image becomes a stack of one.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected images of shape (N,H,W) or (H,W), got {arr.shape}")
    n, h, w = arr.shape
    if n == 0:
        raise ValueError(f"{name}: empty image stack")
    if h != w:
        raise ValueError(f"{name}: images must be square, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: images contain non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name}: intensities must lie in [0,1], got [{lo}, {hi}]")
    return np.ascontiguousarray(arr)


def as_pair_stack(x, name: str = "X") -> np.ndarray:
    """Coerce to (M,2,H,W): rows of (moving, fixed) square image pairs."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ValueError(
            f"{name}: expected pairs of shape (M,2,H,W) or (2,H,W), got {arr.shape}"
        )
    flat = as_image_stack(arr.reshape(-1, *arr.shape[2:]), name)
    return flat.reshape(arr.shape)


def check_positive(value, name: str):
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
