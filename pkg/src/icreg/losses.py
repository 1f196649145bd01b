"""Differentiable training losses: local correlation and bending energy."""

from __future__ import annotations

import numpy as np

from . import tape as tp
from .tape import DiffTensor

LNCC_EPS = 1e-5


def lncc(i, j, sigma: float = 5.0) -> DiffTensor:
    """Local normalized cross-correlation under Gaussian windows of std ``sigma``.

    Windowed first and second moments come from Gaussian blurring; the
    correlation is averaged over all pixels (and any batch axis).  The
    variance floor keeps constant patches at correlation ~0 instead of NaN.
    """
    i = i if isinstance(i, DiffTensor) else DiffTensor(i)
    j = j if isinstance(j, DiffTensor) else DiffTensor(j)
    if i.shape != j.shape:
        raise ValueError(f"lncc: shape mismatch {i.shape} vs {j.shape}")
    if sigma <= 0:
        raise ValueError(f"lncc: sigma must be positive, got {sigma}")
    mi = tp.gaussian_blur(i, sigma)
    mj = tp.gaussian_blur(j, sigma)
    vii = tp.gaussian_blur(i * i, sigma) - mi * mi
    vjj = tp.gaussian_blur(j * j, sigma) - mj * mj
    vij = tp.gaussian_blur(i * j, sigma) - mi * mj
    cc = vij / tp.tsqrt((vii + LNCC_EPS) * (vjj + LNCC_EPS))
    return tp.tmean(cc)


def bending_energy(v) -> DiffTensor:
    """Mean squared second spatial differences of a velocity field (...,H,W,D).

    Derivatives are taken with respect to normalized coordinates; the two
    mixed terms both count, and the mean runs over interior pixels and any
    batch axis while channels are summed.
    """
    v = v if isinstance(v, DiffTensor) else DiffTensor(v)
    if v.ndim < 3:
        raise ValueError(f"bending_energy: expected (...,H,W,D), got {v.shape}")
    h, w = v.shape[-3], v.shape[-2]
    if h < 3 or w < 3:
        raise ValueError(f"bending_energy: grid too small ({h}x{w}), need at least 3x3")

    def part(dr, dc):
        bounds = [(0, n) for n in v.shape]
        bounds[-3] = (1 + dr, h - 1 + dr)
        bounds[-2] = (1 + dc, w - 1 + dc)
        return tp.crop(v, bounds)

    center = part(0, 0)
    dxx = tp.scalar_mul(part(0, 1) - tp.scalar_mul(center, 2.0) + part(0, -1), float(w * w))
    dyy = tp.scalar_mul(part(1, 0) - tp.scalar_mul(center, 2.0) + part(-1, 0), float(h * h))
    dxy = tp.scalar_mul(
        part(1, 1) - part(1, -1) - part(-1, 1) + part(-1, -1), float(w * h) / 4.0
    )
    total = tp.tsum(tp.square(dxx) + tp.square(dyy) + tp.scalar_mul(tp.square(dxy), 2.0))
    n_sites = int(np.prod(v.shape[:-3], dtype=np.int64)) * (h - 2) * (w - 2)
    return tp.scalar_mul(total, 1.0 / n_sites)
