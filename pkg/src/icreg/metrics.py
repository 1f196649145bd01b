"""Evaluation-only registration metrics and the metrics CSV schema.

Everything here works on plain arrays; nothing is recorded on a tape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lie import Transform, identity_grid
from .tape import DiffTensor

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "run_id",
    "step",
    "similarity",
    "regularizer",
    "loss",
    "pct_neg_jacobian",
    "inv_consistency_err",
    "dice",
    "mtre",
)

#: pixels stripped from every side before spatial statistics are computed,
#: keeping boundary clamping out of the numbers
METRIC_BORDER = 2


@dataclass
class MetricsReport:
    """One metrics CSV row.  ``dice`` and ``mtre`` stay empty when unknown."""

    run_id: str
    step: int
    similarity: float
    regularizer: float
    loss: float
    pct_neg_jacobian: float
    inv_consistency_err: float
    dice: float | None = None
    mtre: float | None = None

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_FIELDS)

    def csv_row(self) -> str:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, str):
                return x
            if isinstance(x, (int, np.integer)):
                return str(int(x))
            return format(float(x), ".10g")

        return ",".join(fmt(getattr(self, f)) for f in CSV_FIELDS)


def _as_field(obj, h: int, w: int) -> np.ndarray:
    if isinstance(obj, Transform):
        obj = obj.position_field(h, w)
    if isinstance(obj, DiffTensor):
        obj = obj.value
    field = np.asarray(obj, dtype=np.float64)
    if field.ndim < 3 or field.shape[-1] != 2:
        raise ValueError(f"expected a position field (...,H,W,2), got {field.shape}")
    return field


def jacobian_stats(obj, h: int = 32, w: int = 32) -> tuple[float, np.ndarray]:
    """Percentage of negative-determinant sites plus the interior det field.

    ``obj`` is a transform or a precomputed position field.  Central
    differences with respect to normalized input coordinates give the
    Jacobian; a border of ``METRIC_BORDER`` pixels is excluded.
    """
    f = _as_field(obj, h, w)
    hh, ww = f.shape[-3], f.shape[-2]
    if hh < 2 * METRIC_BORDER + 1 or ww < 2 * METRIC_BORDER + 1:
        raise ValueError(f"jacobian_stats: field {hh}x{ww} too small for border {METRIC_BORDER}")
    # d/du along columns (spacing 1/W), d/dv along rows (spacing 1/H)
    du = (f[..., 1:-1, 2:, :] - f[..., 1:-1, :-2, :]) * (ww / 2.0)
    dv = (f[..., 2:, 1:-1, :] - f[..., :-2, 1:-1, :]) * (hh / 2.0)
    det = du[..., 0] * dv[..., 1] - dv[..., 0] * du[..., 1]
    m = METRIC_BORDER - 1  # central differences already dropped one ring
    det = det[..., m : det.shape[-2] - m, m : det.shape[-1] - m]
    pct = 100.0 * float(np.mean(det < 0.0))
    return pct, det


def inv_consistency_error(t_ab: Transform, t_ba: Transform, h: int = 32, w: int = 32) -> float:
    """Mean pixel displacement of the round trip ``t_ab`` after ``t_ba``.

    Interior grid points are pushed through both maps; the mean Euclidean
    deviation from where they started is scaled by ``w`` to land in pixels.
    """
    t_ab = t_ab.detach()
    t_ba = t_ba.detach()
    grid = identity_grid(h, w)[METRIC_BORDER : h - METRIC_BORDER, METRIC_BORDER : w - METRIC_BORDER]
    batch = t_ab.batch if t_ab.batch else t_ba.batch
    pts = grid if not batch else np.broadcast_to(grid, batch + grid.shape).copy()
    roundtrip = t_ab.apply(t_ba.apply(DiffTensor(pts)))
    dev = roundtrip.value - pts
    return float(np.mean(np.sqrt(np.sum(dev * dev, axis=-1)))) * w


def dice(mask_a, mask_b) -> float:
    """Dice overlap of two boolean masks; two empty masks count as 1."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        log.warning("dice: both masks empty, reporting 1.0")
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def landmark_mtre(points_a, points_b) -> float:
    """Mean Euclidean distance between matched landmark sets, in the units given."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] < 1 or a.ndim < 2:
        raise ValueError(f"landmark_mtre: incompatible point sets {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))
