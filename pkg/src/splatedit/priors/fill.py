"""Harmonic (Laplace) hole filling on pixel grids.

Red-black successive over-relaxation: each half-sweep updates cells whose
four neighbors all belong to the other color class, so results do not depend
on traversal order and runs are byte-identical across platforms.  Image
borders use mirror (zero-flux) boundaries; known pixels act as Dirichlet
data and are never touched.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError

FILL_TOL = 1e-6
FILL_MAX_ITERS = 10_000


def sor_omega(height: int, width: int) -> float:
    """Near-optimal relaxation factor for a Laplace solve on this grid."""
    return 2.0 / (1.0 + np.sin(np.pi / (max(height, width) + 1)))


def harmonic_fill(values: np.ndarray, known: np.ndarray, *,
                  tol: float = FILL_TOL, max_iters: int = FILL_MAX_ITERS,
                  init: float | None = None) -> np.ndarray:
    """Fill ~known pixels of a (H, W) float64 plane harmonically.

    Known pixels are returned bit-exact.  The fill starts from the mean of
    the known data (or `init`) and relaxes until the largest update drops
    below tol.
    """
    values = np.asarray(values, dtype=np.float64)
    known = np.asarray(known, dtype=bool)
    if values.ndim != 2 or known.shape != values.shape:
        raise InvalidArgumentError(
            "harmonic_fill needs matching (H, W) values and known mask")
    if not known.any():
        raise InvalidArgumentError("no known pixels to anchor the fill")
    hole = ~known
    if not hole.any():
        return values.copy()

    h, w = values.shape
    out = values.copy()
    start = float(values[known].mean()) if init is None else float(init)
    out[hole] = start

    yy, xx = np.nonzero(hole)
    red = ((yy + xx) % 2 == 0)
    groups = [(yy[red], xx[red]), (yy[~red], xx[~red])]
    omega = sor_omega(h, w)

    # mirror-padded neighbor lookup realizes zero-flux borders
    def neighbor_avg(grid, ys, xs):
        up = grid[np.maximum(ys - 1, 0), xs]
        down = grid[np.minimum(ys + 1, h - 1), xs]
        left = grid[ys, np.maximum(xs - 1, 0)]
        right = grid[ys, np.minimum(xs + 1, w - 1)]
        return 0.25 * (up + down + left + right)

    for _ in range(max_iters):
        worst = 0.0
        for ys, xs in groups:
            if ys.size == 0:
                continue
            target = neighbor_avg(out, ys, xs)
            old = out[ys, xs]
            new = old + omega * (target - old)
            out[ys, xs] = new
            step = np.abs(new - old).max() if ys.size else 0.0
            worst = max(worst, float(step))
        if worst < tol:
            break
    out[known] = values[known]
    return out


def fit_plane(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Least-squares plane a*x + b*y + c over the known pixels, evaluated on
    the full grid."""
    values = np.asarray(values, dtype=np.float64)
    known = np.asarray(known, dtype=bool)
    if not known.any():
        raise InvalidArgumentError("no known pixels to fit")
    h, w = values.shape
    yy, xx = np.nonzero(known)
    A = np.column_stack([xx, yy, np.ones(xx.size)])
    coef, *_ = np.linalg.lstsq(A, values[yy, xx], rcond=None)
    gy, gx = np.mgrid[0:h, 0:w]
    return coef[0] * gx + coef[1] * gy + coef[2]
