"""Discrete propagation of a disparity map to the next camera.

The regular grid is pushed forward with the estimated motion, each warped
sample carries the disparity of its scene point in the new camera, and the
scattered samples are resampled at the regular nodes with a C1 cubic
(Clough-Tocher) interpolant on their Delaunay triangulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.spatial import Delaunay

from .disparity import clamp
from .lie import SE3
from .observation import MIN_DEPTH, PixelGrid, homogeneous

MIN_SAMPLES = 16
BOX_MARGIN_PX = 2.0
MAX_EDGE_PX = 3.0


class DegenerateInterpolationError(ValueError):
    pass


@dataclass
class WarpedGrid:
    positions: np.ndarray  # (n, 2) normalized coordinates in the next image
    source_disparity: np.ndarray  # (n,) disparity in the current camera
    disparity: np.ndarray  # (n,) disparity of the same point in the next camera
    valid: np.ndarray


def warp_grid(E_hat: SE3, d, grid: PixelGrid) -> WarpedGrid:
    d = np.asarray(d, dtype=float)
    z = grid.points
    P = E_hat.act(homogeneous(z) / d[:, None])
    valid = P[:, 2] > MIN_DEPTH
    depth = np.where(valid, P[:, 2], 1.0)
    pos = P[:, :2] / depth[:, None]
    px = grid.to_pixels(pos)
    inside = (
        (px[:, 0] >= -BOX_MARGIN_PX)
        & (px[:, 0] <= grid.width - 1 + BOX_MARGIN_PX)
        & (px[:, 1] >= -BOX_MARGIN_PX)
        & (px[:, 1] <= grid.height - 1 + BOX_MARGIN_PX)
    )
    valid &= inside & np.all(np.isfinite(pos), axis=1)
    new_d = np.where(valid, 1.0 / depth, np.nan)
    valid &= (new_d > 0) & (new_d < 1)
    return WarpedGrid(pos, d.copy(), new_d, valid)


def scattered_interpolate(positions, values, valid, grid: PixelGrid, max_edge_px: float = MAX_EDGE_PX):
    """Resample scattered ``values`` at the grid nodes.

    Returns ``(out, mask)``; ``out`` has shape (n,) or (n, k) like ``values``
    and ``mask`` marks nodes inside the hull whose containing triangle has
    no edge longer than ``max_edge_px`` pixels.
    """
    valid = np.asarray(valid, dtype=bool)
    if np.count_nonzero(valid) < MIN_SAMPLES:
        raise DegenerateInterpolationError(f"need at least {MIN_SAMPLES} valid samples")
    pts = grid.to_pixels(np.asarray(positions, dtype=float)[valid])
    vals = np.asarray(values, dtype=float)[valid]
    # Lexicographic order fixes qhull's tie-breaking on degenerate inputs.
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts, vals = pts[order], vals[order]
    try:
        tri = Delaunay(pts)
    except Exception as exc:  # qhull raises its own error type
        raise DegenerateInterpolationError(str(exc)) from exc

    nodes = grid.pixel_coords()
    simplex = tri.find_simplex(nodes)
    corners = tri.points[tri.simplices]
    edges = np.stack(
        [
            np.linalg.norm(corners[:, 0] - corners[:, 1], axis=1),
            np.linalg.norm(corners[:, 1] - corners[:, 2], axis=1),
            np.linalg.norm(corners[:, 2] - corners[:, 0], axis=1),
        ],
        axis=1,
    ).max(axis=1)
    mask = simplex >= 0
    mask[mask] = edges[simplex[mask]] <= max_edge_px

    interp = CloughTocher2DInterpolator(tri, vals)
    out = np.full((grid.n,) + vals.shape[1:], np.nan)
    if np.any(mask):
        out[mask] = interp(nodes[mask])
    mask &= np.all(np.isfinite(out.reshape(grid.n, -1)), axis=1)
    return out, mask


def propagate(E_hat: SE3, d, grid: PixelGrid, extra=None):
    """Disparity map of the next camera given motion ``E_hat``.

    ``extra`` optionally holds per-pixel channels (n, k) resampled with the
    same interpolant.  Returns ``(d_new, mask, extra_new)``; pixels outside
    the mask keep their previous values.
    """
    d = np.asarray(d, dtype=float)
    warped = warp_grid(E_hat, d, grid)
    values = warped.disparity[:, None]
    if extra is not None:
        values = np.column_stack([values, np.asarray(extra, dtype=float).reshape(grid.n, -1)])
    out, mask = scattered_interpolate(warped.positions, values, warped.valid, grid)
    new = out[:, 0]
    mask &= (new > 0) & (new < 1)
    d_new = np.where(mask, clamp(np.where(mask, new, 0.5)), d)
    extra_new = None
    if extra is not None:
        extra = np.asarray(extra, dtype=float).reshape(grid.n, -1)
        extra_new = np.where(mask[:, None], out[:, 1:], extra)
    return d_new, mask, extra_new
