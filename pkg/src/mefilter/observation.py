"""Measurement model: motion/disparity induced optical flow and its energy.

Pixels are handled in normalized camera coordinates; the intrinsics only
enter when converting to and from pixel units.  A scene point seen at
normalized position ``z`` with disparity ``d`` sits at ``(z, 1) / d`` and is
observed in the next frame at ``pi(R (z, 1) / d + w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lie import SE3

MIN_DEPTH = 1e-12
EPIPOLE_MIN_Z = 1e-9
# 50 px exclusion/attenuation radius measured on KITTI-width (1242 px) images.
KITTI_WIDTH = 1242
KITTI_EPIPOLE_PX = 50.0


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int
    K: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=float).reshape(3, 3))

    @classmethod
    def synthetic(cls, width: int, height: int, focal: float | None = None) -> "PixelGrid":
        """Pinhole grid with the principal point at the image centre."""
        f = float(width if focal is None else focal)
        K = np.array([[f, 0.0, 0.5 * (width - 1)], [0.0, f, 0.5 * (height - 1)], [0.0, 0.0, 1.0]])
        return cls(int(width), int(height), K)

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pixel_size(self) -> float:
        """Normalized-coordinate length of one pixel (along x)."""
        return 1.0 / self.K[0, 0]

    def pixel_coords(self) -> np.ndarray:
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        return np.column_stack([cols.ravel(), rows.ravel()]).astype(float)

    @property
    def points(self) -> np.ndarray:
        return self.to_normalized(self.pixel_coords())

    def to_normalized(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        K = self.K
        y = (px[..., 1] - K[1, 2]) / K[1, 1]
        x = (px[..., 0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
        return np.stack([x, y], axis=-1)

    def to_pixels(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        K = self.K
        u = K[0, 0] * z[..., 0] + K[0, 1] * z[..., 1] + K[0, 2]
        v = K[1, 1] * z[..., 1] + K[1, 2]
        return np.stack([u, v], axis=-1)

    def vector_to_pixels(self, vec) -> np.ndarray:
        """Scale a displacement (e.g. flow) from normalized units to pixels."""
        vec = np.asarray(vec, dtype=float)
        K = self.K
        return np.stack([K[0, 0] * vec[..., 0] + K[0, 1] * vec[..., 1], K[1, 1] * vec[..., 1]], axis=-1)

    def vector_to_normalized(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        K = self.K
        y = vec[..., 1] / K[1, 1]
        return np.stack([(vec[..., 0] - K[0, 1] * y) / K[0, 0], y], axis=-1)

    def default_epipole_radius(self) -> float:
        """The 50 px KITTI radius scaled to this grid width, in normalized units."""
        return KITTI_EPIPOLE_PX * self.width / KITTI_WIDTH * self.pixel_size


@dataclass
class FlowField:
    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape[0] != self.vectors.shape[0]:
            raise ValueError("flow vectors and mask disagree in length")

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, 2)), np.ones(n, dtype=bool))

    def copy(self) -> "FlowField":
        return FlowField(self.vectors.copy(), self.valid.copy())


@dataclass
class WeightField:
    """Per-pixel SPD 2x2 matrices Q; the energy weights residuals by Q^-1."""

    Q: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float).reshape(-1, 2, 2)
        eig = np.linalg.eigvalsh(self.Q)
        if np.any(eig < 1e-12):
            raise ValueError("weight matrices must be SPD with eigenvalues >= 1e-12")

    @classmethod
    def isotropic(cls, n: int, variance: float = 1.0) -> "WeightField":
        return cls(np.broadcast_to(variance * np.eye(2), (n, 2, 2)).copy())

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.Q)


@dataclass(frozen=True)
class CharbonnierParams:
    nu: float = 1e-3
    beta: float = 0.5

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")


def charbonnier(x, p: CharbonnierParams):
    x = np.asarray(x, dtype=float)
    return (x + p.nu) ** p.beta - p.nu**p.beta


def charbonnier_deriv(x, p: CharbonnierParams):
    return p.beta * (np.asarray(x, dtype=float) + p.nu) ** (p.beta - 1.0)


def charbonnier_second(x, p: CharbonnierParams):
    return p.beta * (p.beta - 1.0) * (np.asarray(x, dtype=float) + p.nu) ** (p.beta - 2.0)


def project(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(np.abs(p[..., 2]) <= MIN_DEPTH):
        raise ProjectionError("point at or behind the camera plane")
    return p[..., :2] / p[..., 2:3]


def homogeneous(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)


def transfer_points(E: SE3, d, z) -> np.ndarray:
    """3-D points of pixels ``z`` with disparity ``d`` expressed in the next camera."""
    X = homogeneous(z) / np.asarray(d, dtype=float)[:, None]
    return E.act(X)


def induced_flow(E: SE3, d, grid: PixelGrid) -> FlowField:
    z = grid.points
    P = transfer_points(E, d, z)
    valid = P[:, 2] > MIN_DEPTH
    safe = np.where(valid, P[:, 2], 1.0)
    u = P[:, :2] / safe[:, None] - z
    u[~valid] = 0.0
    return FlowField(u, valid)


def residuals(E: SE3, d, y: FlowField, grid: PixelGrid):
    """Flow-space residual y - h(x) and the mask of pixels that contribute."""
    h = induced_flow(E, d, grid)
    valid = h.valid & y.valid
    eps = np.where(valid[:, None], y.vectors - h.vectors, 0.0)
    return eps, valid


def pixel_weights(Q: WeightField | None, n: int, scale=None) -> np.ndarray:
    """Effective per-pixel weights W = scale * Q^-1 as an (n, 2, 2) array."""
    W = np.broadcast_to(np.eye(2), (n, 2, 2)).copy() if Q is None else Q.inverse()
    if scale is not None:
        W = W * np.asarray(scale, dtype=float).reshape(-1, 1, 1)
    return W


def measurement_energy(
    E: SE3,
    d,
    y: FlowField,
    Q: WeightField | None,
    p: CharbonnierParams,
    grid: PixelGrid,
    scale=None,
    quadratic: bool = False,
) -> float:
    """Sum over valid pixels of phi(1/2 |eps|^2_W), W = Q^-1 (times ``scale``)."""
    eps, valid = residuals(E, d, y, grid)
    W = pixel_weights(Q, grid.n, scale)
    rho = 0.5 * np.einsum("ni,nij,nj->n", eps, W, eps)
    terms = rho if quadratic else charbonnier(rho, p)
    # fsum is exactly rounded, hence independent of pixel order.
    return math.fsum(terms[valid])


def epipole(E: SE3):
    """Epipole of the translation in the second view, or None when undefined."""
    w = E.trans
    if abs(w[2]) <= EPIPOLE_MIN_Z:
        return None
    return w[:2] / w[2]


def epipole_weight(grid: PixelGrid, E: SE3, rho: float) -> np.ndarray:
    """min(1, |z - e|^2 / rho^2); all ones when no finite epipole exists."""
    e = epipole(E)
    if e is None or np.linalg.norm(E.trans) == 0.0:
        return np.ones(grid.n)
    dist2 = np.sum((grid.points - e) ** 2, axis=1)
    return np.minimum(1.0, dist2 / rho**2)
