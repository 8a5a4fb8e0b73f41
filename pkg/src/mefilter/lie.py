"""Matrix Lie group primitives used by the filter.

Algebra coordinates follow one fixed convention everywhere:

* so(3): rotation vector ``omega``.
* se(3): ``(omega, u)`` -- rotation first, then translation.
* R^n and the disparity group: plain vectors.

The Riemannian metric on every factor is the coordinate inner product, so
``vec``/``mat`` are isometries and every dual map is a matrix transpose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SMALL_ANGLE = 1e-8
LOG_ANGLE_LIMIT = np.pi - 1e-6

# Crouch-Grossman 3-stage, order 3 (Crouch & Grossman 1993).
CG3_A = ((), (3.0 / 4.0,), (119.0 / 216.0, 17.0 / 108.0))
CG3_B = (13.0 / 51.0, -2.0 / 3.0, 24.0 / 17.0)
CG3_C = (0.0, 3.0 / 4.0, 17.0 / 24.0)


class LieDomainError(ValueError):
    """Raised when a logarithm is requested outside the injectivity radius."""


class StructureError(ValueError):
    """Raised on mismatched group structures or dimensions."""


# ---------------------------------------------------------------------------
# so(3) / SO(3)
# ---------------------------------------------------------------------------


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rodrigues_coeffs(theta: float):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
        return a, b, c
    s, co = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - co) / theta**2, (theta - s) / theta**3


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _rodrigues_coeffs(theta)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta >= LOG_ANGLE_LIMIT:
        raise LieDomainError(f"rotation angle {theta:.6f} too close to pi")
    a, _, _ = _rodrigues_coeffs(theta)
    return vee(R - R.T) / (2.0 * a)


def so3_left_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    _, b, c = _rodrigues_coeffs(theta)
    W = hat(w)
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2**3 / 1209600.0
    else:
        half = 0.5 * theta
        k = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * W + k * (W @ W)


def rot_x(a: float) -> np.ndarray:
    return so3_exp([a, 0.0, 0.0])


def rot_y(a: float) -> np.ndarray:
    return so3_exp([0.0, a, 0.0])


def rot_z(a: float) -> np.ndarray:
    return so3_exp([0.0, 0.0, a])


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SE3:
    """Rigid motion ``p -> rot @ p + trans``."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(3, 3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "SE3":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot
        m[:3, 3] = self.trans
        return m

    def __matmul__(self, other: "SE3") -> "SE3":
        return SE3(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    def inverse(self) -> "SE3":
        return SE3(self.rot.T, -self.rot.T @ self.trans)

    def act(self, points) -> np.ndarray:
        """Apply to an (..., 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rot.T + self.trans


def se3_hat(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((4, 4))
    m[:3, :3] = hat(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def se3_vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.concatenate([vee(m[:3, :3]), m[:3, 3]])


def se3_exp(xi) -> SE3:
    xi = np.asarray(xi, dtype=float)
    w, u = xi[:3], xi[3:]
    return SE3(so3_exp(w), so3_left_jacobian(w) @ u)


def se3_log(g: SE3) -> np.ndarray:
    w = so3_log(g.rot)
    return np.concatenate([w, so3_left_jacobian_inv(w) @ g.trans])


def se3_ad(xi) -> np.ndarray:
    """Matrix of ``eta -> [xi, eta]`` in (omega, u) coordinates."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((6, 6))
    W = hat(xi[:3])
    m[:3, :3] = W
    m[3:, :3] = hat(xi[3:])
    m[3:, 3:] = W
    return m


def se3_Ad(g: SE3) -> np.ndarray:
    m = np.zeros((6, 6))
    m[:3, :3] = g.rot
    m[3:, :3] = hat(g.trans) @ g.rot
    m[3:, 3:] = g.rot
    return m


# ---------------------------------------------------------------------------
# Group descriptors
# ---------------------------------------------------------------------------


class MatrixGroup:
    """Interface shared by every factor group.

    Subclasses provide ``dim``, ``identity``, ``compose``, ``inverse``,
    ``exp``, ``log`` and ``ad``.  The connection is derived from ``ad`` for
    the left-invariant metric given by the coordinate inner product.
    """

    dim: int
    abelian: bool = False

    def ad(self, xi) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def bracket(self, xi, eta) -> np.ndarray:
        if self.abelian:
            return np.zeros(self.dim)
        return self.ad(xi) @ np.asarray(eta, dtype=float)

    def connection(self, xi, eta) -> np.ndarray:
        """Levi-Civita connection function: 1/2([xi,eta] - ad*_xi eta - ad*_eta xi)."""
        if self.abelian:
            return np.zeros(self.dim)
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        a_xi = self.ad(xi)
        a_eta = self.ad(eta)
        return 0.5 * (a_xi @ eta - a_xi.T @ eta - a_eta.T @ xi)

    def connection_matrix(self, xi) -> np.ndarray:
        """Matrix of ``eta -> omega_xi eta``."""
        eye = np.eye(self.dim)
        return np.column_stack([self.connection(xi, eye[:, i]) for i in range(self.dim)])

    def connection_swapped_dual(self, xi) -> np.ndarray:
        """Matrix M with <omega_eta xi, zeta> = eta^T M zeta."""
        eye = np.eye(self.dim)
        swapped = np.column_stack([self.connection(eye[:, i], xi) for i in range(self.dim)])
        return swapped.T

    def check_vector(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.dim,):
            raise StructureError(f"expected algebra vector of length {self.dim}, got {xi.shape}")
        return xi


class SO3Group(MatrixGroup):
    dim = 3

    def identity(self):
        return np.eye(3)

    def compose(self, a, b):
        return np.asarray(a) @ np.asarray(b)

    def inverse(self, a):
        return np.asarray(a).T

    def exp(self, xi):
        return so3_exp(self.check_vector(xi))

    def log(self, x):
        return so3_log(x)

    def ad(self, xi):
        return hat(xi)


class SE3Group(MatrixGroup):
    dim = 6

    def identity(self):
        return SE3.identity()

    def compose(self, a: SE3, b: SE3) -> SE3:
        return a @ b

    def inverse(self, a: SE3) -> SE3:
        return a.inverse()

    def exp(self, xi) -> SE3:
        return se3_exp(self.check_vector(xi))

    def log(self, x: SE3):
        return se3_log(x)

    def ad(self, xi):
        return se3_ad(xi)


class EuclideanGroup(MatrixGroup):
    abelian = True

    def __init__(self, dim: int):
        self.dim = int(dim)

    def identity(self):
        return np.zeros(self.dim)

    def compose(self, a, b):
        return np.asarray(a, dtype=float) + np.asarray(b, dtype=float)

    def inverse(self, a):
        return -np.asarray(a, dtype=float)

    def exp(self, xi):
        return self.check_vector(xi).copy()

    def log(self, x):
        return np.asarray(x, dtype=float).copy()

    def ad(self, xi):
        return np.zeros((self.dim, self.dim))


class ProductGroup(MatrixGroup):
    """Direct product; elements are tuples, algebra vectors are concatenated."""

    def __init__(self, factors: Sequence[MatrixGroup]):
        self.factors = tuple(factors)
        self.dims = tuple(f.dim for f in self.factors)
        self.offsets = tuple(int(o) for o in np.cumsum((0,) + self.dims))
        self.dim = self.offsets[-1]
        self.abelian = all(f.abelian for f in self.factors)

    def split(self, xi):
        xi = self.check_vector(xi)
        return [xi[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def _check_element(self, x):
        if len(x) != len(self.factors):
            raise StructureError(f"expected {len(self.factors)} factors, got {len(x)}")
        return x

    def identity(self):
        return tuple(f.identity() for f in self.factors)

    def compose(self, a, b):
        self._check_element(a)
        self._check_element(b)
        return tuple(f.compose(x, y) for f, x, y in zip(self.factors, a, b))

    def inverse(self, a):
        return tuple(f.inverse(x) for f, x in zip(self.factors, self._check_element(a)))

    def exp(self, xi):
        return tuple(f.exp(part) for f, part in zip(self.factors, self.split(xi)))

    def log(self, x):
        return np.concatenate([f.log(y) for f, y in zip(self.factors, self._check_element(x))])

    def ad(self, xi):
        m = np.zeros((self.dim, self.dim))
        for f, part, a, b in zip(self.factors, self.split(xi), self.offsets[:-1], self.offsets[1:]):
            if not f.abelian:
                m[a:b, a:b] = f.ad(part)
        return m

    def connection(self, xi, eta):
        out = np.zeros(self.dim)
        for f, p, q, a, b in zip(
            self.factors, self.split(xi), self.split(eta), self.offsets[:-1], self.offsets[1:]
        ):
            if not f.abelian:
                out[a:b] = f.connection(p, q)
        return out

    def connection_matrix(self, xi):
        m = np.zeros((self.dim, self.dim))
        for f, p, a, b in zip(self.factors, self.split(xi), self.offsets[:-1], self.offsets[1:]):
            if not f.abelian:
                m[a:b, a:b] = f.connection_matrix(p)
        return m

    def connection_swapped_dual(self, xi):
        m = np.zeros((self.dim, self.dim))
        for f, p, a, b in zip(self.factors, self.split(xi), self.offsets[:-1], self.offsets[1:]):
            if not f.abelian:
                m[a:b, a:b] = f.connection_swapped_dual(p)
        return m


# ---------------------------------------------------------------------------
# Crouch-Grossman integrator
# ---------------------------------------------------------------------------


def cg_step(field: Callable, x, h: float, group: MatrixGroup):
    """One CG3 step of ``x' = x * field(x)``.

    ``field`` maps a group element to algebra coordinates.  Stages and the
    update are products of exponentials, so the iterate stays on the group.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    slopes = []
    for row in CG3_A:
        y = x
        for a, k in zip(row, slopes):
            y = group.compose(y, group.exp(h * a * k))
        slopes.append(np.asarray(field(y), dtype=float))
    y = x
    for b, k in zip(CG3_B, slopes):
        y = group.compose(y, group.exp(h * b * k))
    return y
