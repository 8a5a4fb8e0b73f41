"""Dense reference implementation of the filter for small grids.

Everything here is built from generic pieces so it can check the structured
filter independently: derivatives come from second-order forward-mode
jets instead of hand-derived formulas, the connection terms come from the
generic product-group machinery, and the gain is a full dense matrix.
Cost grows like (12 + n)^3 per pixel, so this is meant for grids of a
handful of pixels.
"""

from __future__ import annotations

import numpy as np

from .filter import N_CAM, N_POSE, FilterConfig, Frame, State, initial_gain, state_group
from .lie import CG3_A, CG3_B, SE3
from .observation import PixelGrid, WeightField, epipole_weight


class Jet:
    """Scalar with exact gradient and Hessian with respect to N variables."""

    __slots__ = ("v", "g", "H")

    def __init__(self, v: float, g: np.ndarray, H: np.ndarray):
        self.v = float(v)
        self.g = g
        self.H = H

    @classmethod
    def variable(cls, value: float, index: int, n: int) -> "Jet":
        g = np.zeros(n)
        g[index] = 1.0
        return cls(value, g, np.zeros((n, n)))

    def _lift(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        return Jet(other, np.zeros_like(self.g), np.zeros_like(self.H))

    def __add__(self, other):
        o = self._lift(other)
        return Jet(self.v + o.v, self.g + o.g, self.H + o.H)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.v, -self.g, -self.H)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.v * other, self.g * other, self.H * other)
        outer = np.outer(self.g, other.g)
        return Jet(self.v * other.v, self.v * other.g + other.v * self.g,
                   self.v * other.H + other.v * self.H + outer + outer.T)

    __rmul__ = __mul__

    def chain(self, f0: float, f1: float, f2: float) -> "Jet":
        """Apply a scalar function with value f0, derivative f1, curvature f2."""
        return Jet(f0, f1 * self.g, f1 * self.H + f2 * np.outer(self.g, self.g))

    def reciprocal(self) -> "Jet":
        return self.chain(1.0 / self.v, -1.0 / self.v**2, 2.0 / self.v**3)

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def power(self, p: float) -> "Jet":
        return self.chain(self.v**p, p * self.v ** (p - 1), p * (p - 1) * self.v ** (p - 2))

    def sigmoid4(self) -> "Jet":
        """1 / (1 + exp(-4 t))."""
        s = 1.0 / (1.0 + np.exp(-4.0 * self.v))
        return self.chain(s, 4.0 * s * (1 - s), 16.0 * s * (1 - s) * (1 - 2 * s))


def _matmul(A, B):
    A = np.asarray(A, dtype=object)
    B = np.asarray(B, dtype=object)
    out = np.empty((A.shape[0],) + B.shape[1:], dtype=object)
    for idx in np.ndindex(out.shape):
        i, rest = idx[0], idx[1:]
        acc = 0.0
        for k in range(A.shape[1]):
            acc = acc + A[i, k] * B[(k,) + rest]
        out[idx] = acc
    return out


def _pose_perturbation(xi):
    """exp of an se(3) jet vector, exact to second order at zero."""
    w, u = xi[:3], xi[3:]
    X = np.zeros((4, 4), dtype=object)
    X[0, 1], X[0, 2], X[1, 2] = -w[2], w[1], -w[0]
    X[1, 0], X[2, 0], X[2, 1] = w[2], -w[1], w[0]
    X[:3, 3] = u
    X2 = _matmul(X, X)
    M = np.empty((4, 4), dtype=object)
    for i in range(4):
        for j in range(4):
            M[i, j] = (1.0 if i == j else 0.0) + X[i, j] + 0.5 * X2[i, j]
    return M


def local_energy_jet(x: State, grid: PixelGrid, flow, W, nu: float, beta: float, quadratic: bool) -> Jet:
    """Energy of ``x * exp(xi)`` as a jet in xi around zero."""
    n = x.n
    N = N_CAM + n
    xi = [Jet.variable(0.0, i, N) for i in range(N)]
    T = _matmul(x.E.matrix(), _pose_perturbation(xi[:N_POSE]))
    total = Jet(0.0, np.zeros(N), np.zeros((N, N)))
    z = grid.points
    for i in range(n):
        if not flow.valid[i]:
            continue
        s = xi[N_CAM + i].sigmoid4()
        d = x.d[i]
        di = (s * d) / (1.0 - d - s + 2.0 * d * s)
        Xh = np.array([z[i, 0] / di, z[i, 1] / di, 1.0 / di, 1.0], dtype=object)
        P = _matmul(T, Xh[:, None])[:, 0]
        if P[2].v <= 1e-12:
            continue
        inv = P[2].reciprocal()
        eps = [flow.vectors[i, 0] - (P[0] * inv - z[i, 0]), flow.vectors[i, 1] - (P[1] * inv - z[i, 1])]
        Wi = W[i]
        rho = 0.5 * (eps[0] * (Wi[0, 0] * eps[0] + Wi[0, 1] * eps[1]) + eps[1] * (Wi[1, 0] * eps[0] + Wi[1, 1] * eps[1]))
        total = total + (rho if quadratic else (rho + nu).power(beta) - nu**beta)
    return total


def dense_gradient_hessian(x: State, grid: PixelGrid, flow, W, nu: float, beta: float, quadratic: bool = False):
    """Left-trivialized gradient and Riemannian Hessian as dense arrays.

    The mixed derivative along ``x exp(s e_i) exp(r e_j)`` differs from the
    jet Hessian by half the bracket term; subtracting the connection then
    gives the covariant Hessian.
    """
    jet = local_energy_jet(x, grid, flow, W, nu, beta, quadratic)
    G = jet.g.copy()
    group = state_group(x.n)
    N = group.dim
    eye = np.eye(N)
    H = jet.H.copy()
    for i in range(N):
        for j in range(N):
            H[i, j] += G @ (0.5 * group.bracket(eye[i], eye[j]) - group.connection(eye[i], eye[j]))
    return G, 0.5 * (H + H.T)


def _field_jacobian(n: int) -> np.ndarray:
    """Left-trivialized Jacobian of f(x) = (v, 0, 0)."""
    A = np.zeros((N_CAM + n, N_CAM + n))
    A[:N_POSE, N_POSE:N_CAM] = np.eye(N_POSE)
    return A


def dense_C(x: State, velocity) -> np.ndarray:
    group = state_group(x.n)
    N = group.dim
    f = np.zeros(N)
    f[:N_POSE] = x.v
    eye = np.eye(N)
    psi = np.column_stack([group.connection(eye[:, i], f) for i in range(N)])
    return _field_jacobian(x.n) + psi - group.connection_matrix(np.asarray(velocity, dtype=float))


class DenseReferenceFilter:
    """Fixed-step dense filter without propagation or sparsification."""

    def __init__(self, grid: PixelGrid, config: FilterConfig, state: State | None = None, gain=None):
        if config.sparsify or config.propagate or config.step_limit is not None or config.gauss_newton:
            raise ValueError("reference needs sparsify, propagate and step control disabled")
        self.grid = grid
        self.config = config
        n = grid.n
        self.group = state_group(n)
        self.x = state.copy() if state is not None else State.initial(n, config.init_disparity)
        self.P = np.array(gain, dtype=float) if gain is not None else initial_gain(n, config).dense()

    def _weights(self, frame: Frame):
        cfg, grid, n = self.config, self.grid, self.grid.n
        scale = np.ones(n)
        if cfg.use_epipole_weight:
            rho = cfg.epipole_rho if cfg.epipole_rho is not None else grid.default_epipole_radius()
            scale = scale * epipole_weight(grid, self.x.E, rho)
        rdd = np.broadcast_to(np.asarray(cfg.process_dd, dtype=float), (n,)).copy()
        if frame.consistent is not None:
            bad = ~np.asarray(frame.consistent, dtype=bool)
            if cfg.outlier_mode == "process":
                rdd[bad] *= cfg.outlier_factor
            else:
                scale[bad] *= cfg.outlier_factor
        Q = frame.Q if frame.Q is not None else WeightField.isotropic(n, (cfg.flow_sigma_px * grid.pixel_size) ** 2)
        W = np.linalg.inv(Q.Q) * scale[:, None, None]
        R = np.zeros((N_CAM + n, N_CAM + n))
        R[:N_CAM, :N_CAM] = self.config.process_cc
        R[N_CAM:, N_CAM:] = np.diag(rdd)
        return W, R

    def _move(self, x: State, xi) -> State:
        E, v, d = self.group.compose((x.E, x.v, x.d), self.group.exp(xi))
        return State(E, v, d)

    def step(self, frame: Frame) -> State:
        cfg = self.config
        W, R = self._weights(frame)
        p = cfg.charbonnier
        h = cfg.frame_interval / cfg.substeps
        x, P = self.x, self.P
        for _ in range(cfg.substeps):
            vel, rates = [], []
            for row in CG3_A:
                y, Pk = x, P
                for a, k, q in zip(row, vel, rates):
                    y = self._move(y, h * a * k)
                    Pk = Pk + h * a * q
                G, H = dense_gradient_hessian(y, self.grid, frame.flow, W, p.nu, p.beta, cfg.quadratic)
                f = np.zeros(self.group.dim)
                f[:N_POSE] = y.v
                xi = f - Pk @ G
                C = dense_C(y, xi)
                vel.append(xi)
                rates.append(R + C @ Pk + Pk @ C.T - Pk @ H @ Pk)
            for b, k, q in zip(CG3_B, vel, rates):
                x = self._move(x, h * b * k)
                P = P + h * b * q
            P = 0.5 * (P + P.T)
        self.x, self.P = x, P
        return x

    @property
    def pose(self) -> SE3:
        return self.x.E

