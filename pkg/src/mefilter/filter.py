"""Second-order minimum energy filter on SE(3) x R^6 x (0,1)^n.

State coordinates are ordered ``(pose 6 | velocity 6 | disparity n)``; the
first twelve are the "camera" block.  The filter integrates

    x' = x (f(x) - P G(x))
    P' = R + C P + P C^T - P H P

over each frame interval, where ``G`` and ``H`` are the left-trivialized
Riemannian gradient and Hessian of the robust flow energy, and

    C = A + Psi_f - Omega_xi

with ``A`` the left-trivialized Jacobian of ``f``, ``Psi_f`` the matrix of
``eta -> omega_eta f`` and ``Omega_xi`` the matrix of ``eta -> omega_xi eta``
for the current velocity ``xi = x^-1 x'``.  Only the camera rows of ``C`` are
non-zero, so ``P`` is stored as dense camera blocks plus a diagonal
disparity block and every operation is linear in the number of pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .disparity import DisparityGroup, clamp, d_compose, d_exp
from .lie import CG3_A, CG3_B, SE3, EuclideanGroup, ProductGroup, SE3Group, hat, se3_ad, se3_exp
from .observation import (
    CharbonnierParams,
    FlowField,
    PixelGrid,
    WeightField,
    charbonnier,
    charbonnier_deriv,
    charbonnier_second,
    epipole_weight,
    homogeneous,
    pixel_weights,
)
from .propagation import DegenerateInterpolationError, propagate

log = logging.getLogger(__name__)

N_CAM = 12
N_POSE = 6
MAX_STEP_RETRIES = 12
COUPLING_LIMIT = 0.99
GAIN_FLOOR = 1e-12


class FilterError(RuntimeError):
    """A frame update failed; ``diagnostics`` holds what was known."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# State and gain containers
# ---------------------------------------------------------------------------


@dataclass
class State:
    E: SE3
    v: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(6)
        self.d = clamp(self.d).reshape(-1)

    @classmethod
    def initial(cls, n: int, disparity: float = 0.5) -> "State":
        return cls(SE3.identity(), np.zeros(6), np.full(n, disparity))

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def copy(self) -> "State":
        return State(self.E, self.v.copy(), self.d.copy())

    def retract(self, xi) -> "State":
        """x * exp(xi) on the product group."""
        xi = np.asarray(xi, dtype=float)
        return State(self.E @ se3_exp(xi[:6]), self.v + xi[6:12], d_compose(self.d, d_exp(xi[12:])))

    def element(self):
        return (self.E, self.v, self.d)

    @classmethod
    def from_element(cls, x) -> "State":
        return cls(*x)


def state_group(n: int) -> ProductGroup:
    return ProductGroup([SE3Group(), EuclideanGroup(6), DisparityGroup(n)])


def _dd_left(dd, M):
    """dd @ M for a diagonal (1-D) or dense disparity block."""
    return dd[:, None] * M if dd.ndim == 1 else dd @ M


def _dd_right(M, dd):
    return M * dd[None, :] if dd.ndim == 1 else M @ dd


@dataclass
class GainMatrix:
    """Symmetric block matrix [[cc, cd], [cd^T, dd]].

    ``dd`` is a vector for the diagonal (sparsified) form or an (n, n)
    array when sparsification is disabled.  The same container holds the
    structured Hessian returned by :func:`riccati_H`.
    """

    cc: np.ndarray
    cd: np.ndarray
    dd: np.ndarray

    @property
    def n(self) -> int:
        return self.cd.shape[1]

    @property
    def diagonal(self) -> bool:
        return self.dd.ndim == 1

    @classmethod
    def block_diagonal(cls, cc, dd, n: int, dense_dd: bool = False) -> "GainMatrix":
        cc = np.asarray(cc, dtype=float)
        if cc.ndim == 1:
            cc = np.diag(cc)
        dd = np.broadcast_to(np.asarray(dd, dtype=float), (n,)).copy()
        return cls(cc.copy(), np.zeros((N_CAM, n)), np.diag(dd) if dense_dd else dd)

    @classmethod
    def from_dense(cls, M, diagonal: bool = True) -> "GainMatrix":
        M = np.asarray(M, dtype=float)
        dd = M[N_CAM:, N_CAM:]
        return cls(M[:N_CAM, :N_CAM].copy(), M[:N_CAM, N_CAM:].copy(), np.diag(dd).copy() if diagonal else dd.copy())

    def dense(self) -> np.ndarray:
        n = self.n
        M = np.zeros((N_CAM + n, N_CAM + n))
        M[:N_CAM, :N_CAM] = self.cc
        M[:N_CAM, N_CAM:] = self.cd
        M[N_CAM:, :N_CAM] = self.cd.T
        M[N_CAM:, N_CAM:] = np.diag(self.dd) if self.diagonal else self.dd
        return M

    def copy(self) -> "GainMatrix":
        return GainMatrix(self.cc.copy(), self.cd.copy(), self.dd.copy())

    def __add__(self, other: "GainMatrix") -> "GainMatrix":
        return GainMatrix(self.cc + other.cc, self.cd + other.cd, self.dd + other.dd)

    def __rmul__(self, s: float) -> "GainMatrix":
        return GainMatrix(s * self.cc, s * self.cd, s * self.dd)

    def trace(self) -> float:
        dd = self.dd if self.diagonal else np.diag(self.dd)
        return float(np.trace(self.cc) + dd.sum())

    def matvec(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        gc, gd = g[:N_CAM], g[N_CAM:]
        top = self.cc @ gc + self.cd @ gd
        bottom = self.cd.T @ gc + (self.dd * gd if self.diagonal else self.dd @ gd)
        return np.concatenate([top, bottom])

    def symmetrized(self) -> "GainMatrix":
        dd = self.dd if self.diagonal else 0.5 * (self.dd + self.dd.T)
        return GainMatrix(0.5 * (self.cc + self.cc.T), self.cd, dd)


# ---------------------------------------------------------------------------
# Configuration and per-frame inputs
# ---------------------------------------------------------------------------


def _default_process_cc():
    return np.concatenate([np.full(6, 2e-7), np.full(6, 2e-10)])


def _default_init_cc():
    return np.concatenate([np.full(6, 2e-4), np.full(6, 2e-9)])


def _default_charbonnier():
    return CharbonnierParams(nu=0.25, beta=0.5)


@dataclass
class FilterConfig:
    """Weights and policies of one filter run.

    ``process_cc``/``process_dd`` form the model-noise weight R and
    ``init_cc``/``init_dd`` the initial gain R0 (camera blocks may be given
    as diagonals).  ``flow_sigma_px`` sets the default observation weight
    Q = sigma^2 I when a frame carries no explicit Q.
    """

    process_cc: np.ndarray = field(default_factory=_default_process_cc)
    process_dd: float = 0.01
    init_cc: np.ndarray = field(default_factory=_default_init_cc)
    init_dd: float = 0.04
    init_disparity: float = 0.5
    charbonnier: CharbonnierParams = field(default_factory=_default_charbonnier)
    quadratic: bool = False
    gauss_newton: bool = False
    flow_sigma_px: float = 1.0
    substeps: int = 4
    step_limit: float | None = 1.0
    max_substeps: int = 400
    frame_interval: float = 1.0
    use_epipole_weight: bool = True
    epipole_rho: float | None = None
    outlier_mode: str = "process"
    outlier_factor: float = 0.01
    propagate: bool = True
    propagate_gain: bool = True
    disocclusion_gain_factor: float = 10.0
    max_disparity_gain: float | None = 0.4
    sparsify: bool = True

    def __post_init__(self):
        self.process_cc = _as_cc(self.process_cc, "process_cc")
        self.init_cc = _as_cc(self.init_cc, "init_cc")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.step_limit is not None and not self.step_limit > 0:
            raise ValueError("step_limit must be positive or None")
        if self.max_substeps < self.substeps:
            raise ValueError("max_substeps must be >= substeps")
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be positive")
        if np.any(np.asarray(self.process_dd) <= 0) or np.any(np.asarray(self.init_dd) <= 0):
            raise ValueError("disparity weights must be positive")
        if self.max_disparity_gain is not None and not self.max_disparity_gain > 0:
            raise ValueError("max_disparity_gain must be positive or None")
        if self.outlier_mode not in ("process", "weight"):
            raise ValueError("outlier_mode must be 'process' or 'weight'")

    def effective_charbonnier(self) -> CharbonnierParams:
        return self.charbonnier


def _as_cc(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = np.diag(m)
    if m.shape != (N_CAM, N_CAM):
        raise ValueError(f"{name} must be 12x12 or a 12-vector")
    if not np.allclose(m, m.T) or np.any(np.linalg.eigvalsh(0.5 * (m + m.T)) <= 0):
        raise ValueError(f"{name} must be symmetric positive definite")
    return m


@dataclass
class Frame:
    flow: FlowField
    Q: WeightField | None = None
    consistent: np.ndarray | None = None


@dataclass
class Measurement:
    """Everything the energy needs for one frame, held fixed while integrating."""

    grid: PixelGrid
    flow: FlowField
    W: np.ndarray
    params: CharbonnierParams = field(default_factory=CharbonnierParams)
    quadratic: bool = False
    gauss_newton: bool = False

    @classmethod
    def build(cls, grid, flow, Q=None, params=None, quadratic=False, scale=None, gauss_newton=False):
        return cls(grid, flow, pixel_weights(Q, grid.n, scale), params or CharbonnierParams(), quadratic, gauss_newton)


# ---------------------------------------------------------------------------
# Per-pixel derivatives
# ---------------------------------------------------------------------------


@dataclass
class PixelHessian:
    """Hessian of the summed pixel terms, reduced to what the filter needs.

    ``pose`` is the 6x6 pose block summed over pixels, ``cross[i]`` the
    pose/disparity column of pixel ``i`` and ``disp[i]`` its disparity
    diagonal entry.
    """

    pose: np.ndarray
    cross: np.ndarray
    disp: np.ndarray


def pixel_terms(x: State, m: Measurement, hessian: bool = True):
    """Energy, gradient and Hessian of every pixel term.

    Local coordinates per pixel are (omega 3, u 3, s 1): the left
    perturbation of the pose and the chart coordinate of the pixel's
    disparity.  Derivatives are taken along ``x * exp(c)``; the Hessian is
    the plain second derivative in these exponential coordinates, without
    the connection correction.  Returns ``(energy, grad, hess, valid)``
    with ``grad`` of shape (n, 7) and ``hess`` a :class:`PixelHessian`.
    """
    z = m.grid.points
    d = x.d
    R = x.E.rot
    n = z.shape[0]
    W = m.W
    Xb = homogeneous(z) / d[:, None]
    RX = Xb @ R.T
    P = RX + x.E.trans
    valid = m.flow.valid & (P[:, 2] > 1e-12)
    inv3 = 1.0 / np.where(valid, P[:, 2], 1.0)
    proj = P[:, :2] * inv3[:, None]
    eps = np.where(valid[:, None], m.flow.vectors - (proj - z), 0.0)
    r = np.stack([W[:, 0, 0] * eps[:, 0] + W[:, 0, 1] * eps[:, 1],
                  W[:, 1, 0] * eps[:, 0] + W[:, 1, 1] * eps[:, 1]], axis=1)
    rho = 0.5 * (eps[:, 0] * r[:, 0] + eps[:, 1] * r[:, 1])

    if m.quadratic:
        energy = rho.copy()
        phi1 = np.ones(n)
        phi2 = np.zeros(n)
    else:
        energy = charbonnier(rho, m.params)
        phi1 = charbonnier_deriv(rho, m.params)
        phi2 = charbonnier_second(rho, m.params)
    energy[~valid] = 0.0
    phi1[~valid] = 0.0
    phi2[~valid] = 0.0

    # dP/dc: columns omega (3), u (3), s (1); d(exp(w) X)/dw = -hat(X).
    one_minus_d = 1.0 - d
    JP = np.empty((n, 3, 7))
    for j in range(3):
        JP[:, :, j] = np.cross(R[:, j], RX)
    JP[:, :, 3:6] = R
    JP[:, :, 6] = -4.0 * one_minus_d[:, None] * RX

    # Jacobian of the induced flow: d pi(P) = (dP_xy - proj dP_z) / P_z.
    Jh = inv3[:, None, None] * (JP[:, :2, :] - proj[:, :, None] * JP[:, 2:3, :])
    grad_rho = -(Jh[:, 0, :] * r[:, 0:1] + Jh[:, 1, :] * r[:, 1:2])
    grad = phi1[:, None] * grad_rho
    if not hessian:
        return energy, grad, None, valid

    WJ0 = W[:, 0, 0, None] * Jh[:, 0, :] + W[:, 0, 1, None] * Jh[:, 1, :]
    WJ1 = W[:, 1, 0, None] * Jh[:, 0, :] + W[:, 1, 1, None] * Jh[:, 1, :]
    J0, J1 = Jh[:, 0, :], Jh[:, 1, :]
    pose = (phi1[:, None] * J0[:, :6]).T @ WJ0[:, :6] + (phi1[:, None] * J1[:, :6]).T @ WJ1[:, :6]
    cross = J0[:, :6] * WJ0[:, 6:7] + J1[:, :6] * WJ1[:, 6:7]
    disp = J0[:, 6] * WJ0[:, 6] + J1[:, 6] * WJ1[:, 6]

    if m.gauss_newton:
        pose += (phi2[:, None] * grad_rho[:, :6]).T @ grad_rho[:, :6]
        cross = phi1[:, None] * cross + phi2[:, None] * grad_rho[:, :6] * grad_rho[:, 6:7]
        disp = phi1 * disp + phi2 * grad_rho[:, 6] ** 2
        return energy, grad, PixelHessian(pose, cross, disp), valid

    # Projection curvature contracted with r, as the symmetric rank-2
    # form a2 B^T + B a2^T in the rows a0, a1, a2 of JP.
    inv3sq = inv3 * inv3
    s0 = -r[:, 0] * inv3sq
    s1 = -r[:, 1] * inv3sq
    s2 = 2.0 * (r[:, 0] * P[:, 0] + r[:, 1] * P[:, 1]) * inv3sq * inv3
    a2 = JP[:, 2, :]
    B = s0[:, None] * JP[:, 0, :] + s1[:, None] * JP[:, 1, :] + 0.5 * s2[:, None] * a2
    SB = (phi1[:, None] * a2[:, :6]).T @ B[:, :6]
    pose -= SB + SB.T
    cross -= a2[:, :6] * B[:, 6:7] + B[:, :6] * a2[:, 6:7]
    disp -= 2.0 * a2[:, 6] * B[:, 6]

    # Curvature of the group action contracted with q = R^T Jpi^T r.
    qc = inv3[:, None] * np.column_stack([r[:, 0], r[:, 1], -(proj[:, 0] * r[:, 0] + proj[:, 1] * r[:, 1])])
    qb = qc @ R
    qx = np.sum(qb * Xb, axis=1)
    wq = phi1[:, None] * qb
    QX = wq.T @ Xb
    T = np.zeros((6, 6))
    T[:3, :3] = 0.5 * (QX + QX.T) - np.sum(phi1 * qx) * np.eye(3)
    T[:3, 3:] = -0.5 * hat(wq.sum(axis=0))
    T[3:, :3] = T[:3, 3:].T
    pose -= T
    cross[:, :3] -= np.cross(-4.0 * one_minus_d[:, None] * Xb, qb)
    disp -= 16.0 * one_minus_d * qx

    # Chain rule through the robust function.
    pose += (phi2[:, None] * grad_rho[:, :6]).T @ grad_rho[:, :6]
    cross = phi1[:, None] * cross + phi2[:, None] * grad_rho[:, :6] * grad_rho[:, 6:7]
    disp = phi1 * disp + phi2 * grad_rho[:, 6] ** 2
    return energy, grad, PixelHessian(pose, cross, disp), valid


def energy(x: State, m: Measurement) -> float:
    e, _, _, _ = pixel_terms(x, m, hessian=False)
    return float(np.sum(e))


# ---------------------------------------------------------------------------
# Filter operators
# ---------------------------------------------------------------------------


def propagation_field(x: State) -> np.ndarray:
    """f(x) = (v, 0, 0): pose driven by the twist, twist and disparity constant."""
    f = np.zeros(N_CAM + x.n)
    f[:N_POSE] = x.v
    return f


def hamiltonian_gradient(x: State, m: Measurement) -> np.ndarray:
    _, g, _, _ = pixel_terms(x, m, hessian=False)
    return _assemble_gradient(g)


def _assemble_gradient(g) -> np.ndarray:
    G = np.zeros(N_CAM + g.shape[0])
    G[:N_POSE] = g[:, :N_POSE].sum(axis=0)
    G[N_CAM:] = g[:, 6]
    return G


def _assemble_hessian(hess: PixelHessian, G_pose) -> GainMatrix:
    n = hess.disp.shape[0]
    cc = np.zeros((N_CAM, N_CAM))
    pose = hess.pose
    if G_pose is not None:
        ad = se3_ad(G_pose)
        pose = pose - 0.5 * (ad + ad.T)
    cc[:N_POSE, :N_POSE] = 0.5 * (pose + pose.T)
    cd = np.zeros((N_CAM, n))
    cd[:N_POSE] = hess.cross.T
    return GainMatrix(cc, cd, hess.disp.copy())


def evaluate(x: State, m: Measurement):
    """Gradient G and structured Riemannian Hessian H at ``x``."""
    _, g, hess, _ = pixel_terms(x, m, hessian=True)
    G = _assemble_gradient(g)
    return G, _assemble_hessian(hess, None if m.gauss_newton else G[:N_POSE])


def riccati_H(x: State, m: Measurement) -> GainMatrix:
    return evaluate(x, m)[1]


def _swap_matrix(v):
    """Matrix of eta -> ad_eta^T v on se(3)."""
    L = np.zeros((6, 6))
    L[:3, :3] = hat(v[:3])
    L[:3, 3:] = hat(v[3:])
    L[3:, :3] = hat(v[3:])
    return L


def riccati_C(x: State, xdot) -> np.ndarray:
    """Camera block of C for velocity ``xdot = x^-1 x'`` (coordinates)."""
    v = x.v
    xi = np.asarray(xdot, dtype=float)[:N_POSE]
    ad_v = se3_ad(v)
    ad_xi = se3_ad(xi)
    psi_f = -0.5 * (ad_v + ad_v.T + _swap_matrix(v))
    omega_xi = 0.5 * (ad_xi - ad_xi.T - _swap_matrix(xi))
    C = np.zeros((N_CAM, N_CAM))
    C[:N_POSE, :N_POSE] = psi_f - omega_xi
    C[:N_POSE, N_POSE:] = np.eye(N_POSE)
    return C


def riccati_C_apply(x: State, xdot, P: GainMatrix):
    """C P as (camera-camera, camera-disparity) blocks; disparity rows are zero."""
    C = riccati_C(x, xdot)
    return C @ P.cc, C @ P.cd


def riccati_rate(P: GainMatrix, Ccc, H: GainMatrix, Rcc, rdd) -> GainMatrix:
    """Right-hand side R + C P + P C^T - P H P in block form."""
    CPcc = Ccc @ P.cc
    CPcd = Ccc @ P.cd
    HPcc = H.cc @ P.cc + H.cd @ P.cd.T
    HPcd = H.cc @ P.cd + _dd_right(H.cd, P.dd)
    HPdc = H.cd.T @ P.cc + H.dd[:, None] * P.cd.T
    PHc = P.cd @ H.cd.T
    PHPcc = P.cc @ HPcc + P.cd @ HPdc
    PHPcd = P.cc @ HPcd + PHc @ P.cd + _dd_right(P.cd * H.dd[None, :], P.dd)
    if P.diagonal:
        PHPdd = (
            np.einsum("in,ij,jn->n", P.cd, H.cc, P.cd)
            + 2.0 * P.dd * np.einsum("in,in->n", P.cd, H.cd)
            + P.dd * P.dd * H.dd
        )
        dd = rdd - PHPdd
    else:
        HPdd = H.cd.T @ P.cd + H.dd[:, None] * P.dd
        PHPdd = P.cd.T @ HPcd + P.dd @ HPdd
        dd = np.diag(np.broadcast_to(rdd, (P.n,))) - PHPdd
    cc = Rcc + CPcc + CPcc.T - PHPcc
    return GainMatrix(cc, CPcd - PHPcd, dd)


def _clamp_gain(P: GainMatrix):
    dd = P.dd if P.diagonal else np.diag(P.dd)
    neg = dd < 0
    if not np.any(neg):
        return P, False
    if P.diagonal:
        P = GainMatrix(P.cc, P.cd, np.where(neg, 0.0, P.dd))
    else:
        dense = P.dd.copy()
        idx = np.flatnonzero(neg)
        dense[idx, idx] = 0.0
        P = GainMatrix(P.cc, P.cd, dense)
    return P, True


def riccati_step(P: GainMatrix, Ccc, H: GainMatrix, Rcc, rdd, h: float):
    """RK3 step of the Riccati flow with C and H frozen.

    Returns the new gain and whether any disparity diagonal was clamped.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    slopes = []
    for row in CG3_A:
        Pk = P
        for a, k in zip(row, slopes):
            Pk = Pk + (h * a) * k
        slopes.append(riccati_rate(Pk, Ccc, H, Rcc, rdd))
    out = P
    for b, k in zip(CG3_B, slopes):
        out = out + (h * b) * k
    return _clamp_gain(out.symmetrized())


def state_velocity(x: State, P: GainMatrix, G) -> np.ndarray:
    return propagation_field(x) - P.matvec(G)


def state_step(x: State, P: GainMatrix, G, h: float) -> State:
    """One CG3 step of x' = x (f(x) - P G(x)) with the gain frozen.

    ``G`` is either a gradient vector (held fixed) or a callable of the state.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    grad = G if callable(G) else (lambda _x, _g=np.asarray(G, dtype=float): _g)
    slopes = []
    for row in CG3_A:
        y = x
        for a, k in zip(row, slopes):
            y = y.retract(h * a * k)
        slopes.append(state_velocity(y, P, grad(y)))
    out = x
    for b, k in zip(CG3_B, slopes):
        out = out.retract(h * b * k)
    return out


def coupled_step(x: State, P: GainMatrix, m: Measurement, Rcc, rdd, h: float, first=None):
    """One joint CG3 (state) / RK3 (gain) step sharing stage evaluations.

    ``first`` optionally supplies ``evaluate(x, m)`` when already known.
    """
    vel, rates = [], []
    for i, row in enumerate(CG3_A):
        y, Pk = x, P
        for a, k, q in zip(row, vel, rates):
            y = y.retract(h * a * k)
            Pk = Pk + (h * a) * q
        G, H = first if (i == 0 and first is not None) else evaluate(y, m)
        xi = state_velocity(y, Pk, G)
        vel.append(xi)
        rates.append(riccati_rate(Pk, riccati_C(y, xi), H, Rcc, rdd))
    x_new, P_new = x, P
    for b, k, q in zip(CG3_B, vel, rates):
        x_new = x_new.retract(h * b * k)
        P_new = P_new + (h * b) * q
    P_new, clamped = _clamp_gain(P_new.symmetrized())
    return x_new, P_new, clamped


def gain_curvature_radius(P: GainMatrix, H: GainMatrix, iterations: int = 30) -> float:
    """Largest |eigenvalue| of P H by power iteration on the structured blocks."""
    v = np.linspace(1.0, 2.0, N_CAM + P.n)
    rho = 0.0
    for _ in range(iterations):
        w = P.matvec(H.matvec(v))
        norm = np.linalg.norm(w)
        if not np.isfinite(norm):
            return float("inf")
        if norm == 0.0:
            return 0.0
        rho = norm / np.linalg.norm(v)
        v = w / norm
    return float(rho)


def cap_disparity_gain(P: GainMatrix, cap: float | None) -> GainMatrix:
    """Bound the disparity diagonal; negative curvature would otherwise make it blow up."""
    if cap is None or not P.diagonal or np.all(P.dd <= cap):
        return P
    return GainMatrix(P.cc, P.cd, np.minimum(P.dd, cap))


def restore_definiteness(P: GainMatrix, limit: float = COUPLING_LIMIT):
    """Make a sparsified gain positive semidefinite again.

    Keeping only the diagonal of the disparity block is not guaranteed to
    preserve definiteness.  The arrowhead matrix is PSD iff
    ``cc - sum_i cd_i cd_i^T / dd_i`` is, so the coupling columns are scaled
    down uniformly until that Schur complement is safely positive.  Columns
    with a zero disparity gain lose their coupling and an indefinite camera
    block is eigen-clipped.  Returns ``(P, repaired)``.
    """
    if not P.diagonal:
        return P, False
    repaired = False
    cc = 0.5 * (P.cc + P.cc.T)
    w, V = np.linalg.eigh(cc)
    floor = GAIN_FLOOR * max(w[-1], GAIN_FLOOR)
    if w[0] < floor:
        cc = (V * np.maximum(w, floor)) @ V.T
        repaired = True
    cd = P.cd
    dead = P.dd <= 0
    if np.any(dead & np.any(cd != 0, axis=0)):
        cd = np.where(dead[None, :], 0.0, cd)
        repaired = True
    live = ~dead
    Linv = np.linalg.inv(np.linalg.cholesky(cc))
    B = Linv @ cd[:, live]
    lam = np.linalg.eigvalsh((B / P.dd[live]) @ B.T)[-1] if np.any(live) else 0.0
    if lam > limit:
        cd = cd * np.sqrt(limit / lam)
        repaired = True
    if not repaired:
        return P, False
    return GainMatrix(cc, cd, P.dd), True


def sparsify(P: GainMatrix) -> GainMatrix:
    """Drop disparity-disparity couplings and re-symmetrize the camera block."""
    dd = P.dd.copy() if P.diagonal else np.diag(P.dd).copy()
    return GainMatrix(0.5 * (P.cc + P.cc.T), P.cd.copy(), dd)


# ---------------------------------------------------------------------------
# Frame update
# ---------------------------------------------------------------------------


def initial_gain(n: int, cfg: FilterConfig) -> GainMatrix:
    return GainMatrix.block_diagonal(cfg.init_cc, cfg.init_dd, n, dense_dd=not cfg.sparsify)


def frame_measurement(x: State, frame: Frame, cfg: FilterConfig, grid: PixelGrid):
    """Measurement for one frame plus the per-pixel model noise ``rdd``."""
    n = grid.n
    scale = np.ones(n)
    if cfg.use_epipole_weight:
        rho = cfg.epipole_rho if cfg.epipole_rho is not None else grid.default_epipole_radius()
        scale *= epipole_weight(grid, x.E, rho)
    rdd = np.broadcast_to(np.asarray(cfg.process_dd, dtype=float), (n,)).copy()
    outliers = np.zeros(n, dtype=bool)
    if frame.consistent is not None:
        outliers = ~np.asarray(frame.consistent, dtype=bool).reshape(n)
        if cfg.outlier_mode == "process":
            rdd[outliers] *= cfg.outlier_factor
        else:
            scale[outliers] *= cfg.outlier_factor
    Q = frame.Q
    if Q is None:
        Q = WeightField.isotropic(n, (cfg.flow_sigma_px * grid.pixel_size) ** 2)
    m = Measurement.build(grid, frame.flow, Q, cfg.charbonnier, cfg.quadratic, scale, cfg.gauss_newton)
    return m, rdd, outliers


def _finite(x: State, P: GainMatrix) -> bool:
    return bool(
        np.all(np.isfinite(x.E.rot)) and np.all(np.isfinite(x.E.trans)) and np.all(np.isfinite(x.v))
        and np.all(np.isfinite(x.d)) and np.all(np.isfinite(P.cc)) and np.all(np.isfinite(P.cd))
        and np.all(np.isfinite(P.dd))
    )


def integrate_frame(x: State, P: GainMatrix, m: Measurement, cfg: FilterConfig, rdd):
    """Integrate one frame interval with at least ``cfg.substeps`` steps.

    With ``cfg.step_limit`` set, each step is shortened so that
    h * |eig(P H)| stays below the limit, which keeps the explicit scheme
    stable while the gain is large.  A step is rejected and retried at a
    quarter of its length when it drives a disparity gain negative, leaves
    non-finite values, or lands where the same h would exceed twice the limit.
    Returns ``(state, gain, clamped, steps, repairs)`` where ``repairs``
    counts steps whose gain needed :func:`restore_definiteness`.
    """
    T = cfg.frame_interval
    h_max = T / cfg.substeps
    t, steps, clamped, repairs = 0.0, 0, False, 0
    control = cfg.step_limit is not None
    first = evaluate(x, m) if control else None
    while T - t > 1e-12 * T:
        if steps >= cfg.max_substeps:
            raise FloatingPointError(f"step control needed more than {cfg.max_substeps} substeps")
        h = min(h_max, T - t)
        if not control:
            x, P, c = coupled_step(x, P, m, cfg.process_cc, rdd, h)
            P, rep = restore_definiteness(cap_disparity_gain(P, cfg.max_disparity_gain))
            clamped |= c
            repairs += rep
        else:
            rho = gain_curvature_radius(P, first[1])
            if not np.isfinite(rho):
                raise FloatingPointError("non-finite gain curvature")
            if rho * h > cfg.step_limit:
                h = cfg.step_limit / rho
            for _ in range(MAX_STEP_RETRIES):
                with np.errstate(all="ignore"):
                    try:
                        x_new, P_new, c = coupled_step(x, P, m, cfg.process_cc, rdd, h, first)
                        ok = _finite(x_new, P_new) and not c
                        if ok:
                            P_new, rep = restore_definiteness(cap_disparity_gain(P_new, cfg.max_disparity_gain))
                            nxt = evaluate(x_new, m)
                            ok = h * gain_curvature_radius(P_new, nxt[1]) <= 2.0 * cfg.step_limit
                    except (ArithmeticError, ValueError):
                        ok = False
                if ok:
                    break
                h *= 0.25
            else:
                raise FloatingPointError("step rejected repeatedly; integration is unstable")
            x, P, first = x_new, P_new, nxt
            repairs += rep
        t += h
        steps += 1
    return x, P, clamped, steps, repairs


def filter_frame(x: State, P: GainMatrix, frame: Frame, cfg: FilterConfig, grid: PixelGrid):
    """Integrate one frame interval, then propagate the disparity map.

    Returns ``(state, gain, diagnostics)``.  ``diagnostics['disparity']`` is
    the updated map before propagation, i.e. the estimate for this frame.
    """
    diag = {}
    try:
        m, rdd, outliers = frame_measurement(x, frame, cfg, grid)
        x, P, clamped, steps, repairs = integrate_frame(x, P, m, cfg, rdd)
        e, _, _, valid = pixel_terms(x, m, hessian=False)
        res = np.linalg.norm(grid.vector_to_pixels(m.flow.vectors - _predicted_flow(x, grid)), axis=1)[valid]
        diag.update(
            energy=float(np.sum(e)),
            residual_mean_px=float(np.mean(res)) if res.size else 0.0,
            residual_median_px=float(np.median(res)) if res.size else 0.0,
            outlier_fraction=float(np.mean(outliers)),
            gain_trace=P.trace(),
            gain_clamped=bool(clamped),
            substeps=steps,
            gain_repairs=int(repairs),
            disparity=x.d.copy(),
            pose=x.E,
            velocity=x.v.copy(),
        )
        if not (np.all(np.isfinite(x.d)) and np.all(np.isfinite(P.cc)) and np.all(np.isfinite(x.E.trans))):
            raise FloatingPointError("non-finite state or gain")
        propagated = 0
        if cfg.propagate:
            x, P, propagated = _propagate(x, P, cfg, grid)
        diag["propagation_invalid"] = int(propagated)
        if cfg.sparsify:
            P, rep = restore_definiteness(sparsify(P))
            diag["gain_repairs"] += int(rep)
    except (FloatingPointError, DegenerateInterpolationError, np.linalg.LinAlgError, ValueError) as exc:
        raise FilterError(str(exc), diag) from exc
    return x, P, diag


def _predicted_flow(x: State, grid: PixelGrid):
    P = homogeneous(grid.points) / x.d[:, None] @ x.E.rot.T + x.E.trans
    return P[:, :2] / np.where(np.abs(P[:, 2:3]) > 1e-12, P[:, 2:3], 1.0) - grid.points


def _propagate(x: State, P: GainMatrix, cfg: FilterConfig, grid: PixelGrid):
    carry = cfg.propagate_gain and P.diagonal
    extra = np.column_stack([P.dd, P.cd.T]) if carry else None
    d_new, ok, extra_new = propagate(x.E, x.d, grid, extra)
    x = State(x.E, x.v, d_new)
    if carry:
        dd = np.where(ok, extra_new[:, 0], P.dd)
        # Inflate once per frame, never beyond the inflated initial gain.
        inflated = np.minimum(dd * cfg.disocclusion_gain_factor, cfg.disocclusion_gain_factor * np.asarray(cfg.init_dd))
        dd = np.where(ok, np.maximum(dd, 0.0), np.maximum(dd, inflated))
        cd = np.where(ok[None, :], extra_new[:, 1:].T, P.cd)
        P = GainMatrix(P.cc, cd, dd)
    return x, P, int(np.count_nonzero(~ok))


class MinimumEnergyFilter:
    """A filter session: holds the current state and gain across frames."""

    def __init__(self, grid: PixelGrid, config: FilterConfig | None = None, state=None, gain=None):
        self.grid = grid
        self.config = config or FilterConfig()
        self.state = state or State.initial(grid.n, self.config.init_disparity)
        self.gain = gain or initial_gain(grid.n, self.config)
        self.frame_index = 0

    def step(self, frame: Frame) -> dict:
        try:
            self.state, self.gain, diag = filter_frame(self.state, self.gain, frame, self.config, self.grid)
        except FilterError as exc:
            exc.diagnostics["frame"] = self.frame_index
            raise
        diag["frame"] = self.frame_index
        self.frame_index += 1
        return diag

    def run(self, frames) -> list[dict]:
        return [self.step(f) for f in frames]


def with_overrides(cfg: FilterConfig, **kw) -> FilterConfig:
    return replace(cfg, **kw)
