"""Self-checks of the filter's derivatives and geometry on seeded random instances.

Each check compares an implementation against an independent oracle
(central finite differences, defining identities, or the dense reference)
and reports the observed error next to its tolerance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .disparity import DisparityGroup
from .filter import (
    N_CAM,
    FilterConfig,
    Frame,
    Measurement,
    MinimumEnergyFilter,
    State,
    energy,
    hamiltonian_gradient,
    riccati_H,
    state_group,
)
from .harness import SyntheticScene, generate_sequence
from .lie import EuclideanGroup, MatrixGroup, SE3Group, SO3Group, se3_exp
from .observation import CharbonnierParams, FlowField, PixelGrid, WeightField, induced_flow
from .reference import DenseReferenceFilter, dense_gradient_hessian

FD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float

    def to_dict(self) -> dict:
        return asdict(self)


def _result(name: str, error: float, tol: float) -> CheckResult:
    return CheckResult(name, bool(np.isfinite(error) and error <= tol), float(error), float(tol))


def random_instance(rng: np.random.Generator, size: int = 8, quadratic: bool = False):
    """A state and a measurement whose flow comes from a different state plus noise."""
    grid = PixelGrid.synthetic(size, size)
    n = grid.n
    x = State(
        se3_exp(np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3) + [0.0, 0.0, 0.1]])),
        rng.normal(0, 0.05, 6),
        rng.uniform(0.15, 0.6, n),
    )
    truth = se3_exp(np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3) + [0.0, 0.0, 0.1]]))
    flow = induced_flow(truth, rng.uniform(0.15, 0.6, n), grid).vectors + rng.normal(0, 0.02, (n, 2))
    params = CharbonnierParams(nu=float(10 ** rng.uniform(-3, 0)), beta=float(rng.uniform(0.3, 1.0)))
    Q = WeightField.isotropic(n, (2.0 * grid.pixel_size) ** 2)
    m = Measurement.build(grid, FlowField(flow, np.ones(n, dtype=bool)), Q, params, quadratic)
    return x, m


def fd_gradient(x: State, m: Measurement, h: float = FD_STEP) -> np.ndarray:
    N = N_CAM + x.n
    g = np.empty(N)
    for i in range(N):
        e = np.zeros(N)
        e[i] = h
        g[i] = (energy(x.retract(e), m) - energy(x.retract(-e), m)) / (2 * h)
    return g


def fd_hessian(x: State, m: Measurement, gradient: Callable = hamiltonian_gradient, h: float = 1e-5) -> np.ndarray:
    """Covariant Hessian from differences of the analytic gradient.

    Differentiating G_i along ``x exp(r e_j)`` gives the mixed second
    derivative; removing the connection term makes it covariant.
    """
    N = N_CAM + x.n
    group = state_group(x.n)
    G = gradient(x, m)
    M = np.empty((N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = h
        M[:, j] = (gradient(x.retract(e), m) - gradient(x.retract(-e), m)) / (2 * h)
    eye = np.eye(N)
    H = M.T.copy()
    for j in range(N_CAM):
        for i in range(N_CAM):
            H[j, i] -= G @ group.connection(eye[j], eye[i])
    return 0.5 * (H + H.T)


def _rel(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def check_gradient(seed: int = 0, states: int = 20, size: int = 8, tol: float = 1e-5,
                   gradient: Callable = hamiltonian_gradient) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(states):
        x, m = random_instance(rng, size)
        worst = max(worst, _rel(gradient(x, m), fd_gradient(x, m)))
    return _result("gradient vs finite differences", worst, tol)


def check_hessian(seed: int = 0, states: int = 20, size: int = 8, tol: float = 1e-4,
                  gradient: Callable = hamiltonian_gradient) -> CheckResult:
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(states):
        x, m = random_instance(rng, size)
        worst = max(worst, _rel(riccati_H(x, m).dense(), fd_hessian(x, m, gradient)))
    return _result("Hessian vs finite differences", worst, tol)


def check_torsion(group: MatrixGroup, rng: np.random.Generator, count: int = 100) -> float:
    worst = 0.0
    for _ in range(count):
        a, b = rng.normal(size=group.dim), rng.normal(size=group.dim)
        err = group.connection(a, b) - group.connection(b, a) - group.bracket(a, b)
        worst = max(worst, float(np.max(np.abs(err))))
    return worst


def check_metric_compatibility(group: MatrixGroup, rng: np.random.Generator, count: int = 100,
                               h: float = 1e-4) -> float:
    """d/dt <eta, zeta> along x exp(t xi) versus the covariant derivatives.

    ``eta`` and ``zeta`` are quadratic-in-t coordinate fields, so their
    covariant derivative along the curve is ``eta' + omega_xi eta``.
    """
    worst = 0.0
    for _ in range(count):
        xi, e0, e1, e2, z0, z1, z2 = (rng.normal(size=group.dim) for _ in range(7))

        def eta(t):
            return e0 + t * e1 + t * t * e2

        def zeta(t):
            return z0 + t * z1 + t * t * z2

        t0 = rng.uniform(-1, 1)
        fd = (eta(t0 + h) @ zeta(t0 + h) - eta(t0 - h) @ zeta(t0 - h)) / (2 * h)
        cov = (e1 + 2 * t0 * e2 + group.connection(xi, eta(t0))) @ zeta(t0) + eta(t0) @ (
            z1 + 2 * t0 * z2 + group.connection(xi, zeta(t0))
        )
        worst = max(worst, abs(fd - cov) / (1.0 + abs(cov)))
    return worst


def check_connection(seed: int = 0, count: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 2)
    groups = {"SO3": SO3Group(), "SE3": SE3Group(), "R6": EuclideanGroup(6), "D4": DisparityGroup(4),
              "SE3xR6xD4": state_group(4)}
    out = []
    for name, g in groups.items():
        out.append(_result(f"torsion-free {name}", check_torsion(g, rng, count), 1e-12))
        out.append(_result(f"metric compatibility {name}", check_metric_compatibility(g, rng, count), 1e-6))
    return out


def check_dense_hessian(seed: int = 0, states: int = 5, tol: float = 1e-9) -> CheckResult:
    """Structured G and H against the jet-based dense derivatives on 2x2 grids."""
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for _ in range(states):
        x, m = random_instance(rng, size=2)
        G, H = dense_gradient_hessian(x, m.grid, m.flow, m.W, m.params.nu, m.params.beta, m.quadratic)
        worst = max(worst, _rel(hamiltonian_gradient(x, m), G), _rel(riccati_H(x, m).dense(), H))
    return _result("structured vs dense derivatives", worst, tol)


def reference_config(beta: float = 0.5) -> FilterConfig:
    return FilterConfig(sparsify=False, propagate=False, step_limit=None, max_disparity_gain=None,
                        charbonnier=CharbonnierParams(nu=0.25, beta=beta))


def dense_reference_error(seed: int = 0, frames: int = 5, beta: float = 0.5) -> float:
    """Largest relative deviation of state and gain from the dense filter."""
    rng = np.random.default_rng(seed + 4)
    scene = SyntheticScene(width=2, height=2, focal=2.0)
    seq = generate_sequence(scene, frames)
    twist = np.asarray(scene.twist)
    x0 = State(se3_exp(0.8 * twist), 1.1 * twist, rng.uniform(0.2, 0.35, scene.grid.n))
    cfg = reference_config(beta)
    fast = MinimumEnergyFilter(scene.grid, cfg, state=x0.copy())
    dense = DenseReferenceFilter(scene.grid, cfg, state=x0)
    worst = 0.0
    for fr in seq:
        fast.step(Frame(fr.flow))
        dense.step(Frame(fr.flow))
        worst = max(
            worst,
            _rel(fast.state.d, dense.x.d),
            _rel(fast.state.E.matrix(), dense.x.E.matrix()),
            _rel(fast.state.v, dense.x.v),
            _rel(fast.gain.dense(), dense.P),
        )
    return worst


def check_dense_reference(seed: int = 0, frames: int = 5, tol: float = 1e-8) -> list[CheckResult]:
    return [_result(f"dense reference, beta={b}", dense_reference_error(seed, frames, b), tol) for b in (0.5, 1.0)]


def run_all(seed: int = 0, gradient: Callable = hamiltonian_gradient) -> list[CheckResult]:
    results = [check_gradient(seed, gradient=gradient), check_hessian(seed, gradient=gradient)]
    results += check_connection(seed)
    results.append(check_dense_hessian(seed))
    results += check_dense_reference(seed)
    return results
