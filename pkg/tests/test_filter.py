import numpy as np
import pytest

from mefilter.checks import fd_gradient, fd_hessian, random_instance
from mefilter.filter import (
    N_CAM,
    FilterConfig,
    FilterError,
    Frame,
    GainMatrix,
    Measurement,
    MinimumEnergyFilter,
    State,
    energy,
    evaluate,
    hamiltonian_gradient,
    propagation_field,
    restore_definiteness,
    riccati_C,
    riccati_H,
    riccati_step,
    sparsify,
    state_group,
    state_step,
)
from mefilter.harness import DepthField, SyntheticScene, evaluate_frame, generate_sequence
from mefilter.lie import SE3, se3_exp
from mefilter.observation import CharbonnierParams, FlowField, PixelGrid, WeightField, induced_flow


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def zero_hessian(n):
    return GainMatrix(np.zeros((N_CAM, N_CAM)), np.zeros((N_CAM, n)), np.zeros(n))


def random_gain(rng, n):
    A = rng.normal(size=(N_CAM + n, N_CAM + n))
    return GainMatrix.from_dense(A @ A.T / (N_CAM + n) + np.eye(N_CAM + n))


# -- propagation field and gradient ------------------------------------------


def test_propagation_field_examples():
    x = State.initial(4)
    np.testing.assert_array_equal(propagation_field(x), 0.0)
    x.v = np.array([0, 0, 0, 1.0, 0, 0])
    f = propagation_field(x)
    np.testing.assert_array_equal(f[:6], [0, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(f[6:], 0.0)


def test_constant_twist_integrates_to_exponential():
    v = np.array([0.1, -0.2, 0.05, 0.3, 0.1, -0.2])
    x = State(SE3.identity(), v, np.full(3, 0.4))
    out = state_step(x, zero_hessian(3), np.zeros(N_CAM + 3), 1.0)
    np.testing.assert_allclose(out.E.matrix(), se3_exp(v).matrix(), atol=1e-14)
    np.testing.assert_array_equal(out.v, v)
    np.testing.assert_allclose(out.d, x.d, rtol=1e-15)


def test_gradient_vanishes_on_exact_flow(rng):
    grid = PixelGrid.synthetic(6, 6)
    x = State(se3_exp([0.01, 0.02, 0.0, 0.1, 0.0, 0.05]), rng.normal(size=6), rng.uniform(0.2, 0.5, grid.n))
    m = Measurement.build(grid, induced_flow(x.E, x.d, grid))
    np.testing.assert_allclose(hamiltonian_gradient(x, m), 0.0, atol=1e-12)


def test_gradient_matches_finite_differences(rng):
    for _ in range(20):
        x, m = random_instance(rng, 8)
        G = hamiltonian_gradient(x, m)
        np.testing.assert_array_equal(G[6:12], 0.0)
        assert rel_err(G, fd_gradient(x, m)) < 1e-5


def test_hessian_matches_gradient_differences(rng):
    for _ in range(5):
        x, m = random_instance(rng, 8)
        H = riccati_H(x, m).dense()
        np.testing.assert_array_equal(H, H.T)
        np.testing.assert_array_equal(H[6:12], 0.0)
        assert rel_err(H, fd_hessian(x, m)) < 1e-4


def test_hessian_matches_energy_second_differences(rng):
    """Polarized second differences of the energy along exp curves.

    d^2/dt^2 f(x exp(t xi)) = Hess(xi, xi) + G . omega_xi xi, so the
    connection term is removed before comparing.
    """
    x, m = random_instance(rng, 6)
    N = N_CAM + x.n
    group = state_group(x.n)
    G = hamiltonian_gradient(x, m)
    h = 1e-4
    f0 = energy(x, m)

    def quad(xi):
        second = (energy(x.retract(h * xi), m) - 2 * f0 + energy(x.retract(-h * xi), m)) / h**2
        return second - G @ group.connection(xi, xi)

    eye = np.eye(N)
    fd = np.zeros((N, N))
    for i in range(N):
        for j in range(i, N):
            fd[i, j] = fd[j, i] = 0.25 * (quad(eye[i] + eye[j]) - quad(eye[i] - eye[j]))
    assert rel_err(riccati_H(x, m).dense(), fd) < 1e-4


def test_hessian_is_gauss_newton_at_zero_residual(rng):
    grid = PixelGrid.synthetic(5, 5)
    x = State(se3_exp([0.01, -0.02, 0.0, 0.1, 0.05, 0.02]), np.zeros(6), rng.uniform(0.2, 0.5, grid.n))
    Q = WeightField.isotropic(grid.n, 0.01)
    m = Measurement.build(grid, induced_flow(x.E, x.d, grid), Q, CharbonnierParams(1e-3, 1.0))
    N = N_CAM + grid.n
    J = np.zeros((grid.n, 2, N))
    h = 1e-6
    for k in range(N):
        e = np.zeros(N)
        e[k] = h
        J[:, :, k] = (induced_flow(*_Ed(x.retract(e)), grid).vectors
                      - induced_flow(*_Ed(x.retract(-e)), grid).vectors) / (2 * h)
    gn = np.einsum("pik,pij,pjl->kl", J, m.W, J)
    H = riccati_H(x, m).dense()
    assert rel_err(H, gn) < 1e-6
    assert np.linalg.eigvalsh(H)[0] >= -1e-10 * np.max(np.abs(H))


def _Ed(x):
    return x.E, x.d


# -- Riccati and C ------------------------------------------------------------


def test_riccati_linear_flow_is_exact(rng):
    n = 3
    P0 = random_gain(rng, n)
    Rcc = np.diag(rng.uniform(0.1, 1, N_CAM))
    rdd = rng.uniform(0.1, 1, n)
    P, _ = riccati_step(P0, np.zeros((N_CAM, N_CAM)), zero_hessian(n), Rcc, rdd, 0.7)
    expected = P0.dense() + 0.7 * np.diag(np.concatenate([np.diag(Rcc), rdd]))
    np.testing.assert_allclose(P.dense(), expected, rtol=0, atol=1e-14)


def test_scalar_riccati_reaches_equilibrium():
    r, hh = 0.3, 2.0
    H = zero_hessian(1)
    H.dd[:] = hh
    P = GainMatrix.block_diagonal(np.zeros(N_CAM), 0.0, 1)
    for _ in range(400):
        P, _ = riccati_step(P, np.zeros((N_CAM, N_CAM)), H, np.zeros((N_CAM, N_CAM)), np.array([r]), 0.05)
    assert abs(P.dd[0] - np.sqrt(r / hh)) < 1e-6


def test_riccati_preserves_symmetry(rng):
    n = 4
    P = random_gain(rng, n)
    C = 0.1 * rng.normal(size=(N_CAM, N_CAM))
    H = GainMatrix.from_dense(0.01 * random_gain(rng, n).dense())
    for _ in range(100):
        P, _ = riccati_step(P, C, H, np.eye(N_CAM), np.ones(n), 0.01)
        assert np.max(np.abs(P.cc - P.cc.T)) <= 1e-10


def test_riccati_clamps_negative_disparity_gain():
    H = zero_hessian(2)
    H.dd[:] = 1e6
    P = GainMatrix.block_diagonal(np.ones(N_CAM), 1.0, 2)
    P, clamped = riccati_step(P, np.zeros((N_CAM, N_CAM)), H, np.eye(N_CAM), np.zeros(2), 1.0)
    assert clamped and np.all(P.dd >= 0)


def test_c_structure(rng):
    x = State.initial(3)
    C = riccati_C(x, np.zeros(N_CAM + 3))
    expected = np.zeros((N_CAM, N_CAM))
    expected[:6, 6:] = np.eye(6)
    np.testing.assert_array_equal(C, expected)
    x.v = rng.normal(size=6)
    C = riccati_C(x, rng.normal(size=N_CAM + 3))
    np.testing.assert_array_equal(C[6:], 0.0)
    np.testing.assert_array_equal(C[:6, 6:], np.eye(6))
    assert np.any(C[:6, :6] != 0)


# -- state step, sparsify, repair ----------------------------------------------


def test_state_step_without_correction_is_kinematic(rng):
    v = rng.normal(size=6) * 0.1
    x = State(se3_exp(rng.normal(size=6) * 0.1), v, rng.uniform(0.2, 0.5, 4))
    P = random_gain(rng, 4)
    G = rng.normal(size=N_CAM + 4)
    expected = (x.E @ se3_exp(0.25 * v)).matrix()
    a = state_step(x, P, np.zeros(N_CAM + 4), 0.25)
    b = state_step(x, zero_hessian(4), G, 0.25)
    for out in (a, b):
        np.testing.assert_allclose(out.E.matrix(), expected, atol=1e-14)
        np.testing.assert_allclose(out.d, x.d, rtol=1e-14)


def test_one_pixel_toy_converges_to_measurement(rng):
    """With the pose pinned, the disparity of a single pixel moves to the data."""
    grid = PixelGrid(4, 4, np.array([[4.0, 0, 1.5], [0, 4.0, 1.5], [0, 0, 1]]))
    E = se3_exp([0, 0, 0, 0.2, 0.0, 0.0])
    d_true = np.full(grid.n, 0.3)
    m = Measurement.build(grid, induced_flow(E, d_true, grid), WeightField.isotropic(grid.n, 0.01),
                          CharbonnierParams(0.25, 0.5))
    x = State(E, np.zeros(6), np.full(grid.n, 0.5))
    P = GainMatrix.block_diagonal(np.zeros(N_CAM), 0.05, grid.n)
    for _ in range(300):
        x = state_step(x, P, lambda y: hamiltonian_gradient(y, m), 0.5)
    np.testing.assert_allclose(x.d, d_true, atol=1e-6)


def test_sparsify_examples(rng):
    P = random_gain(rng, 3)
    np.testing.assert_array_equal(sparsify(P).dense(), P.dense())
    dense = GainMatrix.from_dense(random_gain(rng, 3).dense() + 0.1, diagonal=False)
    out = sparsify(dense)
    D = out.dense()
    np.testing.assert_array_equal(D[N_CAM:, N_CAM:], np.diag(np.diag(dense.dd)))
    np.testing.assert_array_equal(D[:N_CAM, :N_CAM], dense.cc)
    P.cc[0, 1] += 1e-9
    out = sparsify(P)
    np.testing.assert_array_equal(out.cc, out.cc.T)


def test_restore_definiteness_returns_psd(rng):
    P = random_gain(rng, 5)
    P.cd *= 20
    assert np.linalg.eigvalsh(P.dense())[0] < 0
    Q, repaired = restore_definiteness(P)
    assert repaired and np.linalg.eigvalsh(Q.dense())[0] > 0
    R, again = restore_definiteness(Q)
    assert not again


# -- whole frames ---------------------------------------------------------------


def test_zero_flow_is_fixed_point():
    grid = PixelGrid.synthetic(16, 16)
    filt = MinimumEnergyFilter(grid)
    for _ in range(3):
        filt.step(Frame(FlowField.zeros(grid.n)))
    np.testing.assert_allclose(filt.state.E.matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(filt.state.v, 0.0, atol=1e-9)
    np.testing.assert_allclose(filt.state.d, 0.5, atol=1e-9)


def test_error_decreases_on_noiseless_sequence():
    scene = SyntheticScene()
    seq = generate_sequence(scene, 10)
    filt = MinimumEnergyFilter(scene.grid)
    errs = []
    for fr in seq:
        diag = filt.step(Frame(fr.flow))
        errs.append(evaluate_frame(diag["disparity"], fr, scene.grid).median_rel_depth_err)
    assert all(b < a for a, b in zip(errs[1:], errs[2:]))


def run_filter(cfg, seq, grid, state=None):
    filt = MinimumEnergyFilter(grid, cfg, state=state)
    return [filt.step(Frame(fr.flow)) for fr in seq], filt


def test_beta_one_matches_quadratic_mode():
    scene = SyntheticScene(16, 16)
    seq = generate_sequence(scene, 5)
    a, fa = run_filter(FilterConfig(charbonnier=CharbonnierParams(0.25, 1.0)), seq, scene.grid)
    b, fb = run_filter(FilterConfig(quadratic=True), seq, scene.grid)
    for da, db in zip(a, b):
        np.testing.assert_allclose(da["disparity"], db["disparity"], rtol=0, atol=1e-8)
        np.testing.assert_allclose(da["pose"].matrix(), db["pose"].matrix(), rtol=0, atol=1e-8)


def test_estimated_motion_is_independent_of_world_frame():
    """Moving the world origin (and the surface with it) leaves every estimate unchanged."""
    shift = np.array([0.7, -0.4, 0.3])
    slope = (0.1, 0.05)
    base = 4.0
    scene_a = SyntheticScene(16, 16, depth=DepthField("slanted", base=base, slope=slope))
    # surface Z = base + s.(X, Y) expressed in a world translated by ``shift``
    moved = base + shift[2] - slope[0] * shift[0] - slope[1] * shift[1]
    scene_b = SyntheticScene(16, 16, depth=DepthField("slanted", base=moved, slope=slope))
    seq_a = generate_sequence(scene_a, 5)
    seq_b = generate_sequence(scene_b, 5, initial_pose=SE3(np.eye(3), -shift))
    for fa, fb in zip(seq_a, seq_b):
        np.testing.assert_allclose(fa.flow.vectors, fb.flow.vectors, rtol=0, atol=1e-12)
    a, _ = run_filter(FilterConfig(), seq_a, scene_a.grid)
    b, _ = run_filter(FilterConfig(), seq_b, scene_b.grid)
    for da, db in zip(a, b):
        np.testing.assert_allclose(da["pose"].matrix(), db["pose"].matrix(), rtol=0, atol=1e-8)


def test_runs_are_bit_reproducible():
    scene = SyntheticScene(16, 16)
    seq = generate_sequence(scene, 3)
    a, _ = run_filter(FilterConfig(), seq, scene.grid)
    b, _ = run_filter(FilterConfig(), seq, scene.grid)
    for da, db in zip(a, b):
        np.testing.assert_array_equal(da["disparity"], db["disparity"])
        assert da["energy"] == db["energy"]


def test_diagnostics_record():
    scene = SyntheticScene(16, 16)
    diag, filt = run_filter(FilterConfig(), generate_sequence(scene, 2), scene.grid)
    for key in ("energy", "residual_mean_px", "residual_median_px", "outlier_fraction", "gain_trace", "substeps"):
        assert np.isfinite(diag[-1][key])
    assert diag[-1]["frame"] == 1 and filt.frame_index == 2


def test_non_finite_input_aborts_frame_with_diagnostics():
    grid = PixelGrid.synthetic(8, 8)
    flow = FlowField(np.full((grid.n, 2), np.nan), np.ones(grid.n, bool))
    filt = MinimumEnergyFilter(grid)
    with pytest.raises(FilterError) as info:
        filt.step(Frame(flow))
    assert info.value.diagnostics["frame"] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(substeps=0)
    with pytest.raises(ValueError):
        FilterConfig(process_cc=-np.ones(N_CAM))
    with pytest.raises(ValueError):
        FilterConfig(outlier_mode="both")
