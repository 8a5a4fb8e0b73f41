import numpy as np
import pytest

from mefilter.harness import DepthField, SyntheticScene, generate_sequence
from mefilter.lie import SE3, se3_exp
from mefilter.observation import PixelGrid, induced_flow
from mefilter.propagation import (
    DegenerateInterpolationError,
    propagate,
    scattered_interpolate,
    warp_grid,
)


def smooth_disparity(grid, base=0.25):
    z = grid.points
    return base + 0.03 * np.sin(2 * z[:, 0]) * np.cos(1.5 * z[:, 1])


def test_warp_examples():
    grid = PixelGrid.synthetic(8, 8)
    d = np.full(grid.n, 0.3)
    w = warp_grid(SE3.identity(), d, grid)
    np.testing.assert_array_equal(w.positions, grid.points)
    assert np.all(w.valid)

    # 3x1 grid with z = (-0.1, 0, 0.1): the axial pixel stays, z=0.1 moves to 0.2
    g = PixelGrid(3, 1, np.array([[10.0, 0, 1], [0, 10, 0], [0, 0, 1]]))
    w = warp_grid(SE3(np.eye(3), [0, 0, -1]), np.full(3, 0.5), g)
    np.testing.assert_allclose(w.positions[1], [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(w.positions[2], [0.2, 0.0], atol=1e-15)
    np.testing.assert_allclose(w.disparity, 1.0)
    assert not w.valid[0] and not w.valid[2]  # leaves the 2-pixel box / reaches depth 1


def test_warp_invalidates_points_behind_camera():
    grid = PixelGrid.synthetic(4, 4)
    w = warp_grid(SE3(np.eye(3), [0, 0, -10]), np.full(grid.n, 0.5), grid)
    assert not np.any(w.valid)


def test_interpolation_identity_and_constants(rng):
    grid = PixelGrid.synthetic(12, 10)
    vals = rng.uniform(0.1, 0.9, grid.n)
    out, mask = scattered_interpolate(grid.points, vals, np.ones(grid.n, bool), grid)
    assert np.all(mask)
    np.testing.assert_allclose(out, vals, rtol=0, atol=1e-14)

    jitter = grid.points + rng.uniform(-0.3, 0.3, (grid.n, 2)) * grid.pixel_size
    out, mask = scattered_interpolate(jitter, np.full(grid.n, 0.4), np.ones(grid.n, bool), grid)
    assert mask.sum() > grid.n // 2
    np.testing.assert_allclose(out[mask], 0.4, atol=1e-14)


def test_interpolation_of_quadratic_field(rng):
    grid = PixelGrid.synthetic(24, 24)

    def f(z):
        return 0.3 + 0.5 * z[:, 0] ** 2 - 0.2 * z[:, 0] * z[:, 1] + 0.1 * z[:, 1]

    pos = grid.points + rng.uniform(-0.4, 0.4, (grid.n, 2)) * grid.pixel_size
    out, mask = scattered_interpolate(pos, f(pos), np.ones(grid.n, bool), grid)
    px = grid.pixel_coords()
    interior = mask & np.all((px >= 2) & (px <= 21), axis=1)
    assert interior.sum() > 300
    assert np.max(np.abs(out[interior] - f(grid.points)[interior])) < 1e-3


def test_interpolation_needs_enough_samples():
    grid = PixelGrid.synthetic(5, 5)
    valid = np.zeros(grid.n, bool)
    valid[:15] = True
    with pytest.raises(DegenerateInterpolationError):
        scattered_interpolate(grid.points, np.ones(grid.n), valid, grid)


def test_identity_motion_is_fixed_point(rng):
    grid = PixelGrid.synthetic(16, 16)
    d = rng.uniform(0.1, 0.6, grid.n)
    d_new, mask, _ = propagate(SE3.identity(), d, grid)
    assert np.all(mask)
    np.testing.assert_allclose(d_new, d, rtol=0, atol=1e-14)


def test_plane_under_forward_translation():
    grid = PixelGrid.synthetic(20, 20)
    d_new, mask, _ = propagate(SE3(np.eye(3), [0, 0, -1]), np.full(grid.n, 0.2), grid)
    assert mask.sum() > 0.5 * grid.n
    np.testing.assert_allclose(d_new[mask], 0.25, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(d_new[~mask], 0.2)


def test_round_trip_is_interpolation_limited():
    grid = PixelGrid.synthetic(32, 32)
    d = smooth_disparity(grid)
    E = se3_exp([0.0, 0.01, 0.0, 0.05, 0.0, 0.1])
    fwd, m1, _ = propagate(E, d, grid)
    back, m2, _ = propagate(E.inverse(), fwd, grid)
    ok = m1 & m2
    assert ok.sum() > 0.5 * grid.n
    assert np.median(np.abs(back[ok] - d[ok]) / d[ok]) < 5e-3


def test_propagated_state_predicts_next_flow():
    scene = SyntheticScene(32, 32, depth=DepthField("sinusoid", base=4.0, amplitude=0.3, period=6.0))
    seq = generate_sequence(scene, 2)
    grid = scene.grid
    d_new, mask, _ = propagate(seq[0].relative, seq[0].disparity, grid)
    pred = induced_flow(seq[1].relative, d_new, grid).vectors[mask]
    truth = seq[1].flow.vectors[mask]
    err = np.linalg.norm(pred - truth, axis=1) / np.linalg.norm(truth, axis=1)
    assert np.median(err) < 0.01


def test_extra_channels_follow_the_same_interpolant(rng):
    grid = PixelGrid.synthetic(16, 16)
    d = smooth_disparity(grid)
    E = se3_exp([0.0, 0.0, 0.0, 0.05, 0.0, 0.0])
    extra = np.column_stack([np.full(grid.n, 7.0), rng.normal(size=grid.n)])
    d_new, mask, extra_new = propagate(E, d, grid, extra)
    np.testing.assert_allclose(extra_new[mask, 0], 7.0, atol=1e-12)
    np.testing.assert_array_equal(extra_new[~mask], extra[~mask])
