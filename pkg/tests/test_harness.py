import numpy as np
import pytest

from mefilter.harness import (
    DepthField,
    EvalReport,
    GenerationError,
    GroundTruthFrame,
    SyntheticScene,
    add_noise,
    disparity_errors,
    evaluate_frame,
    fb_consistency_mask,
    generate_sequence,
    inject_outliers,
    scale_correct,
)
from mefilter.lie import SE3
from mefilter.observation import CharbonnierParams, FlowField, WeightField, measurement_energy


def plane_scene(**kw):
    return SyntheticScene(16, 16, depth=DepthField("plane", base=5.0), **kw)


def test_zero_trajectory_gives_zero_flow():
    seq = generate_sequence(plane_scene(twist=(0,) * 6), 3)
    for fr in seq:
        np.testing.assert_allclose(fr.flow.vectors, 0.0, atol=1e-15)


def test_plane_approach_disparities():
    seq = generate_sequence(plane_scene(twist=(0, 0, 0, 0, 0, -1)), 4)
    for k, fr in enumerate(seq):
        np.testing.assert_allclose(fr.disparity, 1.0 / (5 - k), rtol=1e-14)


def test_generation_rejects_depth_below_one():
    with pytest.raises(GenerationError):
        generate_sequence(plane_scene(twist=(0, 0, 0, 0, 0, -1)), 5)


def test_ground_truth_has_zero_energy():
    scene = SyntheticScene(16, 16)
    for fr in generate_sequence(scene, 5):
        e = measurement_energy(fr.relative, fr.disparity, fr.flow, WeightField.isotropic(scene.grid.n),
                               CharbonnierParams(), scene.grid)
        assert e <= 1e-12


def test_identity_corruption():
    flow = generate_sequence(SyntheticScene(8, 8), 1)[0].flow
    np.testing.assert_array_equal(add_noise(flow, 0.0, 1).vectors, flow.vectors)
    out, mask = inject_outliers(flow, 0.0, 1.0, 1)
    np.testing.assert_array_equal(out.vectors, flow.vectors)
    assert not mask.any()


def test_outlier_count_and_magnitude():
    flow = FlowField.zeros(100)
    out, mask = inject_outliers(flow, 0.1, 2.5, 7)
    assert mask.sum() == 10
    np.testing.assert_allclose(np.linalg.norm(out.vectors[mask], axis=1), 2.5)
    np.testing.assert_array_equal(out.vectors[~mask], 0.0)


def test_noise_std_and_determinism():
    flow = FlowField.zeros(64 * 64)
    noisy = add_noise(flow, 0.01, 3)
    assert abs(noisy.vectors.std() / 0.01 - 1) < 0.05
    np.testing.assert_array_equal(noisy.vectors, add_noise(flow, 0.01, 3).vectors)
    a, ma = inject_outliers(flow, 0.2, 1.0, 5)
    b, mb = inject_outliers(flow, 0.2, 1.0, 5)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    np.testing.assert_array_equal(ma, mb)


def test_fb_consistency_examples():
    scene = SyntheticScene(24, 24, twist=(0, 0.005, 0, 0.05, 0.0, 0.02))
    fr = generate_sequence(scene, 1, backward=True)[0]
    grid = scene.grid
    tau = grid.pixel_size
    ok = fb_consistency_mask(fr.flow, fr.backward, grid, tau)
    # pixels whose forward target stays inside the image are consistent
    target = grid.to_pixels(grid.points + fr.flow.vectors)
    inside = np.all((target >= 0) & (target <= 23), axis=1)
    assert np.array_equal(ok, inside)
    assert np.all(fb_consistency_mask(fr.flow, fr.backward, grid, np.inf))

    bad, mask = inject_outliers(fr.flow, 0.1, 20 * tau, 2)
    ok = fb_consistency_mask(bad, fr.backward, grid, tau)
    assert not np.any(ok[mask])


def test_scale_correct_examples(rng):
    gt = rng.uniform(0.1, 0.5, 200)
    mask = np.ones(200, bool)
    s, c = scale_correct(gt, gt, mask)
    assert s == 1.0
    s, c = scale_correct(gt / 2, gt, mask)
    assert s == 2.0
    np.testing.assert_allclose(c, gt, rtol=1e-15)
    corrupt = gt / 2
    corrupt[:20] = rng.uniform(0.01, 1.0, 20)
    s, _ = scale_correct(corrupt, gt, mask)
    assert s == pytest.approx(2.0, rel=1e-14)
    with pytest.raises(ValueError):
        scale_correct(gt, gt, np.zeros(200, bool))


def test_scale_correct_is_equivariant(rng):
    gt = rng.uniform(0.1, 0.5, 100)
    est = gt * rng.uniform(0.8, 1.2, 100)
    mask = np.ones(100, bool)
    s1, c1 = scale_correct(est, gt, mask)
    s2, c2 = scale_correct(est / 3.0, gt, mask)  # depths times 3
    assert s2 == pytest.approx(3.0 * s1, rel=1e-12)
    np.testing.assert_allclose(c2, c1, rtol=1e-12)


def test_disparity_error_examples():
    gt = np.full(100, 0.5)
    mask = np.ones(100, bool)
    rep = disparity_errors(gt, gt, mask, mask, pixel_scale=100.0)
    assert (rep.p3px_occ, rep.p5px_occ, rep.p3px_noc, rep.p5px_noc) == (0, 0, 0, 0)
    est = gt.copy()
    est[0] += 0.04  # 4 px at scale 100
    rep = disparity_errors(est, gt, mask, mask, pixel_scale=100.0)
    assert rep.p3px_occ == 1.0 and rep.p5px_occ == 0.0


def test_report_round_trip():
    rep = EvalReport(1.0, 0.5, 2.0, 0.25, 3.5, 0.1, 2.0, 1.5)
    assert EvalReport.from_dict(rep.to_dict()) == rep


def test_evaluate_frame_is_scale_invariant():
    scene = SyntheticScene(32, 32)
    fr = generate_sequence(scene, 1)[0]
    rep = evaluate_frame(fr.disparity / 2, fr, scene.grid, E_est=fr.relative)
    assert rep.scale == pytest.approx(2.0)
    assert rep.p3px_occ == 0 and rep.median_rel_depth_err < 1e-12
    assert rep.rotation_err_deg == 0.0 and rep.translation_err_deg < 1e-6


def test_initial_pose_moves_the_whole_sequence():
    scene = SyntheticScene(8, 8, depth=DepthField("plane", base=4.0), twist=(0,) * 6)
    seq = generate_sequence(scene, 2, initial_pose=SE3(np.eye(3), [0.0, 0.0, 0.5]))
    assert isinstance(seq[0], GroundTruthFrame)
    np.testing.assert_allclose(seq[0].disparity, 1 / 4.5, rtol=1e-14)
    np.testing.assert_array_equal(seq[1].pose.trans, [0.0, 0.0, 0.5])
