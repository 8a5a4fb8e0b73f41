"""Synthetic ground truth, corruption, consistency masks and error metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .lie import SE3, se3_exp, so3_log
from .observation import KITTI_EPIPOLE_PX, KITTI_WIDTH, FlowField, PixelGrid, epipole, induced_flow


class GenerationError(ValueError):
    pass


@dataclass
class DepthField:
    """Height-field surface ``Z_world = depth(X_world, Y_world)``.

    kind: ``plane`` (Z = base), ``slanted`` (base + slope . (X, Y)) or
    ``sinusoid`` (base + amplitude sin(2 pi X / period) cos(2 pi Y / period)).
    """

    kind: str = "sinusoid"
    base: float = 4.0
    amplitude: float = 0.5
    period: float = 4.0
    slope: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("plane", "slanted", "sinusoid"):
            raise ValueError(f"unknown depth field kind {self.kind!r}")

    def height(self, X, Y):
        if self.kind == "plane":
            return np.full_like(np.asarray(X, dtype=float), self.base)
        if self.kind == "slanted":
            return self.base + self.slope[0] * X + self.slope[1] * Y
        k = 2.0 * np.pi / self.period
        return self.base + self.amplitude * np.sin(k * X) * np.cos(k * Y)

    def height_grad(self, X, Y):
        if self.kind == "plane":
            zero = np.zeros_like(np.asarray(X, dtype=float))
            return zero, zero
        if self.kind == "slanted":
            return np.full_like(X, self.slope[0]), np.full_like(X, self.slope[1])
        k = 2.0 * np.pi / self.period
        return (
            self.amplitude * k * np.cos(k * X) * np.cos(k * Y),
            -self.amplitude * k * np.sin(k * X) * np.sin(k * Y),
        )


@dataclass
class SyntheticScene:
    """A camera moving with constant per-frame twist in front of a surface.

    ``twist`` is the relative motion between consecutive cameras in
    (omega, u) coordinates: a point X_k in camera k is X_{k+1} = exp(twist) X_k.
    """

    width: int = 32
    height: int = 32
    focal: float | None = None
    depth: DepthField = field(default_factory=DepthField)
    twist: tuple = (0.0, 0.008, 0.0, 0.1, 0.02, 0.01)
    seed: int = 0

    @property
    def grid(self) -> PixelGrid:
        return PixelGrid.synthetic(self.width, self.height, self.focal)


@dataclass
class GroundTruthFrame:
    flow: FlowField
    disparity: np.ndarray
    pose: SE3  # world -> camera k
    relative: SE3  # camera k -> camera k+1
    backward: FlowField | None = None


def ray_depths(depth_field: DepthField, cam: SE3, z, iterations: int = 50) -> np.ndarray:
    """Depth along each pixel ray of ``cam`` (world -> camera) to the surface."""
    inv = cam.inverse()
    rays = np.column_stack([z, np.ones(len(z))]) @ inv.rot.T
    origin = inv.trans
    lam = (depth_field.base - origin[2]) / rays[:, 2]
    for _ in range(iterations):
        X = origin + lam[:, None] * rays
        F = X[:, 2] - depth_field.height(X[:, 0], X[:, 1])
        gx, gy = depth_field.height_grad(X[:, 0], X[:, 1])
        dF = rays[:, 2] - gx * rays[:, 0] - gy * rays[:, 1]
        step = F / dF
        lam = lam - step
        if np.max(np.abs(step)) < 1e-14 * np.max(np.abs(lam)):
            return lam
    raise GenerationError("ray/surface intersection did not converge")


def generate_sequence(scene: SyntheticScene, n_frames: int, backward: bool = False,
                      initial_pose: SE3 | None = None) -> list[GroundTruthFrame]:
    """Exact flows and ground-truth disparities for ``n_frames`` frames.

    ``initial_pose`` is the world -> camera transform of the first frame.
    """
    grid = scene.grid
    z = grid.points
    rel = se3_exp(np.asarray(scene.twist, dtype=float))
    pose = SE3.identity() if initial_pose is None else initial_pose
    depths = ray_depths(scene.depth, pose, z)
    frames = []
    for k in range(n_frames):
        if not np.all(np.isfinite(depths)) or np.any(depths <= 1.0):
            raise GenerationError(f"frame {k}: scene depth must exceed 1 everywhere")
        nxt = rel @ pose
        next_depths = ray_depths(scene.depth, nxt, z)
        disp = 1.0 / depths
        flow = induced_flow(rel, disp, grid)
        if not np.all(flow.valid):
            raise GenerationError(f"frame {k}: points behind the next camera")
        bwd = None
        if backward:
            if not np.all(np.isfinite(next_depths)) or np.any(next_depths <= 0):
                raise GenerationError(f"frame {k}: invalid depth in next camera")
            bwd = induced_flow(rel.inverse(), 1.0 / next_depths, grid)
        frames.append(GroundTruthFrame(flow, disp, pose, rel, bwd))
        pose, depths = nxt, next_depths
    return frames


def add_noise(flow: FlowField, sigma: float, seed: int) -> FlowField:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, flow.vectors.shape) * sigma
    return FlowField(flow.vectors + noise, flow.valid.copy())


def inject_outliers(flow: FlowField, fraction: float, magnitude: float, seed: int):
    """Replace a random pixel subset by vectors of length ``magnitude``.

    Returns the corrupted flow and the boolean mask of replaced pixels.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = flow.vectors.shape[0]
    count = int(round(fraction * n))
    idx = rng.choice(n, size=count, replace=False)
    angle = rng.uniform(0.0, 2.0 * np.pi, count)
    out = flow.vectors.copy()
    out[idx] = magnitude * np.column_stack([np.cos(angle), np.sin(angle)])
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return FlowField(out, flow.valid.copy()), mask


def sample_bilinear(field_img, px):
    """Bilinear lookup of an (h, w, c) image at pixel positions; NaN outside."""
    h, w = field_img.shape[:2]
    coords = np.stack([px[:, 1], px[:, 0]])
    inside = (px[:, 0] >= 0) & (px[:, 0] <= w - 1) & (px[:, 1] >= 0) & (px[:, 1] <= h - 1)
    out = np.stack(
        [map_coordinates(field_img[..., c], coords, order=1, mode="nearest") for c in range(field_img.shape[2])],
        axis=1,
    )
    out[~inside] = np.nan
    return out


def fb_consistency_mask(forward: FlowField, backward: FlowField, grid: PixelGrid, tau: float) -> np.ndarray:
    """True where |u_f(z) + u_b(z + u_f(z))| <= tau (all in normalized units)."""
    z = grid.points
    target = grid.to_pixels(z + forward.vectors)
    bimg = backward.vectors.reshape(grid.height, grid.width, 2)
    bvalid = backward.valid.reshape(grid.height, grid.width, 1).astype(float)
    ub = sample_bilinear(bimg, target)
    vb = sample_bilinear(bvalid, target)[:, 0]
    err = np.linalg.norm(forward.vectors + ub, axis=1)
    ok = np.isfinite(err) & (vb > 0.999) & forward.valid
    if np.isinf(tau):
        return forward.valid.copy()
    return ok & (err <= tau)


def exclusion_mask(grid: PixelGrid, epi, exclusion_px: float) -> np.ndarray:
    """Pixels at least ``exclusion_px`` pixels away from the epipole."""
    if epi is None:
        return np.ones(grid.n, dtype=bool)
    dist = np.linalg.norm(grid.pixel_coords() - grid.to_pixels(np.asarray(epi, dtype=float)), axis=1)
    return dist >= exclusion_px


def default_exclusion_px(grid: PixelGrid) -> float:
    return KITTI_EPIPOLE_PX * grid.width / KITTI_WIDTH


def scale_correct(d_est, d_gt, mask):
    """Median ratio d_gt / d_est over ``mask`` and the rescaled estimate."""
    d_est = np.asarray(d_est, dtype=float)
    d_gt = np.asarray(d_gt, dtype=float)
    mask = np.asarray(mask, dtype=bool) & (d_est > 0) & np.isfinite(d_gt)
    if not np.any(mask):
        raise ValueError("empty evaluation domain")
    s = float(np.median(d_gt[mask] / d_est[mask]))
    # depth / s in depth space is disparity * s
    return s, 1.0 / ((1.0 / d_est) / s)


@dataclass
class EvalReport:
    p3px_occ: float
    p5px_occ: float
    p3px_noc: float
    p5px_noc: float
    median_rel_depth_err: float
    rotation_err_deg: float = float("nan")
    translation_err_deg: float = float("nan")
    scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)


def _pct(mask, bad) -> float:
    return 100.0 * float(np.count_nonzero(bad & mask)) / max(int(np.count_nonzero(mask)), 1)


def disparity_errors(d_est, d_gt, occ, noc, pixel_scale: float, scale: float = 1.0) -> EvalReport:
    """Percentages of pixels whose pixel-disparity error exceeds 3 and 5 px.

    ``occ`` and ``noc`` are the evaluation masks (already restricted to the
    epipole-excluded domain by the caller).
    """
    d_est = np.asarray(d_est, dtype=float)
    d_gt = np.asarray(d_gt, dtype=float)
    err = np.abs(d_est - d_gt) * pixel_scale
    occ = np.asarray(occ, dtype=bool)
    noc = np.asarray(noc, dtype=bool)
    rel = np.abs(d_est - d_gt) / d_gt
    return EvalReport(
        p3px_occ=_pct(occ, err > 3),
        p5px_occ=_pct(occ, err > 5),
        p3px_noc=_pct(noc, err > 3),
        p5px_noc=_pct(noc, err > 5),
        median_rel_depth_err=100.0 * float(np.median(rel[occ])) if np.any(occ) else 0.0,
        scale=scale,
    )


def motion_errors(E_est: SE3, E_gt: SE3) -> tuple[float, float]:
    """Rotation angle error and translation direction error, both in degrees."""
    rot = np.degrees(np.linalg.norm(so3_log(E_est.rot.T @ E_gt.rot)))
    a, b = E_est.trans, E_gt.trans
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float(rot), float("nan")
    cosang = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(rot), float(np.degrees(np.arccos(cosang)))


def evaluate_frame(d_est, gt: GroundTruthFrame, grid: PixelGrid, E_est: SE3 | None = None,
                   noc=None, pixel_scale: float | None = None, exclusion_px: float | None = None,
                   valid=None) -> EvalReport:
    """Full evaluation protocol for one frame: Omega*, scale, metrics.

    ``valid`` optionally restricts evaluation to pixels with ground truth.
    """
    excl = default_exclusion_px(grid) if exclusion_px is None else exclusion_px
    omega = exclusion_mask(grid, epipole(gt.relative), excl)
    if valid is not None:
        omega &= np.asarray(valid, dtype=bool)
    s, corrected = scale_correct(d_est, gt.disparity, omega)
    noc_mask = omega if noc is None else omega & np.asarray(noc, dtype=bool)
    rep = disparity_errors(corrected, gt.disparity, omega, noc_mask,
                           grid.K[0, 0] if pixel_scale is None else pixel_scale, scale=s)
    if E_est is not None:
        rep.rotation_err_deg, rep.translation_err_deg = motion_errors(E_est, gt.relative)
    return rep
