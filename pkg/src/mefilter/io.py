"""File formats: Middlebury ``.flo``, PFM, KITTI 16-bit PNGs, JSON poses.

Flow and disparity arrays on disk are in pixel units with image layout
``(height, width[, 2])``; conversion to the normalized per-pixel vectors used
by the filter goes through :func:`flow_to_field` and :func:`field_to_flow`.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import cv2
import numpy as np

from .lie import SE3
from .observation import FlowField, PixelGrid

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e9
KITTI_DISP_SCALE = 256.0
KITTI_FLOW_SCALE = 64.0
KITTI_FLOW_OFFSET = 2.0**15


class FormatError(ValueError):
    """A file exists but its contents do not match the expected format."""


def _context(path, exc: Exception) -> FormatError:
    return FormatError(f"{path}: {exc}")


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------


def write_flo(path, flow) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must have shape (height, width, 2)")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a ``.flo`` file into a float32 ``(height, width, 2)`` array."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo size {w}x{h}")
    if len(data) != 12 + 8 * w * h:
        raise FormatError(f"{path}: expected {12 + 8 * w * h} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def flo_valid(flow) -> np.ndarray:
    """Middlebury convention: components above 1e9 in magnitude are unknown."""
    flow = np.asarray(flow)
    return np.all(np.isfinite(flow) & (np.abs(flow) < FLO_UNKNOWN), axis=-1)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, image, scale: float = 1.0) -> None:
    """Write a float image; little-endian (negative scale), bottom row first."""
    image = np.asarray(image)
    if image.ndim == 2:
        header = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError("PFM images must be (h, w) or (h, w, 3)")
    if not scale > 0:
        raise ValueError("scale must be positive")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n{-scale!r}\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(image), dtype="<f4").tobytes())


_PFM_HEADER = re.compile(rb"^(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    channels = 1 if m.group(1) == b"Pf" else 3
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise _context(path, exc) from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - m.end() != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} bytes of pixel data")
    img = np.frombuffer(data, dtype=dtype, offset=m.end()).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(img.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG
# ---------------------------------------------------------------------------


def _write_png16(path, img) -> None:
    if not cv2.imwrite(str(path), img):
        raise OSError(f"{path}: could not write PNG")


def _read_png16(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: unreadable PNG")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: expected a 16-bit PNG, found {img.dtype}")
    return img


def write_disparity_png(path, disparity_px, valid=None) -> None:
    """Store ``disparity * 256`` as uint16; 0 marks invalid pixels.

    Valid pixels are clipped to [1/256, 65535/256] so they stay distinguishable
    from the invalid marker.
    """
    disp = np.asarray(disparity_px, dtype=float)
    ok = np.isfinite(disp) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(disp)
    stored = np.clip(np.round(np.where(ok, disp, 0.0) * KITTI_DISP_SCALE), 1, 65535)
    _write_png16(path, np.where(ok, stored, 0).astype(np.uint16))


def read_disparity_png(path) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_png16(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: disparity PNG must be single-channel")
    return raw.astype(float) / KITTI_DISP_SCALE, raw > 0


def write_kitti_flow(path, flow_px, valid=None) -> None:
    flow = np.asarray(flow_px, dtype=float)
    ok = np.all(np.isfinite(flow), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    enc = np.clip(np.round(np.where(ok[..., None], flow, 0.0) * KITTI_FLOW_SCALE + KITTI_FLOW_OFFSET), 0, 65535)
    # OpenCV stores channels as BGR; KITTI's (u, v, valid) is RGB.
    bgr = np.stack([ok.astype(float), enc[..., 1], enc[..., 0]], axis=-1).astype(np.uint16)
    _write_png16(path, bgr)


def read_kitti_flow(path) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_png16(path)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: flow PNG must have three channels")
    rgb = raw[..., ::-1].astype(float)
    flow = (rgb[..., :2] - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE
    return flow, rgb[..., 2] > 0


def read_kitti_calibration(path, camera: str = "P2") -> np.ndarray:
    """Intrinsics K from a KITTI ``calib`` text file (3x4 projection row)."""
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(":")
        if key.strip() == camera:
            vals = np.array(rest.split(), dtype=float)
            if vals.size != 12:
                raise FormatError(f"{path}: {camera} must have 12 entries")
            return vals.reshape(3, 4)[:, :3]
    raise FormatError(f"{path}: no {camera} entry")


# ---------------------------------------------------------------------------
# Conversions between image arrays and filter fields
# ---------------------------------------------------------------------------


def field_to_flow(flow: FlowField, grid: PixelGrid) -> np.ndarray:
    """Normalized flow field to an ``(h, w, 2)`` float32 pixel image.

    Invalid pixels are written with the Middlebury unknown marker.
    """
    px = grid.vector_to_pixels(flow.vectors)
    px[~flow.valid] = 1e10
    return px.reshape(grid.height, grid.width, 2).astype(np.float32)


def flow_to_field(flow_px, grid: PixelGrid, valid=None) -> FlowField:
    flow_px = np.asarray(flow_px, dtype=float)
    if flow_px.shape != (grid.height, grid.width, 2):
        raise FormatError(f"flow shape {flow_px.shape[:2]} does not match grid {grid.shape}")
    ok = flo_valid(flow_px) if valid is None else np.asarray(valid, dtype=bool) & flo_valid(flow_px)
    vec = grid.vector_to_normalized(np.where(ok[..., None], flow_px, 0.0).reshape(-1, 2))
    return FlowField(vec, ok.reshape(-1))


def disparity_to_image(d, grid: PixelGrid, pixel_scale: float | None = None) -> np.ndarray:
    """Inverse depth per pixel to an ``(h, w)`` disparity image in pixels."""
    scale = grid.K[0, 0] if pixel_scale is None else pixel_scale
    return (np.asarray(d, dtype=float) * scale).reshape(grid.height, grid.width)


def image_to_disparity(img, grid: PixelGrid, pixel_scale: float | None = None) -> np.ndarray:
    scale = grid.K[0, 0] if pixel_scale is None else pixel_scale
    img = np.asarray(img, dtype=float)
    if img.shape != grid.shape:
        raise FormatError(f"disparity shape {img.shape} does not match grid {grid.shape}")
    return img.reshape(-1) / scale


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise _context(path, exc) from exc


def poses_to_json(relative: list[SE3], absolute: list[SE3] | None = None) -> list[dict]:
    """Per-frame records with the camera k -> k+1 motion and the world -> camera k pose."""
    if absolute is None:
        absolute = [SE3.identity()]
        for rel in relative[:-1]:
            absolute.append(rel @ absolute[-1])
    return [
        {"frame": k, "relative": r.matrix().tolist(), "pose": a.matrix().tolist()}
        for k, (r, a) in enumerate(zip(relative, absolute))
    ]


def poses_from_json(data, key: str = "relative") -> list[SE3]:
    try:
        items = sorted(data, key=lambda e: e["frame"])
        return [SE3.from_matrix(np.asarray(e[key], dtype=float)) for e in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed pose list: {exc}") from exc


class JsonlWriter:
    """Append-only JSON lines file, one record per call."""

    def __init__(self, path):
        self._f = open(path, "w")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
