"""Command-line pipeline: simulate, filter, eval, gradcheck, selftest.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .checks import run_all
from .config import ConfigError, RunConfig, load_config
from .filter import FilterError, Frame, MinimumEnergyFilter
from .harness import (
    EvalReport,
    GroundTruthFrame,
    add_noise,
    evaluate_frame,
    fb_consistency_mask,
    generate_sequence,
    inject_outliers,
)
from .observation import PixelGrid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mefilter")


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--frames", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--nu", type=float)
    common.add_argument("--substeps", type=int)
    common.add_argument("--quadratic", action="store_true", help="use the quadratic energy (beta = 1 path)")
    common.add_argument("--no-propagate-gain", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mefilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write a synthetic flow sequence with ground truth")
    p = sub.add_parser("filter", parents=[common], help="run the filter on a flow sequence")
    p.add_argument("input", type=Path, help="directory with flow files")
    p = sub.add_parser("eval", parents=[common], help="score estimated disparities against ground truth")
    p.add_argument("estimate", type=Path)
    p.add_argument("truth", type=Path)
    sub.add_parser("gradcheck", parents=[common], help="derivative and geometry self-checks")
    sub.add_parser("selftest", parents=[common], help="gradcheck plus a short end-to-end run")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.frames is not None:
        top["frames"] = args.frames
    fc = cfg.filter
    ch = fc.charbonnier
    if args.beta is not None or args.nu is not None:
        ch = replace(ch, beta=ch.beta if args.beta is None else args.beta, nu=ch.nu if args.nu is None else args.nu)
    fkw = {"charbonnier": ch}
    if args.substeps is not None:
        fkw["substeps"] = args.substeps
        fkw["max_substeps"] = max(fc.max_substeps, args.substeps)
    if args.quadratic:
        fkw["quadratic"] = True
    if args.no_propagate_gain:
        fkw["propagate_gain"] = False
    try:
        return replace(cfg, filter=replace(fc, **fkw), **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pixel_scale(cfg: RunConfig, grid: PixelGrid) -> float:
    return cfg.eval.pixel_scale if cfg.eval.pixel_scale is not None else float(grid.K[0, 0])


def _frame_name(stem: str, k: int, ext: str) -> str:
    return f"{stem}_{k:04d}.{ext}"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    scene = cfg.scene.scene(cfg.seed)
    grid = scene.grid
    frames = generate_sequence(scene, cfg.frames, backward=True)
    px = grid.pixel_size
    median = float(np.median(np.linalg.norm(np.stack([f.flow.vectors for f in frames]), axis=-1)))
    c = cfg.corruption
    scale = _pixel_scale(cfg, grid)
    (out / "backward").mkdir(exist_ok=True)
    for k, fr in enumerate(frames):
        flow = fr.flow
        if c.noise_sigma_px > 0:
            flow = add_noise(flow, c.noise_sigma_px * px, cfg.seed * 1_000_003 + 2 * k)
        if c.outlier_fraction > 0:
            flow, _ = inject_outliers(flow, c.outlier_fraction, c.outlier_magnitude * median, cfg.seed * 1_000_003 + 2 * k + 1)
        io.write_flo(out / _frame_name("flow", k, "flo"), io.field_to_flow(flow, grid))
        io.write_flo(out / "backward" / _frame_name("flow", k, "flo"), io.field_to_flow(fr.backward, grid))
        io.write_pfm(out / _frame_name("disp", k, "pfm"), io.disparity_to_image(fr.disparity, grid, scale))
    io.write_json(out / "poses.json", io.poses_to_json([f.relative for f in frames], [f.pose for f in frames]))
    io.write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


def _load_flows(cfg: RunConfig, src: Path):
    """Returns grid, forward flows and (possibly None) backward flows in pixels."""
    if not src.is_dir():
        raise DataError(f"{src}: not a directory")
    if cfg.input.format == "kitti":
        files = sorted(src.glob("*.png"))
        if not files:
            raise DataError(f"{src}: no flow PNGs")
        if cfg.input.calibration is None:
            raise DataError("input.calibration is required for KITTI input")
        K = io.read_kitti_calibration(cfg.input.calibration)
        flows = [io.read_kitti_flow(f) for f in files[: cfg.frames]]
        h, w = flows[0][0].shape[:2]
        grid = PixelGrid(w, h, K)
        back_dir = src / "backward"
        back = None
        if cfg.input.use_backward and back_dir.is_dir():
            back = [io.read_kitti_flow(back_dir / f.name) for f in files[: cfg.frames]]
        return grid, flows, back
    files = sorted(src.glob("flow_*.flo"))
    if not files:
        raise DataError(f"{src}: no flow_*.flo files")
    grid = cfg.scene.grid()
    flows = []
    for f in files[: cfg.frames]:
        arr = io.read_flo(f)
        if arr.shape[:2] != grid.shape:
            raise DataError(f"{f}: size {arr.shape[1]}x{arr.shape[0]} does not match {grid.width}x{grid.height}")
        flows.append((arr, io.flo_valid(arr)))
    back = None
    back_dir = src / "backward"
    if cfg.input.use_backward and back_dir.is_dir():
        back = []
        for f in files[: cfg.frames]:
            path = back_dir / f.name
            if not path.exists():
                raise DataError(f"{path}: missing backward flow")
            arr = io.read_flo(path)
            back.append((arr, io.flo_valid(arr)))
    return grid, flows, back


def _consistency(cfg: RunConfig, grid: PixelGrid, fwd, bwd):
    if bwd is None:
        return None
    f = io.flow_to_field(fwd[0], grid, fwd[1])
    b = io.flow_to_field(bwd[0], grid, bwd[1])
    return fb_consistency_mask(f, b, grid, cfg.input.consistency_tau_px * grid.pixel_size)


def cmd_filter(cfg: RunConfig, src: Path, out: Path) -> int:
    grid, flows, back = _load_flows(cfg, src)
    scale = _pixel_scale(cfg, grid)
    filt = MinimumEnergyFilter(grid, cfg.filter)
    poses = []
    with io.JsonlWriter(out / "diagnostics.jsonl") as diag_out:
        for k, fwd in enumerate(flows):
            consistent = _consistency(cfg, grid, fwd, back[k] if back else None)
            frame = Frame(io.flow_to_field(fwd[0], grid, fwd[1]), consistent=consistent)
            try:
                diag = filt.step(frame)
            except FilterError as exc:
                raise NumericalError(f"frame {k}: {exc}") from exc
            img = io.disparity_to_image(diag["disparity"], grid, scale)
            io.write_pfm(out / _frame_name("disp", k, "pfm"), img)
            io.write_disparity_png(out / _frame_name("disp", k, "png"), img)
            poses.append(diag["pose"])
            diag_out.write({key: val for key, val in diag.items() if key not in ("disparity", "pose", "velocity")})
            log.info("frame %d: energy %.4g, %d substeps", k, diag["energy"], diag["substeps"])
    io.write_json(out / "poses.json", io.poses_to_json(poses))
    io.write_json(out / "config.json", cfg.to_dict())
    print(f"filtered {len(flows)} frames into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _disparity_files(folder: Path) -> dict[int, Path]:
    found = {}
    for ext in ("png", "pfm"):  # PFM wins when both exist
        for f in folder.glob(f"disp_*.{ext}"):
            try:
                found[int(f.stem.split("_")[1])] = f
            except (IndexError, ValueError):
                continue
    return found


def _read_disparity(path: Path):
    if path.suffix == ".pfm":
        img = io.read_pfm(path).astype(float)
        return img, np.isfinite(img)
    return io.read_disparity_png(path)


def _mean_report(reports: list[EvalReport]) -> dict:
    keys = reports[0].to_dict().keys()
    out = {}
    for key in keys:
        vals = np.array([r.to_dict()[key] for r in reports], dtype=float)
        out[key] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
    return out


def cmd_eval(cfg: RunConfig, est: Path, gt: Path, out: Path) -> int:
    for folder in (est, gt):
        if not folder.is_dir():
            raise DataError(f"{folder}: not a directory")
    est_files, gt_files = _disparity_files(est), _disparity_files(gt)
    if not gt_files:
        raise DataError(f"{gt}: no ground-truth disparity files")
    missing = sorted(set(gt_files) - set(est_files))
    if missing:
        raise DataError("missing estimated frames: " + ", ".join(str(k) for k in missing))
    gt_poses_path = gt / "poses.json"
    if not gt_poses_path.exists():
        raise DataError(f"{gt_poses_path}: missing")
    rel_gt = io.poses_from_json(io.read_json(gt_poses_path))
    abs_gt = io.poses_from_json(io.read_json(gt_poses_path), "pose")
    rel_est = io.poses_from_json(io.read_json(est / "poses.json")) if (est / "poses.json").exists() else None
    grid = cfg.scene.grid()
    scale = _pixel_scale(cfg, grid)
    frames = sorted(gt_files)
    if frames[-1] >= len(rel_gt):
        raise DataError(f"{gt_poses_path}: no pose for frame {frames[-1]}")
    reports, rows = [], []
    fig_dir = out / "figures"
    if cfg.output.figures:
        from .plotting import save_disparity_figure, save_error_curve

        fig_dir.mkdir(exist_ok=True)
    for k in frames:
        d_img, d_ok = _read_disparity(est_files[k])
        g_img, g_ok = _read_disparity(gt_files[k])
        if d_img.shape != grid.shape or g_img.shape != grid.shape:
            raise DataError(f"frame {k}: disparity size does not match the {grid.width}x{grid.height} grid")
        d_est = io.image_to_disparity(np.where(d_ok, d_img, np.nan), grid, scale)
        d_gt = io.image_to_disparity(np.where(g_ok, g_img, np.nan), grid, scale)
        noc = None
        if cfg.eval.use_fb_mask and (gt / "backward").is_dir() and (gt / _frame_name("flow", k, "flo")).exists():
            fwd = io.read_flo(gt / _frame_name("flow", k, "flo"))
            bwd = io.read_flo(gt / "backward" / _frame_name("flow", k, "flo"))
            noc = _consistency(cfg, grid, (fwd, io.flo_valid(fwd)), (bwd, io.flo_valid(bwd)))
        occ_ok = np.isfinite(d_gt) & np.isfinite(d_est)
        noc = occ_ok if noc is None else noc & occ_ok
        truth = GroundTruthFrame(None, np.where(occ_ok, d_gt, 1.0), abs_gt[k], rel_gt[k])
        rep = evaluate_frame(
            np.where(occ_ok, d_est, 1.0), truth, grid, rel_est[k] if rel_est else None,
            noc=noc, pixel_scale=scale, exclusion_px=cfg.eval.exclusion_px, valid=occ_ok,
        )
        reports.append(rep)
        rows.append({"frame": k, **rep.to_dict()})
        if cfg.output.figures:
            corrected = (d_est * rep.scale * scale).reshape(grid.shape)
            save_disparity_figure(fig_dir / _frame_name("disp", k, "png"), corrected, (d_gt * scale).reshape(grid.shape),
                                  cmap=cfg.output.colormap, dpi=cfg.output.dpi, title=f"frame {k}")
    mean = _mean_report(reports)
    io.write_json(out / "report.json", {"frames": rows, "mean": mean, "pixel_scale": scale})
    fields = ["frame"] + list(reports[0].to_dict().keys())
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({"frame": "mean", **mean})
    if cfg.output.figures:
        save_error_curve(fig_dir / "median_rel_error.png", [r.median_rel_depth_err for r in reports],
                         "median relative error (%)", dpi=cfg.output.dpi)
    print(
        f"p3px occ {mean['p3px_occ']:.2f}%  p5px occ {mean['p5px_occ']:.2f}%  "
        f"p3px noc {mean['p3px_noc']:.2f}%  p5px noc {mean['p5px_noc']:.2f}%  "
        f"median rel {mean['median_rel_depth_err']:.3f}%"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / selftest
# ---------------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, out: Path | None) -> int:
    results = run_all(cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: error {r.error:.3e} (tolerance {r.tolerance:.0e})")
    if out is not None:
        io.write_json(out / "gradcheck.json", [r.to_dict() for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


SELFTEST_MAX_ERROR = 2.0


def cmd_selftest(cfg: RunConfig, out: Path | None) -> int:
    status = cmd_gradcheck(cfg, out)
    with tempfile.TemporaryDirectory() as tmp:
        root = out or Path(tmp)
        small = replace(cfg, frames=min(cfg.frames, 10), output=replace(cfg.output, figures=False))
        for name in ("sim", "est", "eval"):
            (root / name).mkdir(parents=True, exist_ok=True)
        cmd_simulate(small, root / "sim")
        cmd_filter(small, root / "sim", root / "est")
        cmd_eval(small, root / "est", root / "sim", root / "eval")
        last = io.read_json(root / "eval" / "report.json")["frames"][-1]["median_rel_depth_err"]
    ok = last < SELFTEST_MAX_ERROR
    print(f"{'PASS' if ok else 'FAIL'}  end-to-end: final median relative error {last:.3f}% (limit {SELFTEST_MAX_ERROR}%)")
    return status if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, _out_dir(args, "sim"))
        if args.command == "filter":
            return cmd_filter(cfg, args.input, _out_dir(args, "est"))
        if args.command == "eval":
            return cmd_eval(cfg, args.estimate, args.truth, _out_dir(args, "eval"))
        out = _out_dir(args, ".") if args.out else None
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        return cmd_selftest(cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
