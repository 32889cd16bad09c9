"""Command-line entry point: estimate, run-seq, heatmap, ablate, synth.

Exit codes: 0 ok, 2 input error, 3 estimation failure, 4 more than half of a
sequence's frames failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data
from .errors import DatasetError, ImageFormatError, ImageTooSmallError, JetPoseError
from .features import (
    DenseDescriptorMap,
    describe_keypoints,
    detect_fast,
    hamming_many,
    match_brute_force,
)
from .geometry import CameraIntrinsics
from .img import GrayImage, load_image, save_pgm
from .jet import StepStrategy
from .pipeline import ESTIMATION_ERRORS, METHODS, FrameResult, RunConfig, ablate_pairs, estimate_pair, run_sequence

log = logging.getLogger("jetpose")

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_PARTIAL = 0, 2, 3, 4
FRAME_COLUMNS = ["frame_index", "rot_err_deg", "trans_err_deg", "avg_hamming", "n_inliers", "n_culled", "iterations"]
ABLATE_COLUMNS = ["method", "window", "rot_err_deg", "trans_err_deg", "avg_hamming", "frames", "failed"]
DEFAULT_WINDOWS = (3, 5, 7, 15)


class InputError(Exception):
    """Bad command-line input (maps to exit code 2)."""


def fmt(value) -> str:
    """CSV cell: ``NA`` for missing values, integers verbatim, floats to 6 significant digits."""
    if value is None:
        return "NA"
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if not math.isfinite(value):
        return "NA"
    out = f"{value:.6g}"
    return "0" if out == "-0" else out


def write_csv(rows, path: Path | None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def frame_row(res: FrameResult) -> list[str]:
    return [fmt(res.frame_index), fmt(res.rot_err_deg), fmt(res.trans_err_deg), fmt(res.avg_hamming),
            fmt(res.n_inliers), fmt(res.n_culled), fmt(res.iterations)]


def _mean(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def summary_row(results) -> list[str]:
    ok = [r for r in results if r.ok]
    cols = ["rot_err_deg", "trans_err_deg", "avg_hamming", "n_inliers", "n_culled", "iterations"]
    return ["mean"] + [fmt(_mean([getattr(r, c) for r in ok])) for c in cols]


# --------------------------------------------------------------------------
# configuration


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file {path} not found")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


_CONFIG_KEYS = {"method", "window", "step", "seed", "max_iter", "perturb"}


def run_config(args) -> RunConfig:
    """Merge defaults, the optional key=value file and flags (flags win)."""
    merged = {}
    if getattr(args, "config", None):
        merged = read_config_file(args.config)
        unknown = set(merged) - _CONFIG_KEYS
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in _CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    try:
        kw = {}
        if "method" in merged:
            kw["method"] = str(merged["method"])
        if "window" in merged:
            kw["window"] = int(merged["window"])
        if "step" in merged:
            kw["step"] = StepStrategy.parse(str(merged["step"]))
        if "seed" in merged:
            kw["seed"] = int(merged["seed"])
        if "max_iter" in merged:
            kw["max_iterations"] = int(merged["max_iter"])
        if "perturb" in merged:
            rot, trans = _floats(str(merged["perturb"]), 2)
            kw["perturb_rot_deg"], kw["perturb_trans_deg"] = rot, trans
        return RunConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _floats(text: str, n: int) -> list[float]:
    parts = text.replace(",", " ").split()
    if len(parts) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {text!r}")
    return [float(p) for p in parts]


def load_intrinsics(args, near: Path) -> CameraIntrinsics:
    if args.intrinsics:
        return data.read_intrinsics(args.intrinsics)
    if args.calib:
        return data.read_calib(args.calib)
    default = near / "intrinsics.txt"
    if default.is_file():
        return data.read_intrinsics(default)
    raise InputError("no intrinsics: pass --intrinsics or --calib")


# --------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    cfg = run_config(args)
    img_a, img_b = load_image(args.image_a), load_image(args.image_b)
    K = load_intrinsics(args, Path(args.image_a).parent)
    gt = None
    if args.gt:
        R, t, s = data.read_gt_pose(args.gt)
        gt = (R, t * s)
    res = estimate_pair(img_a, img_b, K, cfg, args.frame_index, gt)
    out = Path(args.out) / "estimate.csv" if args.out else None
    write_csv([FRAME_COLUMNS, frame_row(res)], out)
    if not res.ok:
        log.error("estimation failed: %s", res.error)
        return EXIT_ESTIMATION
    return EXIT_OK


def cmd_run_seq(args) -> int:
    cfg = run_config(args)
    # --gt alone requires <sequence>/poses.txt; --gt PATH reads that file instead
    src = data.load_kitti_sequence(args.sequence, args.gt or None, require_poses=args.gt is not None)
    if src.frame_count < 2:
        raise DatasetError("sequence needs at least two frames")
    results = run_sequence(src, cfg)
    rows = [FRAME_COLUMNS] + [frame_row(r) for r in results] + [summary_row(results)]
    write_csv(rows, Path(args.out) / "run_seq.csv" if args.out else None)
    failed = sum(not r.ok for r in results)
    if failed * 2 > len(results):
        log.error("%d of %d frame pairs failed", failed, len(results))
        return EXIT_PARTIAL
    return EXIT_OK


def select_keypoint(img: GrayImage, rank: int | None, at, threshold: float = 20.0, max_keypoints: int = 500):
    """Resolve a keypoint by response rank or by coordinates (nearest within 2 px)."""
    kps = detect_fast(img, threshold, max_keypoints)
    if at is not None:
        if not kps:
            raise InputError("keypoint-not-found: no keypoints detected")
        pos = np.array([[k.position.u, k.position.v] for k in kps])
        d = np.linalg.norm(pos - np.asarray(at, dtype=float), axis=1)
        i = int(np.argmin(d))
        if d[i] > 2.0:
            raise InputError(f"keypoint-not-found: no keypoint within 2 px of {tuple(at)}")
        return kps, i
    if rank is None:
        rank = 0
    if not 0 <= rank < len(kps):
        raise InputError(f"keypoint-not-found: rank {rank} but {len(kps)} keypoints detected")
    return kps, rank


def similarity_grid(dmap: DenseDescriptorMap, center, radius: int, ref) -> np.ndarray:
    """Hamming distance from ``ref`` to every cell of a (2r+1)^2 window; NaN where undefined."""
    cu, cv = int(round(center[0])), int(round(center[1]))
    dv, du = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    us, vs = (cu + du).ravel(), (cv + dv).ravel()
    out = np.full(us.shape, np.nan)
    ok = dmap.valid(us, vs)
    if np.any(ok):
        out[ok] = hamming_many(ref, dmap.get(us[ok], vs[ok]))
    return out.reshape(du.shape)


def heatmap_pgm(grid: np.ndarray) -> GrayImage:
    """Inverted 8-bit rendering: distance 0 maps to 255, undefined cells to 0."""
    img = np.zeros(grid.shape)
    ok = ~np.isnan(grid)
    img[ok] = 255 - np.rint(grid[ok] * 255.0 / 256.0)
    return GrayImage(img)


def heatmap(img_a: GrayImage, mode: str, rank=None, at=None, img_b: GrayImage | None = None, radius: int = 15):
    """Return ``(grid, center_a, center_field)`` for a self or cross similarity map."""
    kps, i = select_keypoint(img_a, rank, at)
    kp = kps[i]
    dmap_a = DenseDescriptorMap(img_a)
    pa = (int(kp.position.u), int(kp.position.v))
    ref = dmap_a.get(pa[0], pa[1])
    if mode == "self":
        return similarity_grid(dmap_a, pa, radius, ref), pa, pa
    if img_b is None:
        raise InputError("cross mode needs --second")
    kps_b = detect_fast(img_b)
    matches = match_brute_force(describe_keypoints(img_a, kps), describe_keypoints(img_b, kps_b)) if kps_b else []
    hit = [m for m in matches if m.index_a == i]
    if not hit:
        raise NoMatchError(f"no-match-found for keypoint at {pa}")
    kb = kps_b[hit[0].index_b].position
    pb = (int(kb.u), int(kb.v))
    return similarity_grid(DenseDescriptorMap(img_b), pb, radius, ref), pa, pb


class NoMatchError(JetPoseError):
    pass


def cmd_heatmap(args) -> int:
    img = load_image(args.image)
    second = load_image(args.second) if args.second else None
    at = _floats(args.at, 2) if args.at else None
    try:
        grid, pa, pb = heatmap(img, args.mode, args.keypoint, at, second, args.radius)
    except NoMatchError as exc:
        log.error("%s", exc)
        return EXIT_ESTIMATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv([[fmt(v) for v in row] for row in grid], out / "heatmap.csv")
    save_pgm(heatmap_pgm(grid), out / "heatmap.pgm")
    r = args.radius
    iv, iu = np.unravel_index(np.nanargmin(grid), grid.shape)
    sys.stdout.write(f"keypoint {pa[0]} {pa[1]} center {pb[0]} {pb[1]} "
                     f"min {fmt(np.nanmin(grid))} at {pb[0] + iu - r} {pb[1] + iv - r}\n")
    return EXIT_OK


def _synthetic_pairs(n: int, seed: int):
    for i in range(n):
        scene = data.build_scene(data.standard_scene_spec(seed + i))
        img_a, img_b, _ = data.synth_render(scene)
        yield img_a, img_b, scene.K, (scene.rotation, scene.translation)


def _sequence_pairs(src: data.SequenceSource):
    prev = src.frame(0)
    for i in range(src.frame_count - 1):
        cur = src.frame(i + 1)
        gt = src.relative_pose(i) if src.gt_poses is not None else None
        yield prev, cur, src.intrinsics, gt
        prev = cur


def ablation_rows(results) -> list[list[str]]:
    rows = [ABLATE_COLUMNS]
    for (method, w), res in results.items():
        ok = [r for r in res if r.ok]
        rows.append([method, fmt(w), fmt(_mean([r.rot_err_deg for r in ok])),
                     fmt(_mean([r.trans_err_deg for r in ok])), fmt(_mean([r.avg_hamming for r in ok])),
                     fmt(len(res)), fmt(len(res) - len(ok))])
    return rows


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    try:
        windows = [int(w) for w in args.windows.split(",") if w.strip()]
        for w in windows:
            replace(cfg, window=w)
    except ValueError as exc:
        raise InputError(f"bad --windows: {exc}") from None
    if args.sequence:
        src = data.load_kitti_sequence(args.sequence, args.gt or None, require_poses=args.gt is not None)
        if src.frame_count < 2:
            raise DatasetError("sequence needs at least two frames")
        pairs = _sequence_pairs(src)
    else:
        if args.scenes < 1:
            raise InputError("--scenes must be >= 1")
        pairs = _synthetic_pairs(args.scenes, cfg.seed)
    results = ablate_pairs(pairs, windows, cfg)
    write_csv(ablation_rows(results), Path(args.out) / "ablate.csv" if args.out else None)
    n = len(next(iter(results.values())))
    failed = sum(not r.ok for r in results[("init_only", None)])
    return EXIT_PARTIAL if failed * 2 > n else EXIT_OK


def cmd_synth(args) -> int:
    path = Path(args.spec)
    if not path.is_file():
        raise InputError(f"scene spec {path} not found")
    try:
        spec = data.parse_scene_spec(path.read_text())
        if args.frames is not None:
            spec = replace(spec, frames=args.frames)
        scene = data.build_scene(spec)
    except ValueError as exc:
        raise InputError(f"invalid-spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img_a, img_b, H = data.synth_render(scene)
    save_pgm(img_a, out / "A.pgm")
    save_pgm(img_b, out / "B.pgm")
    data.write_gt_pose(out / "gt_pose.txt", scene.rotation, scene.t_dir, scene.t_scale)
    data.write_matrix(out / "H.txt", H)
    data.write_intrinsics(out / "intrinsics.txt", scene.K)
    if spec.frames > 2:
        data.write_kitti_sequence(scene, out / "sequence", spec.frames)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, gt_help: str, gt_optional_value: bool = False):
    p.add_argument("--method", choices=sorted(METHODS), default=None, help="refinement method (default djet)")
    p.add_argument("--window", type=int, default=None, help="sampling window side length (default 7)")
    p.add_argument("--step", default=None, help="keypoint step strategy: cap1 or frac:<alpha> (default cap1)")
    p.add_argument("--seed", type=int, default=None, help="RANSAC / perturbation seed (default 0)")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None, help="outer iterations (default 30)")
    p.add_argument("--perturb", default=None, metavar="ROT,TRANS",
                   help="perturb the initial pose by ROT degrees rotation and TRANS degrees translation direction")
    p.add_argument("--config", default=None, help="key=value file with defaults for the flags above")
    p.add_argument("--out", default=None, help="output directory (CSV goes to stdout when omitted)")
    if gt_optional_value:
        p.add_argument("--gt", nargs="?", const="", default=None, metavar="POSES", help=gt_help)
    else:
        p.add_argument("--gt", default=None, help=gt_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jetpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="relative pose of one image pair")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--intrinsics", help="file with 'fx fy cx cy'")
    p.add_argument("--calib", help="KITTI calib.txt (P0 row)")
    p.add_argument("--frame-index", type=int, default=0)
    _add_common(p, "ground-truth pose file (R row-major, t, scale)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("run-seq", help="adjacent-pair estimates over a KITTI-layout sequence")
    p.add_argument("sequence")
    _add_common(p, "require ground truth (optionally give the poses file path)", gt_optional_value=True)
    p.set_defaults(func=cmd_run_seq)

    p = sub.add_parser("heatmap", help="descriptor similarity heatmap around a keypoint")
    p.add_argument("image")
    p.add_argument("--mode", choices=("self", "cross"), default="self")
    p.add_argument("--second", help="second image (cross mode)")
    p.add_argument("--keypoint", type=int, default=None, help="keypoint rank by response (default 0)")
    p.add_argument("--at", default=None, metavar="U,V", help="select the detected keypoint nearest to U,V")
    p.add_argument("--radius", type=int, default=15, help="half width of the heatmap window")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablate", help="window-size ablation with rpe and init_only baselines")
    p.add_argument("--sequence", help="KITTI-layout sequence directory (default: synthetic scenes)")
    p.add_argument("--scenes", type=int, default=20, help="number of synthetic scenes")
    p.add_argument("--windows", default=",".join(map(str, DEFAULT_WINDOWS)))
    _add_common(p, "require sequence ground truth (optionally give the poses file path)", gt_optional_value=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="render a synthetic image pair with exact ground truth")
    p.add_argument("spec", help="key=value scene description")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=None, help="also write a KITTI-layout sequence of N frames")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DatasetError, ImageFormatError, ImageTooSmallError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except ESTIMATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
