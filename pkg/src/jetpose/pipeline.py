"""Two-frame estimation pipeline: detect, describe, match, RANSAC, refine, evaluate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AllPointsCulledError,
    CheiralityError,
    DegenerateMotionError,
    IllConditionedError,
    InsufficientCorrespondencesError,
    InsufficientSamplesError,
    NoConsensusError,
    ZeroTranslationError,
)
from .features import DenseDescriptorMap, describe_keypoints, detect_fast, match_brute_force
from .geometry import CameraIntrinsics, PoseHypothesis, RansacConfig, estimate_pose_ransac, rotation_from_axis_angle
from .img import GrayImage
from .jet import Correspondence, JetConfig, StepStrategy, run_jet
from .metrics import avg_hamming, rotation_error, translation_error

log = logging.getLogger(__name__)

METHODS = {"djet": "descriptor", "pjet": "photometric", "rpe": "geometric", "init_only": None}

#: failures that mean "this pair could not be estimated" rather than bad input
ESTIMATION_ERRORS = (NoConsensusError, CheiralityError, InsufficientCorrespondencesError,
                     AllPointsCulledError, IllConditionedError, InsufficientSamplesError)


@dataclass(frozen=True)
class RunConfig:
    method: str = "djet"
    window: int = 7
    step: StepStrategy = StepStrategy()
    seed: int = 0
    max_iterations: int = 30
    perturb_rot_deg: float = 0.0
    perturb_trans_deg: float = 0.0
    fast_threshold: float = 20.0
    max_keypoints: int = 500
    max_match_distance: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {sorted(METHODS)}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd side length >= 3")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def jet_config(self) -> JetConfig:
        return JetConfig(residual_kind=METHODS[self.method], window=self.window, step_strategy=self.step,
                         max_outer_iterations=self.max_iterations)


@dataclass
class Initialization:
    correspondences: list[Correspondence]   # RANSAC inliers only
    pose: PoseHypothesis | None             # None when translation is unobservable
    rotation: np.ndarray
    n_matches: int

    @property
    def n_inliers(self) -> int:
        return len(self.correspondences)


@dataclass
class FrameResult:
    frame_index: int
    rotation: np.ndarray | None = None
    translation_dir: np.ndarray | None = None
    rot_err_deg: float | None = None
    trans_err_deg: float | None = None
    avg_hamming: float | None = None
    n_inliers: int | None = None
    n_culled: int | None = None
    iterations: int | None = None
    error: str | None = None
    correspondences: list[Correspondence] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


def perturb_pose(pose: PoseHypothesis, rot_deg: float, trans_deg: float, rng) -> PoseHypothesis:
    """Rotate R by ``rot_deg`` about a random axis and tilt t by ``trans_deg``."""
    axis = rng.normal(size=3)
    R = rotation_from_axis_angle(axis / np.linalg.norm(axis), math.radians(rot_deg)) @ pose.rotation
    t = pose.translation_dir
    perp = np.cross(t, rng.normal(size=3))
    perp /= np.linalg.norm(perp)
    t2 = rotation_from_axis_angle(perp, math.radians(trans_deg)) @ t
    return PoseHypothesis(R, t2)


def match_pair(img_a: GrayImage, img_b: GrayImage, cfg: RunConfig) -> list[Correspondence]:
    kp_a = detect_fast(img_a, cfg.fast_threshold, cfg.max_keypoints)
    kp_b = detect_fast(img_b, cfg.fast_threshold, cfg.max_keypoints)
    if not kp_a or not kp_b:
        return []
    matches = match_brute_force(describe_keypoints(img_a, kp_a), describe_keypoints(img_b, kp_b),
                                cfg.max_match_distance)
    return [Correspondence(kp_a[m.index_a].position, kp_b[m.index_b].position) for m in matches]


def initialize(img_a: GrayImage, img_b: GrayImage, K: CameraIntrinsics, cfg: RunConfig) -> Initialization:
    """Match features and run RANSAC; degenerate motion yields a rotation-only result."""
    corrs = match_pair(img_a, img_b, cfg)
    try:
        pose, mask = estimate_pose_ransac(corrs, K, RansacConfig(seed=cfg.seed))
    except DegenerateMotionError as exc:
        inl = [c for c, m in zip(corrs, exc.inliers) if m]
        return Initialization(inl, None, exc.rotation, len(corrs))
    if cfg.perturb_rot_deg or cfg.perturb_trans_deg:
        rng = np.random.default_rng([cfg.seed, 99])
        pose = perturb_pose(pose, cfg.perturb_rot_deg, cfg.perturb_trans_deg, rng)
    inl = [c for c, m in zip(corrs, mask) if m]
    return Initialization(inl, pose, pose.rotation, len(corrs))


def _errors(res: FrameResult, gt) -> None:
    if gt is None or res.rotation is None:
        return
    R_gt, t_gt = gt
    res.rot_err_deg = rotation_error(R_gt, res.rotation)
    if res.translation_dir is not None:
        try:
            res.trans_err_deg = translation_error(t_gt, res.translation_dir)
        except ZeroTranslationError:
            res.trans_err_deg = None


def refine(img_a: GrayImage, img_b: GrayImage, K: CameraIntrinsics, init: Initialization, cfg: RunConfig,
           frame_index: int = 0, gt=None, dmap_a: DenseDescriptorMap | None = None,
           dmap_b: DenseDescriptorMap | None = None) -> FrameResult:
    """Apply the configured method to an initialization and evaluate it.

    ``gt`` is ``(R, t)`` in the ``X_B = R X_A + t`` convention or ``None``.
    """
    dmap_a = dmap_a or DenseDescriptorMap(img_a)
    dmap_b = dmap_b or DenseDescriptorMap(img_b)
    res = FrameResult(frame_index, n_inliers=init.n_inliers)
    try:
        if init.pose is None or METHODS[cfg.method] is None:
            res.rotation = init.rotation
            res.translation_dir = None if init.pose is None else init.pose.translation_dir
            res.n_culled, res.iterations = 0, 0
            corrs = [replace(c) for c in init.correspondences]
        else:
            out = run_jet(img_a, img_b, init.correspondences, K, init.pose, cfg.jet_config(), dmap_b=dmap_b)
            res.rotation, res.translation_dir = out.pose.rotation, out.pose.translation_dir
            res.n_culled, res.iterations = out.culled_count, out.iterations_used
            corrs = out.correspondences
        res.correspondences = corrs
        res.avg_hamming = avg_hamming(corrs, img_a, img_b, dmap_a, dmap_b)
    except ESTIMATION_ERRORS as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        return res
    _errors(res, gt)
    return res


def estimate_pair(img_a: GrayImage, img_b: GrayImage, K: CameraIntrinsics, cfg: RunConfig,
                  frame_index: int = 0, gt=None) -> FrameResult:
    try:
        init = initialize(img_a, img_b, K, cfg)
    except ESTIMATION_ERRORS as exc:
        return FrameResult(frame_index, error=f"{type(exc).__name__}: {exc}")
    return refine(img_a, img_b, K, init, cfg, frame_index, gt)


def run_sequence(source, cfg: RunConfig, use_gt: bool = True) -> list[FrameResult]:
    """Independent estimates for every adjacent frame pair of a ``SequenceSource``."""
    out = []
    prev = source.frame(0)
    for i in range(source.frame_count - 1):
        cur = source.frame(i + 1)
        gt = source.relative_pose(i) if use_gt and source.gt_poses is not None else None
        res = estimate_pair(prev, cur, source.intrinsics, cfg, i, gt)
        if not res.ok:
            log.warning("frame %d failed: %s", i, res.error)
        out.append(res)
        prev = cur
    return out


def ablate_pairs(pairs, windows, cfg: RunConfig) -> dict[tuple[str, int | None], list[FrameResult]]:
    """Shared initializer per pair, then init_only, rpe and djet for each window.

    ``pairs`` yields ``(img_a, img_b, K, gt)``.
    """
    keys = [("init_only", None), ("rpe", None)] + [("djet", w) for w in windows]
    results = {k: [] for k in keys}
    for i, (img_a, img_b, K, gt) in enumerate(pairs):
        try:
            init = initialize(img_a, img_b, K, cfg)
        except ESTIMATION_ERRORS as exc:
            for k in keys:
                results[k].append(FrameResult(i, error=f"{type(exc).__name__}: {exc}"))
            continue
        dmap_a, dmap_b = DenseDescriptorMap(img_a), DenseDescriptorMap(img_b)
        for method, w in keys:
            run_cfg = replace(cfg, method=method, window=w if w is not None else cfg.window)
            results[(method, w)].append(refine(img_a, img_b, K, init, run_cfg, i, gt, dmap_a, dmap_b))
    return results
