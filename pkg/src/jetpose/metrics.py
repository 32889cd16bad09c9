"""Frame-to-frame evaluation: rotation angle, translation direction angle, Hamming residual."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamplesError, ZeroTranslationError
from .features import DenseDescriptorMap, hamming_rows
from .geometry import rotation_angle
from .img import GrayImage


@dataclass(frozen=True)
class FrameEval:
    frame_index: int
    rotation_error_deg: float
    translation_error_deg: float | None   # None when undefined (no ground-truth translation)
    avg_hamming: float


@dataclass(frozen=True)
class Summary:
    frames: int
    rotation_error_deg: float
    translation_error_deg: float | None
    avg_hamming: float
    translation_skipped: int


def rotation_error(R_gt, R_est) -> float:
    """Angle of the residual rotation ``R_gt^T R_est`` in degrees."""
    return math.degrees(rotation_angle(np.asarray(R_gt, dtype=float).T @ np.asarray(R_est, dtype=float)))


def translation_error(t_gt, t_est) -> float:
    """Angle between translation directions in degrees."""
    a = np.asarray(t_gt, dtype=float)
    b = np.asarray(t_est, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-9 or nb <= 1e-9:
        raise ZeroTranslationError("translation error undefined for a zero translation")
    # atan2 of the cross and dot products keeps full precision near 0 and 180 degrees
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b)))


def avg_hamming(corrs, img_a: GrayImage, img_b: GrayImage, dmap_a: DenseDescriptorMap | None = None,
                dmap_b: DenseDescriptorMap | None = None) -> float:
    """Mean distance between d(x) and d(round(y + v_opt)) over active correspondences.

    Active points whose rounded positions fall inside the descriptor border
    margin are skipped.
    """
    act = [c for c in corrs if getattr(c, "active", True)]
    if not act:
        raise InsufficientSamplesError("no active correspondences")
    dmap_a = dmap_a or DenseDescriptorMap(img_a)
    dmap_b = dmap_b or DenseDescriptorMap(img_b)
    xa = np.rint(np.array([c.x for c in act], dtype=float)).astype(np.int64)
    yb = np.rint(np.array([np.asarray(c.y) + np.asarray(getattr(c, "v_opt", (0.0, 0.0))) for c in act],
                          dtype=float)).astype(np.int64)
    ok = dmap_a.valid(xa[:, 0], xa[:, 1]) & dmap_b.valid(yb[:, 0], yb[:, 1])
    if not np.any(ok):
        raise InsufficientSamplesError("no active correspondence has computable descriptors")
    d = hamming_rows(dmap_a.get(xa[ok, 0], xa[ok, 1]), dmap_b.get(yb[ok, 0], yb[ok, 1]))
    return float(d.mean())


def aggregate(evals) -> Summary:
    evals = list(evals)
    if not evals:
        raise InsufficientSamplesError("nothing to aggregate")
    trans = [e.translation_error_deg for e in evals if e.translation_error_deg is not None]
    return Summary(
        frames=len(evals),
        rotation_error_deg=float(np.mean([e.rotation_error_deg for e in evals])),
        translation_error_deg=float(np.mean(trans)) if trans else None,
        avg_hamming=float(np.mean([e.avg_hamming for e in evals])),
        translation_skipped=len(evals) - len(trans),
    )
