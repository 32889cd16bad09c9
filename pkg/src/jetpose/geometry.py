"""Camera model, relative pose, epipolar algebra and the RANSAC initializer.

Pose convention: a point in camera A coordinates maps to camera B as
``X_B = R @ X_A + t``; the translation is stored as a unit direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityError,
    DegenerateLineError,
    DegenerateMotionError,
    InsufficientCorrespondencesError,
    NoConsensusError,
    SingularSystemError,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def normalize(self, pts) -> np.ndarray:
        """Pixel coordinates (n, 2) to calibrated image-plane coordinates."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return np.stack([(pts[:, 0] - self.cx) / self.fx, (pts[:, 1] - self.cy) / self.fy], axis=1)

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, 3)
        return np.stack([self.fx * X[:, 0] / X[:, 2] + self.cx, self.fy * X[:, 1] / X[:, 2] + self.cy], axis=1)


@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    rotation: np.ndarray
    translation_dir: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation_dir, dtype=float).reshape(3)
        n = np.linalg.norm(t)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("translation direction must be non-zero")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t = t / n
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation_dir", t)

    @classmethod
    def identity(cls, t=(0.0, 0.0, 1.0)) -> "PoseHypothesis":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def essential(self) -> np.ndarray:
        return skew(self.translation_dir) @ self.rotation


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(3, 3)
        n = np.linalg.norm(m)
        if n == 0 or not np.isfinite(n):
            raise ValueError("fundamental matrix must be finite and non-zero")
        m = m / n
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def reduced(self) -> np.ndarray:
        """Top two rows (the operator mapping (x;1) to the line normal)."""
        return self.m[:2]


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(M) -> np.ndarray:
    return np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


# --------------------------------------------------------------------------
# rotations


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(a)
    if abs(n - 1.0) > 1e-6:
        raise ValueError("axis must be a unit vector")
    a = a / n
    A = skew(a)
    return np.eye(3) + math.sin(angle) * A + (1.0 - math.cos(angle)) * (A @ A)


def exp_so3(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return rotation_from_axis_angle(w / theta, theta)


def rotation_angle(R) -> float:
    """Rotation magnitude in [0, pi]; atan2 form stays accurate near 0 and pi."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(_vee(R))
    c = min(max(0.5 * (np.trace(R) - 1.0), -1.0), 1.0)
    return float(math.atan2(s, c))


def axis_angle_from_rotation(R) -> tuple[np.ndarray, float]:
    """Log map: ``(unit axis, angle in [0, pi])``; axis (1, 0, 0) for the identity."""
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    v = 0.5 * _vee(R)
    if theta < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    if math.cos(theta) >= 0.0:
        return v / np.linalg.norm(v), theta
    # near pi the antisymmetric part vanishes; read the axis off a a^T instead
    S = 0.5 * (R + R.T)
    aat = (S - math.cos(theta) * np.eye(3)) / (1.0 - math.cos(theta))
    k = int(np.argmax(np.diag(aat)))
    a = aat[:, k] / math.sqrt(max(aat[k, k], 1e-300))
    a /= np.linalg.norm(a)
    if np.dot(a, v) < 0:
        a = -a
    return a, theta


def log_so3(R) -> np.ndarray:
    axis, angle = axis_angle_from_rotation(R)
    return axis * angle


def tangent_basis(t) -> np.ndarray:
    """Two orthonormal vectors spanning the plane perpendicular to ``t`` (3x2)."""
    t = np.asarray(t, dtype=float) / np.linalg.norm(t)
    helper = np.eye(3)[int(np.argmin(np.abs(t)))]
    e1 = np.cross(t, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    return np.stack([e1, e2], axis=1)


def retract(pose: PoseHypothesis, delta) -> PoseHypothesis:
    """Apply a 5-vector increment: left axis-angle on R, tangent step on unit t."""
    delta = np.asarray(delta, dtype=float)
    R = exp_so3(delta[:3]) @ pose.rotation
    t = pose.translation_dir + tangent_basis(pose.translation_dir) @ delta[3:5]
    # re-orthonormalise to keep the invariant tight after many updates
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return PoseHypothesis(R, t / np.linalg.norm(t))


# --------------------------------------------------------------------------
# epipolar algebra


def fundamental_from_pose(K: CameraIntrinsics, pose: PoseHypothesis) -> FundamentalMatrix:
    Ki = K.K_inv
    return FundamentalMatrix(Ki.T @ skew(pose.translation_dir) @ pose.rotation @ Ki)


def _as_matrix(F) -> np.ndarray:
    return F.m if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)


def epipolar_lines(F, xs) -> np.ndarray:
    """Lines ``F @ (x; 1)`` for many points, shape (n, 3), unnormalised."""
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    xh = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
    return xh @ _as_matrix(F).T


def epipolar_line(F, x) -> np.ndarray:
    """Line in image B on which the correspondent of ``x`` must lie."""
    line = epipolar_lines(F, [x])[0]
    if math.hypot(line[0], line[1]) < 1e-12:
        raise DegenerateLineError(f"point {tuple(x)} coincides with the epipole")
    return line


def point_on_line(line, s: float) -> np.ndarray:
    """Foot of the perpendicular from the origin plus ``s`` along the line direction."""
    a, b, c = line
    n2 = a * a + b * b
    foot = np.array([-a * c / n2, -b * c / n2])
    direction = np.array([-b, a]) / math.sqrt(n2)
    return foot + s * direction


def epipolar_residuals(F, xs, ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    lines = epipolar_lines(F, xs)
    return ys[:, 0] * lines[:, 0] + ys[:, 1] * lines[:, 1] + lines[:, 2]


def point_line_distances(F, xs, ys) -> np.ndarray:
    """Signed perpendicular distance (pixels) of each y from the epipolar line of x."""
    lines = epipolar_lines(F, xs)
    return epipolar_residuals(F, xs, ys) / np.hypot(lines[:, 0], lines[:, 1])


def sampson_distances(F, xs, ys) -> np.ndarray:
    M = _as_matrix(F)
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    xh = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
    yh = np.concatenate([ys, np.ones((len(ys), 1))], axis=1)
    Fx = xh @ M.T
    Fty = yh @ M
    num = np.einsum("ij,ij->i", yh, Fx) ** 2
    den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Fty[:, 0] ** 2 + Fty[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den < 1e-18, np.inf, num / den)


def sampson_distance(F, x, y) -> float:
    """First-order geometric error (pixels squared)."""
    M = _as_matrix(F)
    xh = np.array([x[0], x[1], 1.0])
    yh = np.array([y[0], y[1], 1.0])
    Fx = M @ xh
    Fty = M.T @ yh
    den = Fx[0] ** 2 + Fx[1] ** 2 + Fty[0] ** 2 + Fty[1] ** 2
    if den < 1e-18:
        raise SingularSystemError("Sampson denominator vanishes")
    return float((yh @ Fx) ** 2 / den)


# --------------------------------------------------------------------------
# essential matrix estimation


def _hartley(pts):
    c = pts.mean(axis=-2, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return (pts - c) * s[..., None, None], T


def _project_essential(E):
    U, _, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[..., :, None] * Vt)


def eight_point(x1n, x2n, weights=None) -> np.ndarray:
    """Essential matrix from >= 8 calibrated correspondences; supports a leading batch axis.

    Returns E with singular values (1, 1, 0) so that ``x2^T E x1 = 0``.
    Optional per-point ``weights`` scale the rows of the linear system.
    """
    x1n = np.asarray(x1n, dtype=float)
    x2n = np.asarray(x2n, dtype=float)
    p1, T1 = _hartley(x1n)
    p2, T2 = _hartley(x2n)
    u1, v1 = p1[..., 0], p1[..., 1]
    u2, v2 = p2[..., 0], p2[..., 1]
    ones = np.ones_like(u1)
    A = np.stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, ones], axis=-1)
    if weights is not None:
        A = A * np.asarray(weights, dtype=float)[..., None]
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, _, Vt = np.linalg.svd(A)
    En = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    E = np.swapaxes(T2, -1, -2) @ En @ T1
    return _project_essential(E)


def sampson_refit(E, x1n, x2n, xs, ys, K: CameraIntrinsics, iterations: int = 3) -> np.ndarray:
    """Reweighted 8-point whose weights turn the algebraic error into the Sampson error."""
    Ki = K.K_inv
    for _ in range(iterations):
        F = Ki.T @ E @ Ki
        xh = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
        yh = np.concatenate([ys, np.ones((len(ys), 1))], axis=1)
        Fx, Fty = xh @ F.T, yh @ F
        den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Fty[:, 0] ** 2 + Fty[:, 1] ** 2
        # residuals in calibrated and pixel coordinates differ by a global scale only
        E = eight_point(x1n, x2n, 1.0 / np.sqrt(np.maximum(den, 1e-300)))
    return E


def decompose_essential(E) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) candidates of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    Ra = U @ W @ Vt
    Rb = U @ W.T @ Vt
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def triangulate_midpoint(R, t, x1n, x2n) -> np.ndarray:
    """Midpoint triangulation in camera-A coordinates, shape (n, 3)."""
    n = len(x1n)
    d1 = np.concatenate([x1n, np.ones((n, 1))], axis=1)
    d2 = np.concatenate([x2n, np.ones((n, 1))], axis=1) @ R  # R^T applied row-wise
    c2 = -R.T @ t
    # solve [d1, -d2] [l1, l2]^T ~= c2 per point
    a11 = np.einsum("ij,ij->i", d1, d1)
    a12 = -np.einsum("ij,ij->i", d1, d2)
    a22 = np.einsum("ij,ij->i", d2, d2)
    r1 = d1 @ c2
    r2 = -(d2 @ c2)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-15, np.nan, det)
    l1 = (a22 * r1 - a12 * r2) / det
    l2 = (a11 * r2 - a12 * r1) / det
    return 0.5 * (l1[:, None] * d1 + (c2[None, :] + l2[:, None] * d2))


def cheirality_counts(E, x1n, x2n) -> list[tuple[int, np.ndarray, np.ndarray]]:
    out = []
    for R, t in decompose_essential(E):
        X = triangulate_midpoint(R, t, x1n, x2n)
        XB = X @ R.T + t
        ok = (X[:, 2] > 0) & (XB[:, 2] > 0)
        out.append((int(np.count_nonzero(ok)), R, t))
    return out


@dataclass
class RansacConfig:
    iterations: int = 2000
    threshold: float = 1.0           # Sampson distance, pixels squared
    min_inliers: int | None = None   # default max(15, 30% of input)
    seed: int = 0
    degenerate_px: float = 0.5       # rotation-only median residual below which t is unobservable

    def min_inliers_for(self, n: int) -> int:
        if self.min_inliers is not None:
            return self.min_inliers
        return max(15, int(math.ceil(0.3 * n)))


def _rotation_only(x1n, x2n):
    b1 = np.concatenate([x1n, np.ones((len(x1n), 1))], axis=1)
    b2 = np.concatenate([x2n, np.ones((len(x2n), 1))], axis=1)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(b2.T @ b1)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _points_of(corrs):
    xs = np.array([[c.x[0], c.x[1]] for c in corrs], dtype=float)
    ys = np.array([[c.y[0], c.y[1]] for c in corrs], dtype=float)
    return xs, ys


def estimate_pose_ransac(corrs, K: CameraIntrinsics, config: RansacConfig | None = None,
                         ) -> tuple[PoseHypothesis, np.ndarray]:
    """Normalized 8-point inside RANSAC, inlier refit, cheirality disambiguation.

    ``corrs`` is a sequence of objects with ``x``/``y`` pixel positions (and
    optionally ``active``; inactive entries are ignored and never inliers).
    Returns the pose and a boolean inlier mask aligned with ``corrs``.
    """
    config = config or RansacConfig()
    corrs = list(corrs)
    active = np.array([getattr(c, "active", True) for c in corrs], dtype=bool)
    idx = np.nonzero(active)[0]
    n = len(idx)
    if n < 8:
        raise InsufficientCorrespondencesError(f"need at least 8 correspondences, got {n}")
    xs, ys = _points_of([corrs[i] for i in idx])
    x1n, x2n = K.normalize(xs), K.normalize(ys)
    Ki = K.K_inv

    rng = np.random.default_rng(config.seed)
    samples = np.argsort(rng.random((config.iterations, n)), axis=1)[:, :8]
    Es = eight_point(x1n[samples], x2n[samples])
    Fs = Ki.T @ Es @ Ki
    xh = np.concatenate([xs, np.ones((n, 1))], axis=1)
    yh = np.concatenate([ys, np.ones((n, 1))], axis=1)
    Fx = np.einsum("kij,nj->kni", Fs, xh)
    Fty = np.einsum("kji,nj->kni", Fs, yh)
    num = np.einsum("nj,knj->kn", yh, Fx) ** 2
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Fty[..., 0] ** 2 + Fty[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(den > 1e-18, num / den, np.inf)
    # MSAC score: truncated Sampson error, so an exact model beats one that
    # admits a few extra near-threshold outliers
    cost = np.minimum(err, config.threshold).sum(axis=1)
    best = int(np.argmin(cost))  # argmin returns the lowest index on ties
    counts = np.count_nonzero(err < config.threshold, axis=1)
    need = config.min_inliers_for(n)
    if counts[best] < need:
        raise NoConsensusError(f"best consensus {counts[best]} < required {need}")

    inl = err[best] < config.threshold
    E = Es[best]
    for _ in range(2):
        E = sampson_refit(eight_point(x1n[inl], x2n[inl]), x1n[inl], x2n[inl], xs[inl], ys[inl], K)
        inl = sampson_distances(Ki.T @ E @ Ki, xs, ys) < config.threshold
    if np.count_nonzero(inl) < need:
        raise NoConsensusError("consensus collapsed after refit")

    R_rot = _rotation_only(x1n[inl], x2n[inl])
    b1 = np.concatenate([x1n[inl], np.ones((np.count_nonzero(inl), 1))], axis=1)
    pred = K.project(b1 @ R_rot.T)
    resid = np.median(np.linalg.norm(pred - ys[inl], axis=1))
    mask = np.zeros(len(corrs), dtype=bool)
    mask[idx[inl]] = True
    if resid < config.degenerate_px:
        raise DegenerateMotionError(
            f"rotation-only model explains inliers to {resid:.3g} px; translation unobservable",
            rotation=R_rot, inliers=mask)

    ranked = sorted(cheirality_counts(E, x1n[inl], x2n[inl]), key=lambda c: -c[0])
    count, R, t = ranked[0]
    if count * 2 <= np.count_nonzero(inl) or ranked[1][0] == count:
        raise CheiralityError("no essential decomposition wins a majority in front of both cameras")
    return PoseHypothesis(R, t), mask

