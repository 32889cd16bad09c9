"""KITTI-odometry ingestion and synthetic piecewise-planar scenes with exact ground truth.

Planes are given in camera-A coordinates as ``n . X = d`` with a unit normal
and ``d > 0``. Camera B sees ``X_B = R X_A + s t``, so plane points map by the
homography ``H = K (R + s t n^T / d) K^-1``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError
from .features import BORDER_MARGIN
from .geometry import CameraIntrinsics, PoseHypothesis, rotation_from_axis_angle
from .img import GrayImage, bilinear_many, load_image, save_png
from .jet import Correspondence

# --------------------------------------------------------------------------
# KITTI


def _parse_reals(text: str, path, count: int) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split()])
    except ValueError:
        raise DatasetError(f"{path}: non-numeric entry") from None
    if vals.size != count:
        raise DatasetError(f"{path}: expected {count} numbers, got {vals.size}")
    return vals


def read_calib(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing calibration file {path}")
    for line in path.read_text().splitlines():
        if line.startswith("P0:"):
            P = _parse_reals(line[3:], path, 12).reshape(3, 4)
            try:
                return CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2])
            except ValueError as exc:
                raise DatasetError(f"{path}: {exc}") from None
    raise DatasetError(f"{path}: no P0 row")


def read_poses(path) -> list[np.ndarray]:
    """World-from-camera 4x4 transforms, one per line of 12 row-major reals."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing poses file {path}")
    out = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        T = np.eye(4)
        T[:3, :] = _parse_reals(line, f"{path}:{i + 1}", 12).reshape(3, 4)
        out.append(T)
    return out


def relative_transform(T_a, T_b) -> np.ndarray:
    """``inverse(T_a) @ T_b`` -- maps camera-b coordinates into camera-a coordinates."""
    return np.linalg.inv(T_a) @ T_b


def pose_b_from_a(T_a, T_b) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and metric translation with ``X_b = R X_a + t``."""
    rel = relative_transform(T_a, T_b)
    R = rel[:3, :3].T
    return R, -R @ rel[:3, 3]


@dataclass
class SequenceSource:
    root: Path
    intrinsics: CameraIntrinsics
    frame_paths: list[Path]
    gt_poses: list[np.ndarray] | None = None

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)

    def frame(self, i: int) -> GrayImage:
        return load_image(self.frame_paths[i])

    def relative_transform(self, i: int) -> np.ndarray:
        if self.gt_poses is None:
            raise DatasetError("sequence has no ground-truth poses")
        return relative_transform(self.gt_poses[i], self.gt_poses[i + 1])

    def relative_pose(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground truth between frames i and i+1 in the estimator's convention."""
        if self.gt_poses is None:
            raise DatasetError("sequence has no ground-truth poses")
        return pose_b_from_a(self.gt_poses[i], self.gt_poses[i + 1])


def load_kitti_sequence(directory, poses_path=None, require_poses: bool = False) -> SequenceSource:
    """Read ``image_0/%06d.png``, ``calib.txt`` and (optionally) ``poses.txt``."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    img_dir = root / "image_0"
    frames = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not frames:
        raise DatasetError(f"{img_dir}: no frames")
    for i, p in enumerate(frames):
        if p.name != f"{i:06d}.png":
            raise DatasetError(f"{img_dir}: expected {i:06d}.png, found {p.name}")
    K = read_calib(root / "calib.txt")
    poses_path = Path(poses_path) if poses_path is not None else root / "poses.txt"
    gt = None
    if poses_path.is_file():
        gt = read_poses(poses_path)
        if len(gt) != len(frames):
            raise DatasetError(f"{poses_path}: {len(gt)} poses for {len(frames)} frames")
    elif require_poses:
        raise DatasetError(f"missing poses file {poses_path}")
    return SequenceSource(root, K, frames, gt)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0 or self.d <= 0:
            raise ValueError("plane needs a non-zero normal and positive distance")
        object.__setattr__(self, "normal", tuple(float(x) for x in n / norm))

    @property
    def n(self) -> np.ndarray:
        return np.asarray(self.normal)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 320
    height: int = 240
    focal: float | None = None
    plane_d: float = 8.0
    plane_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    plane2_d: float | None = None
    plane2_normal: tuple[float, float, float] | None = None
    rot_axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    rot_deg: float = 0.0
    t_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)
    t_scale: float = 0.0
    noise_sigma: float = 0.0
    frames: int = 2

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal if self.focal is not None else 0.9 * self.width
        return CameraIntrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


_VECTOR_KEYS = {"plane_normal", "plane2_normal", "rot_axis", "t_dir"}
_INT_KEYS = {"seed", "width", "height", "frames"}
_FLOAT_KEYS = {"focal", "plane_d", "plane2_d", "rot_deg", "t_scale", "noise_sigma"}


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse ``key=value`` lines (``#`` comments allowed); vectors are comma or space separated."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key in _VECTOR_KEYS:
                vec = tuple(float(t) for t in val.replace(",", " ").split())
                if len(vec) != 3:
                    raise ValueError("expected 3 components")
                values[key] = vec
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    spec = SceneSpec(**values)
    if spec.width < 2 * BORDER_MARGIN + 1 or spec.height < 2 * BORDER_MARGIN + 1:
        raise ValueError("image too small for descriptors")
    if (spec.plane2_d is None) != (spec.plane2_normal is None):
        raise ValueError("plane2_d and plane2_normal must be given together")
    if spec.frames < 2:
        raise ValueError("frames must be >= 2")
    return spec


def format_scene_spec(spec: SceneSpec) -> str:
    lines = []
    for key in SceneSpec.__dataclass_fields__:
        val = getattr(spec, key)
        if val is None:
            continue
        if isinstance(val, tuple):
            val = ",".join(repr(float(x)) for x in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def value_noise(width: int, height: int, seed: int, cells=(24, 12, 6, 3)) -> np.ndarray:
    """Multi-octave smooth random field scaled to [0, 255] (float)."""
    rng = np.random.default_rng(seed)
    out = np.zeros((height, width))
    for cell in cells:
        gh, gw = height // cell + 4, width // cell + 4
        grid = rng.standard_normal((gh, gw))
        up = ndimage.zoom(grid, cell, order=3, mode="nearest")
        out += math.sqrt(cell) * up[cell:cell + height, cell:cell + width]
    lo, hi = np.percentile(out, [1, 99])
    return np.clip((out - lo) / (hi - lo) * 255.0, 0.0, 255.0)


@dataclass(eq=False)
class SynthScene:
    base_texture: GrayImage
    margin: int
    planes: list[Plane]
    rotation: np.ndarray
    t_dir: np.ndarray
    t_scale: float
    noise_sigma: float
    seed: int = 0
    width: int = 320
    height: int = 240
    K: CameraIntrinsics | None = field(default=None, repr=False)

    @property
    def relative_pose(self) -> PoseHypothesis:
        return PoseHypothesis(self.rotation, self.t_dir)

    @property
    def translation(self) -> np.ndarray:
        return self.t_scale * self.t_dir

    @property
    def split_u(self) -> float:
        return self.width / 2.0

    def plane_index(self, us) -> np.ndarray:
        """Plane owning each image-A column (left half first plane, right half second)."""
        us = np.asarray(us, dtype=float)
        if len(self.planes) == 1:
            return np.zeros(us.shape, dtype=int)
        return (us >= self.split_u).astype(int)


def build_scene(spec: SceneSpec) -> SynthScene:
    margin = max(spec.width, spec.height) // 2
    tex = value_noise(spec.width + 2 * margin, spec.height + 2 * margin, spec.seed)
    planes = [Plane(spec.plane_normal, spec.plane_d)]
    if spec.plane2_d is not None:
        planes.append(Plane(spec.plane2_normal, spec.plane2_d))
    axis = np.asarray(spec.rot_axis, dtype=float)
    R = rotation_from_axis_angle(axis / np.linalg.norm(axis), math.radians(spec.rot_deg))
    t = np.asarray(spec.t_dir, dtype=float)
    t = t / np.linalg.norm(t)
    scene = SynthScene(GrayImage(np.rint(tex)), margin, planes, R, t, spec.t_scale, spec.noise_sigma,
                       spec.seed, spec.width, spec.height, spec.intrinsics())
    _check_planes_visible(scene, scene.K)
    return scene


def homography(K: CameraIntrinsics, plane: Plane, R, T) -> np.ndarray:
    """Image-A to image-B homography for a plane and metric motion ``X_B = R X_A + T``."""
    return K.K @ (np.asarray(R) + np.outer(T, plane.n) / plane.d) @ K.K_inv


def _depths(K, plane, pts):
    rays = np.concatenate([K.normalize(pts), np.ones((len(pts), 1))], axis=1)
    return plane.d / (rays @ plane.n), rays


def _check_planes_visible(scene: SynthScene, K: CameraIntrinsics):
    corners = np.array([[0, 0], [scene.width - 1, 0], [0, scene.height - 1],
                        [scene.width - 1, scene.height - 1]], dtype=float)
    for plane in scene.planes:
        z, _ = _depths(K, plane, corners)
        if np.any(~(z > 0)):
            raise ValueError("plane-behind-camera: plane does not cover the view of camera A")


def _apply_h(H, pts):
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H).T
    return ph[:, :2] / ph[:, 2:3]


def render_view(scene: SynthScene, K: CameraIntrinsics, R, T, noise_seed=None) -> GrayImage:
    """Render the scene from the camera with ``X = R X_A + T`` (A itself for the identity)."""
    vs, us = np.mgrid[0:scene.height, 0:scene.width]
    q = np.stack([us.ravel(), vs.ravel()], axis=1).astype(float)
    src = None
    best_depth = None
    for i, plane in enumerate(scene.planes):
        H = homography(K, plane, R, T)
        a = _apply_h(np.linalg.inv(H), q)
        z_a, rays = _depths(K, plane, a)
        XB = (z_a[:, None] * rays) @ np.asarray(R).T + T
        owned = scene.plane_index(a[:, 0]) == i
        ok = owned & (z_a > 0) & (XB[:, 2] > 0)
        if src is None:
            src = a.copy()
            best_depth = np.where(ok, XB[:, 2], np.inf)
            continue
        closer = ok & (XB[:, 2] < best_depth)
        src[closer] = a[closer]
        best_depth = np.where(closer, XB[:, 2], best_depth)
    tex = scene.base_texture.data
    tu = np.clip(src[:, 0] + scene.margin, 0, tex.shape[1] - 1)
    tv = np.clip(src[:, 1] + scene.margin, 0, tex.shape[0] - 1)
    vals = bilinear_many(tex, tu, tv).reshape(scene.height, scene.width)
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        vals = vals + rng.normal(0.0, scene.noise_sigma, vals.shape)
    return GrayImage(np.clip(np.rint(vals), 0, 255))


def synth_render(scene: SynthScene, K: CameraIntrinsics | None = None, size=None
                 ) -> tuple[GrayImage, GrayImage, np.ndarray]:
    """Images A and B plus the ground-truth homography of the first plane."""
    K = K or scene.K
    if size is not None and tuple(size) != (scene.width, scene.height):
        raise ValueError("size must match the scene dimensions")
    _check_planes_visible(scene, K)
    img_a = render_view(scene, K, np.eye(3), np.zeros(3), noise_seed=[scene.seed, 1])
    img_b = render_view(scene, K, scene.rotation, scene.translation, noise_seed=[scene.seed, 2])
    return img_a, img_b, homography(K, scene.planes[0], scene.rotation, scene.translation)


def sequence_motion(scene: SynthScene, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Motion from frame 0 to frame i when the relative motion repeats every frame."""
    R, T = np.eye(3), np.zeros(3)
    for _ in range(i):
        R, T = scene.rotation @ R, scene.rotation @ T + scene.translation
    return R, T


def map_points(scene: SynthScene, K: CameraIntrinsics, xs, R=None, T=None) -> np.ndarray:
    """Exact image-B positions of image-A points under the scene's planes."""
    R = scene.rotation if R is None else R
    T = scene.translation if T is None else T
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    out = np.empty_like(xs)
    idx = scene.plane_index(xs[:, 0])
    for i, plane in enumerate(scene.planes):
        m = idx == i
        if np.any(m):
            out[m] = _apply_h(homography(K, plane, R, T), xs[m])
    return out


def synth_correspondences(scene: SynthScene, K: CameraIntrinsics | None = None, n: int = 100,
                          pixel_noise: float = 0.0, outlier_fraction: float = 0.0, seed=None,
                          margin: int = BORDER_MARGIN + 8) -> tuple[list[Correspondence], np.ndarray]:
    """Lattice points in A with their (noisy) images in B and a planted-outlier mask.

    Points are kept ``margin`` px clear of the borders in both images so they
    are usable by the descriptor backend.
    """
    if n < 8:
        raise ValueError("need at least 8 correspondences")
    if not 0.0 <= outlier_fraction < 1.0:
        raise ValueError("outlier_fraction must be in [0, 1)")
    K = K or scene.K
    rng = np.random.default_rng([scene.seed, 7] if seed is None else seed)
    lo = margin
    xs = np.empty((0, 2))
    ys = np.empty((0, 2))
    for _ in range(1000):
        cand = np.stack([rng.integers(lo, scene.width - lo, 4 * n),
                         rng.integers(lo, scene.height - lo, 4 * n)], axis=1).astype(float)
        img = map_points(scene, K, cand)
        ok = ((img[:, 0] >= lo) & (img[:, 0] <= scene.width - 1 - lo)
              & (img[:, 1] >= lo) & (img[:, 1] <= scene.height - 1 - lo))
        xs = np.concatenate([xs, cand[ok]])
        ys = np.concatenate([ys, img[ok]])
        if len(xs) >= n:
            break
    if len(xs) < n:
        raise ValueError("scene leaves too few points visible in both views")
    xs, ys = xs[:n], ys[:n]
    if pixel_noise > 0:
        ys = ys + rng.normal(0.0, pixel_noise, ys.shape)
    outlier = np.zeros(n, dtype=bool)
    k = int(round(outlier_fraction * n))
    if k:
        pick = rng.choice(n, size=k, replace=False)
        outlier[pick] = True
        ys[pick] = np.stack([rng.uniform(lo, scene.width - 1 - lo, k),
                             rng.uniform(lo, scene.height - 1 - lo, k)], axis=1)
    return [Correspondence(x, y) for x, y in zip(xs, ys)], outlier


# --------------------------------------------------------------------------
# writers


def _fmt(x: float) -> str:
    return repr(float(x))


def write_gt_pose(path, R, t_dir, scale) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(_fmt(v) for v in np.asarray(R).ravel()) + "\n")
        fh.write(" ".join(_fmt(v) for v in np.asarray(t_dir).ravel()) + "\n")
        fh.write(_fmt(scale) + "\n")


def read_gt_pose(path) -> tuple[np.ndarray, np.ndarray, float]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing ground-truth file {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 3:
        raise DatasetError(f"{path}: expected 3 lines (R, t, scale)")
    R = _parse_reals(lines[0], path, 9).reshape(3, 3)
    t = _parse_reals(lines[1], path, 3)
    s = float(_parse_reals(lines[2], path, 1)[0])
    return R, t, s


def write_matrix(path, M) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(M):
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(f"{_fmt(K.fx)} {_fmt(K.fy)} {_fmt(K.cx)} {_fmt(K.cy)}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing intrinsics file {path}")
    vals = _parse_reals(path.read_text(), path, 4)
    return CameraIntrinsics(*vals)


def write_calib(path, K: CameraIntrinsics) -> None:
    P = np.zeros((3, 4))
    P[:, :3] = K.K
    with open(path, "w") as fh:
        fh.write("P0: " + " ".join(f"{v:.12e}" for v in P.ravel()) + "\n")


def write_kitti_sequence(scene: SynthScene, directory, frames: int) -> Path:
    """Render ``frames`` views with repeated relative motion in KITTI layout."""
    root = Path(directory)
    (root / "image_0").mkdir(parents=True, exist_ok=True)
    poses = []
    for i in range(frames):
        R, T = sequence_motion(scene, i)
        img = render_view(scene, scene.K, R, T, noise_seed=[scene.seed, 100 + i])
        save_png(img, root / "image_0" / f"{i:06d}.png")
        Tw = np.eye(4)
        Tw[:3, :3] = R.T
        Tw[:3, 3] = -R.T @ T
        poses.append(Tw[:3].ravel())
    write_calib(root / "calib.txt", scene.K)
    with open(root / "poses.txt", "w") as fh:
        for row in poses:
            fh.write(" ".join(f"{v:.12e}" for v in row) + "\n")
    return root


def standard_scene_spec(seed: int, width: int = 320, height: int = 240) -> SceneSpec:
    """Randomised two-plane scene with a few degrees of rotation and sideways/forward motion."""
    rng = np.random.default_rng([seed, 314])
    axis = rng.normal(size=3)
    tdir = np.array([rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), rng.uniform(-1, 1)])
    n1 = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    n2 = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    return SceneSpec(
        seed=int(seed), width=width, height=height, focal=0.9 * width,
        plane_d=float(rng.uniform(6.0, 9.0)), plane_normal=tuple(n1 / np.linalg.norm(n1)),
        plane2_d=float(rng.uniform(10.0, 14.0)), plane2_normal=tuple(n2 / np.linalg.norm(n2)),
        rot_axis=tuple(axis / np.linalg.norm(axis)), rot_deg=float(rng.uniform(1.0, 3.0)),
        t_dir=tuple(tdir / np.linalg.norm(tdir)), t_scale=float(rng.uniform(0.2, 0.35)),
        noise_sigma=1.0,
    )


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
