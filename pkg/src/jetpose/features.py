"""FAST-9 detection, intensity-centroid orientation, rBRIEF descriptors and matching.

Descriptors are 32-byte ``uint8`` arrays; bit ``i`` lives in byte ``i // 8`` at
position ``i % 8`` (little-endian within the byte, as in OpenCV's ORB).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmallError, InsufficientSamplesError, OutOfBoundsError
from .img import GrayImage, ImagePoint

BORDER_MARGIN = 20
DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 256
ORIENTATION_RADIUS = 15
HARRIS_BLOCK = 7
HARRIS_K = 0.04

# Bresenham circle of radius 3, clockwise starting straight up (du, dv).
FAST_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
FAST_ARC = 9


def _load_pattern() -> np.ndarray:
    text = resources.files("jetpose").joinpath("resources/orb_pattern_31.txt").read_text()
    pattern = np.array([[int(t) for t in line.split()] for line in text.splitlines() if line.strip()])
    if pattern.shape != (DESCRIPTOR_BITS, 4):
        raise RuntimeError(f"bad sampling pattern table shape {pattern.shape}")
    return pattern


#: rows of (x1, y1, x2, y2): bit i compares I(p + (x1, y1)) < I(p + (x2, y2))
PATTERN = _load_pattern()
PATTERN.setflags(write=False)


@dataclass(frozen=True)
class Keypoint:
    position: ImagePoint
    response: float
    orientation: float = 0.0


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: int


@dataclass(frozen=True, eq=False)
class DescriptorField:
    """Descriptors on the (2*half_width+1)^2 lattice around ``center``, row-major in v."""

    center: tuple[int, int]
    half_width: int
    grid: np.ndarray   # (n_cells, 32) uint8
    valid_mask: np.ndarray  # (n_cells,) bool

    @property
    def side(self) -> int:
        return 2 * self.half_width + 1

    def offsets(self) -> np.ndarray:
        """Cell offsets ``(du, dv)`` in grid order."""
        r = np.arange(-self.half_width, self.half_width + 1)
        dv, du = np.meshgrid(r, r, indexing="ij")
        return np.stack([du.ravel(), dv.ravel()], axis=1)

    def cell(self, du: int, dv: int) -> np.ndarray:
        idx = (dv + self.half_width) * self.side + (du + self.half_width)
        return self.grid[idx]

    def cell_valid(self, du: int, dv: int) -> bool:
        idx = (dv + self.half_width) * self.side + (du + self.half_width)
        return bool(self.valid_mask[idx])


def in_descriptor_region(width: int, height: int, us, vs) -> np.ndarray:
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    return ((us >= BORDER_MARGIN) & (vs >= BORDER_MARGIN)
            & (us <= width - 1 - BORDER_MARGIN) & (vs <= height - 1 - BORDER_MARGIN))


# --------------------------------------------------------------------------
# detection


def fast_corner_mask(img: GrayImage, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Segment-test mask and Rosten's SAD score for every pixel (zero where not a corner)."""
    a = img.data.astype(np.int32)
    h, w = a.shape
    mask = np.zeros((h, w), dtype=bool)
    score = np.zeros((h, w), dtype=float)
    if h < 7 or w < 7:
        return mask, score
    centre = a[3:h - 3, 3:w - 3]
    ring = np.stack([a[3 + dv:h - 3 + dv, 3 + du:w - 3 + du] for du, dv in FAST_CIRCLE])
    brighter = ring > centre + threshold
    darker = ring < centre - threshold
    found = np.zeros_like(centre, dtype=bool)
    for flags in (brighter, darker):
        ext = np.concatenate([flags, flags[:FAST_ARC - 1]])
        for start in range(16):
            found |= np.all(ext[start:start + FAST_ARC], axis=0)
    diff = ring - centre
    bright_sad = np.where(brighter, diff - threshold, 0).sum(axis=0)
    dark_sad = np.where(darker, -diff - threshold, 0).sum(axis=0)
    mask[3:h - 3, 3:w - 3] = found
    score[3:h - 3, 3:w - 3] = np.where(found, np.maximum(bright_sad, dark_sad), 0.0)
    return mask, score


def harris_response(img: GrayImage, block: int = HARRIS_BLOCK, k: float = HARRIS_K) -> np.ndarray:
    a = img.data.astype(float)
    iu = ndimage.sobel(a, axis=1, mode="nearest") / 8.0
    iv = ndimage.sobel(a, axis=0, mode="nearest") / 8.0
    box = block * block
    suu = ndimage.uniform_filter(iu * iu, size=block, mode="nearest") * box
    svv = ndimage.uniform_filter(iv * iv, size=block, mode="nearest") * box
    suv = ndimage.uniform_filter(iu * iv, size=block, mode="nearest") * box
    return suu * svv - suv * suv - k * (suu + svv) ** 2


def detect_fast(img: GrayImage, threshold: float = 20, max_keypoints: int = 500,
                with_orientation: bool = True) -> list[Keypoint]:
    """FAST-9 corners, 3x3 non-maximum suppressed, ranked by Harris response."""
    side = 2 * BORDER_MARGIN + 1
    if img.width < side or img.height < side:
        raise ImageTooSmallError(f"image must be at least {side}x{side}, got {img.width}x{img.height}")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    mask, score = fast_corner_mask(img, threshold)
    peaks = mask & (score >= ndimage.maximum_filter(score, size=3, mode="constant"))
    region = np.zeros_like(peaks)
    region[BORDER_MARGIN:img.height - BORDER_MARGIN, BORDER_MARGIN:img.width - BORDER_MARGIN] = True
    vs, us = np.nonzero(peaks & region)
    if us.size == 0 or max_keypoints <= 0:
        return []
    harris = harris_response(img)[vs, us]
    order = np.lexsort((us, vs, -harris))[:max_keypoints]
    out = []
    for i in order:
        u, v = int(us[i]), int(vs[i])
        theta = orientation_intensity_centroid(img, (u, v)) if with_orientation else 0.0
        out.append(Keypoint(ImagePoint(float(u), float(v)), float(harris[i]), theta))
    return out


def _disc_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dv, du = np.meshgrid(r, r, indexing="ij")
    keep = du * du + dv * dv <= radius * radius
    return np.stack([du[keep], dv[keep]], axis=1)


def orientation_intensity_centroid(img: GrayImage, p, radius: int = ORIENTATION_RADIUS) -> float:
    """atan2(m01, m10) of the circular patch around the lattice point nearest ``p``."""
    cu, cv = int(np.rint(p[0])), int(np.rint(p[1]))
    if cu - radius < 0 or cv - radius < 0 or cu + radius >= img.width or cv + radius >= img.height:
        raise OutOfBoundsError(f"orientation patch of radius {radius} at {(cu, cv)} leaves the image")
    off = _disc_offsets(radius)
    vals = img.data[cv + off[:, 1], cu + off[:, 0]].astype(float)
    m10 = float(np.dot(off[:, 0], vals))
    m01 = float(np.dot(off[:, 1], vals))
    return float(np.arctan2(m01, m10))


# --------------------------------------------------------------------------
# description


def _pack(bits: np.ndarray) -> np.ndarray:
    return np.packbits(bits, axis=-1, bitorder="little")


def unpack_bits(desc: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=-1, bitorder="little")


def rotated_pattern(orientation: float) -> np.ndarray:
    """Pattern offsets rotated by ``orientation`` and rounded to the lattice, (256, 4) ints."""
    c, s = np.cos(orientation), np.sin(orientation)
    x, y = PATTERN[:, 0::2].astype(float), PATTERN[:, 1::2].astype(float)
    du = np.rint(x * c - y * s).astype(np.int64)
    dv = np.rint(x * s + y * c).astype(np.int64)
    return np.stack([du[:, 0], dv[:, 0], du[:, 1], dv[:, 1]], axis=1)


def descriptors_at(img: GrayImage, us, vs, chunk: int = 4096) -> np.ndarray:
    """Unrotated descriptors at integer lattice points (caller checks the margin)."""
    us = np.asarray(us, dtype=np.int64).ravel()
    vs = np.asarray(vs, dtype=np.int64).ravel()
    out = np.empty((us.size, DESCRIPTOR_BYTES), dtype=np.uint8)
    data = img.data
    for lo in range(0, us.size, chunk):
        cu = us[lo:lo + chunk, None]
        cv = vs[lo:lo + chunk, None]
        first = data[cv + PATTERN[None, :, 1], cu + PATTERN[None, :, 0]]
        second = data[cv + PATTERN[None, :, 3], cu + PATTERN[None, :, 2]]
        out[lo:lo + chunk] = _pack(first < second)
    return out


def compute_descriptor(img: GrayImage, p, orientation: float = 0.0) -> np.ndarray:
    """256-bit rBRIEF descriptor at the lattice point nearest ``p``."""
    if not in_descriptor_region(img.width, img.height, [p[0]], [p[1]])[0]:
        raise OutOfBoundsError(f"{tuple(p)} is closer than {BORDER_MARGIN} px to the border")
    cu, cv = int(np.rint(p[0])), int(np.rint(p[1]))
    if orientation == 0.0:
        return descriptors_at(img, [cu], [cv])[0]
    pat = rotated_pattern(orientation)
    first = img.data[cv + pat[:, 1], cu + pat[:, 0]]
    second = img.data[cv + pat[:, 3], cu + pat[:, 2]]
    return _pack(first < second)


def describe_keypoints(img: GrayImage, keypoints, rotated: bool = True) -> np.ndarray:
    if not keypoints:
        return np.empty((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return np.stack([compute_descriptor(img, kp.position, kp.orientation if rotated else 0.0)
                     for kp in keypoints])


class DenseDescriptorMap:
    """Lazily filled per-pixel descriptor cache for one image (orientation 0)."""

    def __init__(self, img: GrayImage):
        self.img = img
        self._desc = np.zeros((img.height, img.width, DESCRIPTOR_BYTES), dtype=np.uint8)
        self._done = np.zeros((img.height, img.width), dtype=bool)

    def valid(self, us, vs) -> np.ndarray:
        return in_descriptor_region(self.img.width, self.img.height, us, vs)

    def get(self, us, vs) -> np.ndarray:
        """Descriptors at integer points, which must all be valid."""
        us = np.asarray(us, dtype=np.int64)
        vs = np.asarray(vs, dtype=np.int64)
        if not np.all(self.valid(us, vs)):
            raise OutOfBoundsError("dense descriptor requested too close to the border")
        todo = ~self._done[vs, us]
        if np.any(todo):
            tu, tv = us[todo], vs[todo]
            self._desc[tv, tu] = descriptors_at(self.img, tu, tv)
            self._done[tv, tu] = True
        return self._desc[vs, us]

    def field(self, center, half_width: int) -> DescriptorField:
        return dense_descriptor_field(self.img, center, half_width, cache=self)


def dense_descriptor_field(img: GrayImage, center, half_width: int, cache: DenseDescriptorMap | None = None
                           ) -> DescriptorField:
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    cu, cv = center
    if cu != int(cu) or cv != int(cv):
        raise ValueError(f"field center {tuple(center)} is not on the integer lattice")
    cu, cv = int(cu), int(cv)
    r = np.arange(-half_width, half_width + 1)
    dv, du = np.meshgrid(r, r, indexing="ij")
    us, vs = (cu + du).ravel(), (cv + dv).ravel()
    valid = in_descriptor_region(img.width, img.height, us, vs)
    grid = np.zeros((us.size, DESCRIPTOR_BYTES), dtype=np.uint8)
    if np.any(valid):
        if cache is not None:
            grid[valid] = cache.get(us[valid], vs[valid])
        else:
            grid[valid] = descriptors_at(img, us[valid], vs[valid])
    grid.setflags(write=False)
    valid.setflags(write=False)
    return DescriptorField((cu, cv), half_width, grid, valid)


# --------------------------------------------------------------------------
# distances and matching


def hamming(a, b) -> int:
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))
    return int(np.bitwise_count(x).sum())


def hamming_many(ref, descs) -> np.ndarray:
    """Distances from one descriptor (32,) to each row of ``descs`` (n, 32)."""
    x = np.bitwise_xor(np.asarray(descs, dtype=np.uint8), np.asarray(ref, dtype=np.uint8))
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def hamming_rows(a, b) -> np.ndarray:
    """Row-wise distances between equally shaped (n, 32) arrays."""
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def distance_matrix(desc_a, desc_b) -> np.ndarray:
    a = unpack_bits(desc_a).astype(np.float32)
    b = unpack_bits(desc_b).astype(np.float32)
    # |a xor b| = |a| + |b| - 2 a.b, exact in float32 for 256-bit strings
    d = a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.rint(d).astype(np.int64)


def match_brute_force(desc_a, desc_b, max_distance: int = 64, cross_check: bool = True) -> list[Match]:
    """Nearest neighbour in Hamming distance, ties to the lowest index."""
    desc_a = np.asarray(desc_a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    desc_b = np.asarray(desc_b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(desc_a) == 0 or len(desc_b) == 0:
        raise InsufficientSamplesError("cannot match an empty descriptor list")
    d = distance_matrix(desc_a, desc_b)
    best_b = np.argmin(d, axis=1)
    best_a = np.argmin(d, axis=0)
    out = []
    for i, j in enumerate(best_b):
        dist = int(d[i, j])
        if dist > max_distance:
            continue
        if cross_check and best_a[j] != i:
            continue
        out.append(Match(i, int(j), dist))
    return out
