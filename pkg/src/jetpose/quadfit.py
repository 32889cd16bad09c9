"""Local quadratic residual models.

Every backend produces a :class:`Paraboloid` ``Q(v) = v^T A v + 2 v^T b + c``
in the displacement ``v`` from an operating point:

* descriptor  -- least-squares quadratic through lattice Hamming distances
* photometric -- Gauss-Newton expansion of a weighted SSD (Lucas-Kanade)
* geometric   -- the circular loss ``|v|^2``

``window`` is the side length of the square sampling area (3 means 3x3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamplesError, OutOfBoundsError, RankDeficientError
from .features import DenseDescriptorMap, DescriptorField, hamming_many, hamming_rows
from .img import GrayImage, bilinear_many, gradient_many, lattice_gradients

PSD_EPS = 1e-6
KINDS = ("descriptor", "photometric", "geometric")


@dataclass(frozen=True)
class QuadSurface:
    """``f(x) = a11 x1^2 + a22 x2^2 + a12 x1 x2 + a1 x1 + a2 x2 + a0``."""

    a11: float
    a22: float
    a12: float
    a1: float
    a2: float
    a0: float

    @classmethod
    def from_vector(cls, a) -> "QuadSurface":
        return cls(*(float(x) for x in a))

    def as_vector(self) -> np.ndarray:
        return np.array([self.a11, self.a22, self.a12, self.a1, self.a2, self.a0])

    @property
    def matrix(self) -> np.ndarray:
        """Symmetric 3x3 ``A`` with ``f(x) = (x, 1) A (x, 1)^T``."""
        return np.array([
            [self.a11, self.a12 / 2, self.a1 / 2],
            [self.a12 / 2, self.a22, self.a2 / 2],
            [self.a1 / 2, self.a2 / 2, self.a0],
        ])

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(design_rows(x.reshape(1, 2))[0] @ self.as_vector())


@dataclass(frozen=True, eq=False)
class Paraboloid:
    A_prime: np.ndarray
    b: np.ndarray
    c: float
    degenerate: bool = False

    def __call__(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(v @ self.A_prime @ v + 2.0 * v @ self.b + self.c)

    def minimizer(self) -> np.ndarray:
        return -np.linalg.solve(self.A_prime, self.b)


def design_rows(offsets) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
    x1, x2 = offsets[:, 0], offsets[:, 1]
    return np.stack([x1 * x1, x2 * x2, x1 * x2, x1, x2, np.ones_like(x1)], axis=1)


def fit_quadratic(offsets, values=None) -> QuadSurface:
    """Unweighted least-squares quadratic through ``(offset, value)`` samples.

    Accepts either a list of ``((x1, x2), z)`` pairs or separate arrays.
    """
    if values is None:
        pairs = list(offsets)
        offsets = np.array([p[0] for p in pairs], dtype=float).reshape(-1, 2)
        values = np.array([p[1] for p in pairs], dtype=float)
    D = design_rows(offsets)
    z = np.asarray(values, dtype=float).ravel()
    if len(D) < 6:
        raise RankDeficientError(f"need at least 6 samples, got {len(D)}")
    coef, _, rank, _ = np.linalg.lstsq(D, z, rcond=None)
    if rank < 6:
        raise RankDeficientError(f"design matrix has rank {rank} < 6")
    return QuadSurface.from_vector(coef)


def project_psd(A, eps: float = PSD_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Clamp eigenvalues of symmetric 2x2 matrices (stacked) at ``eps``.

    Matrices that need no clamping are returned bit-for-bit unchanged.
    """
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    A = A.reshape(-1, 2, 2)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    w, V = np.linalg.eigh(A)
    clamped = np.any(w < eps, axis=1) | ~np.all(np.isfinite(w), axis=1)
    out = A.copy()
    if np.any(clamped):
        wc = np.clip(np.nan_to_num(w[clamped], nan=eps), eps, None)
        Vc = np.nan_to_num(V[clamped])
        out[clamped] = Vc @ (wc[:, :, None] * np.swapaxes(Vc, 1, 2))
    if single:
        return out[0], clamped[0]
    return out, clamped


def recenter(coef, delta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(A', b, c)`` of the quadratic(s) ``coef`` viewed from offset ``delta``."""
    coef = np.asarray(coef, dtype=float).reshape(-1, 6)
    delta = np.asarray(delta, dtype=float).reshape(-1, 2)
    a11, a22, a12, a1, a2, a0 = coef.T
    A = np.empty((len(coef), 2, 2))
    A[:, 0, 0] = a11
    A[:, 1, 1] = a22
    A[:, 0, 1] = A[:, 1, 0] = a12 / 2
    d1, d2 = delta[:, 0], delta[:, 1]
    b = np.stack([a11 * d1 + a12 / 2 * d2 + a1 / 2, a12 / 2 * d1 + a22 * d2 + a2 / 2], axis=1)
    c = a11 * d1 ** 2 + a22 * d2 ** 2 + a12 * d1 * d2 + a1 * d1 + a2 * d2 + a0
    return A, b, c


def quad_to_paraboloid(q: QuadSurface, operating_point=(0.0, 0.0)) -> Paraboloid:
    """Rewrite ``q`` in the displacement from ``operating_point`` and make it PSD."""
    A, b, c = recenter(q.as_vector(), operating_point)
    Ap, degenerate = project_psd(A[0])
    return Paraboloid(Ap, b[0], float(c[0]), bool(degenerate))


def _half(window: int) -> int:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd side length >= 3, got {window}")
    return window // 2


def window_offsets(window: int) -> np.ndarray:
    h = _half(window)
    r = np.arange(-h, h + 1)
    dv, du = np.meshgrid(r, r, indexing="ij")
    return np.stack([du.ravel(), dv.ravel()], axis=1)


# --------------------------------------------------------------------------
# descriptor backend


def descriptor_backend_fit(field: DescriptorField, ref_desc, operating_point, window: int = 7) -> Paraboloid:
    """Quadratic through the Hamming distances from ``ref_desc`` to the field cells.

    Samples the ``window x window`` lattice square around the cell nearest the
    operating point; the model is re-centred on the operating point itself.
    """
    half = _half(window)
    if half > field.half_width:
        raise ValueError(f"window {window} exceeds field half width {field.half_width}")
    op = np.asarray(operating_point, dtype=float)
    cell = np.rint(op)
    rel = cell - np.asarray(field.center, dtype=float)
    if np.any(np.abs(rel) > field.half_width - half):
        raise OutOfBoundsError(f"operating point {tuple(op)} too close to the field edge")
    offs = window_offsets(window)
    fo = offs + rel.astype(int)
    idx = (fo[:, 1] + field.half_width) * field.side + (fo[:, 0] + field.half_width)
    ok = field.valid_mask[idx]
    if np.count_nonzero(ok) < 6:
        raise InsufficientSamplesError(f"only {np.count_nonzero(ok)} valid samples")
    z = hamming_many(ref_desc, field.grid[idx[ok]])
    q = fit_quadratic(offs[ok], z)
    return quad_to_paraboloid(q, op - cell)


def descriptor_fit_many(dmap: DenseDescriptorMap, ref_descs, ops, window: int):
    """Batch descriptor fits. Returns ``(A, b, c, degenerate, ok)``; ``ok`` false where unfit."""
    ops = np.asarray(ops, dtype=float).reshape(-1, 2)
    n = len(ops)
    offs = window_offsets(window)
    m = len(offs)
    cells = np.rint(ops).astype(np.int64)
    us = cells[:, None, 0] + offs[None, :, 0]
    vs = cells[:, None, 1] + offs[None, :, 1]
    valid = dmap.valid(us, vs)
    z = np.zeros((n, m))
    if np.any(valid):
        descs = dmap.get(us[valid], vs[valid])
        refs = np.broadcast_to(np.asarray(ref_descs, dtype=np.uint8)[:, None, :], (n, m, 32))[valid]
        z[valid] = hamming_rows(descs, refs)
    coef = np.full((n, 6), np.nan)
    full = np.all(valid, axis=1)
    D = design_rows(offs)
    if np.any(full):
        coef[full] = z[full] @ np.linalg.pinv(D).T
    for i in np.nonzero(~full)[0]:
        if np.count_nonzero(valid[i]) < 6:
            continue
        try:
            coef[i] = fit_quadratic(offs[valid[i]], z[i, valid[i]]).as_vector()
        except RankDeficientError:
            continue
    ok = np.all(np.isfinite(coef), axis=1)
    A, b, c = recenter(np.nan_to_num(coef), ops - cells)
    A, degenerate = project_psd(A)
    return A, b, c, degenerate, ok


# --------------------------------------------------------------------------
# photometric backend


def _gaussian_weights(window: int) -> np.ndarray:
    offs = window_offsets(window).astype(float)
    sigma = window / 2.0
    w = np.exp(-(offs ** 2).sum(1) / (2.0 * sigma * sigma))
    return w / w.sum()


def photometric_terms_many(img_a: GrayImage, img_b: GrayImage, xs, ys, window: int, grad_b=None):
    """Raw weighted-SSD expansion ``(A', b, c, ok)`` before PSD projection."""
    xs = np.asarray(xs, dtype=float).reshape(-1, 2)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    offs = window_offsets(window).astype(float)
    half = window // 2
    w = _gaussian_weights(window)
    ok = ((xs[:, 0] - half >= 0) & (xs[:, 1] - half >= 0)
          & (xs[:, 0] + half <= img_a.width - 1) & (xs[:, 1] + half <= img_a.height - 1)
          & (ys[:, 0] - half >= 1) & (ys[:, 1] - half >= 1)
          & (ys[:, 0] + half <= img_b.width - 2) & (ys[:, 1] + half <= img_b.height - 2))
    n = len(xs)
    A = np.zeros((n, 2, 2))
    b = np.zeros((n, 2))
    c = np.zeros(n)
    if not np.any(ok):
        return A, b, c, ok
    pa = xs[ok, None, :] + offs[None]
    pb = ys[ok, None, :] + offs[None]
    ia = bilinear_many(img_a.data, pa[..., 0], pa[..., 1])
    ib = bilinear_many(img_b.data, pb[..., 0], pb[..., 1])
    g = gradient_many(img_b, pb[..., 0].ravel(), pb[..., 1].ravel(),
                      fields=grad_b).reshape(pb.shape)
    e = ia - ib
    A[ok] = np.einsum("m,kmi,kmj->kij", w, g, g)
    b[ok] = -np.einsum("m,kmi,km->ki", w, g, e)
    c[ok] = np.einsum("m,km->k", w, e * e)
    return A, b, c, ok


def photometric_fit_many(img_a, img_b, xs, ys, window: int, grad_b=None):
    A, b, c, ok = photometric_terms_many(img_a, img_b, xs, ys, window, grad_b)
    A, degenerate = project_psd(A)
    return A, b, c, degenerate, ok


def photometric_backend_fit(img_a: GrayImage, img_b: GrayImage, x, y, window: int = 7) -> Paraboloid:
    """Lucas-Kanade quadratic model of the Gaussian-weighted SSD around ``y``."""
    A, b, c, degenerate, ok = photometric_fit_many(img_a, img_b, [x], [y], window)
    if not ok[0]:
        raise OutOfBoundsError(f"photometric patch around {tuple(x)} / {tuple(y)} leaves the image")
    return Paraboloid(A[0], b[0], float(c[0]), bool(degenerate[0]))


# --------------------------------------------------------------------------
# geometric backend


def geometric_backend_fit(operating_point=None) -> Paraboloid:
    """Squared distance from the operating point."""
    return Paraboloid(np.eye(2), np.zeros(2), 0.0, False)


def geometric_fit_many(n: int, shift=None):
    """Circular losses; ``shift`` re-centres each on ``-shift`` (operating point moved by ``shift``)."""
    A = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    b = np.zeros((n, 2)) if shift is None else np.asarray(shift, dtype=float).reshape(n, 2).copy()
    c = np.einsum("ki,ki->k", b, b)
    return A, b, c, np.zeros(n, dtype=bool), np.ones(n, dtype=bool)
