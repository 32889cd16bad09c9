"""Grayscale image container, sub-pixel sampling, gradients and PGM/PNG IO."""

from __future__ import annotations

import os
import re
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import ImageFormatError, OutOfBoundsError


class ImagePoint(NamedTuple):
    u: float
    v: float


class GrayImage:
    """Immutable 8-bit single channel image, indexed ``data[v, u]``."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ValueError("pixel values must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def from_bytes(cls, width: int, height: int, values) -> "GrayImage":
        if isinstance(values, (bytes, bytearray)):
            values = np.frombuffer(values, dtype=np.uint8)
        values = np.asarray(values)
        if values.size != width * height:
            raise ValueError(f"expected {width * height} values, got {values.size}")
        return cls(values.reshape(height, width))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    def __getitem__(self, uv):
        u, v = uv
        return int(self._data[v, u])

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self._data.shape == other._data.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm(raw: bytes, path) -> GrayImage:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {w}x{h}")
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM is supported (maxval={maxval})")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} raster bytes, found {len(body)}")
    return GrayImage(np.frombuffer(body, dtype=np.uint8).reshape(h, w))


def load_image(path) -> GrayImage:
    """Read an 8-bit grayscale binary PGM or PNG. Color images are rejected."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] in (b"P5", b"P2", b"P6", b"P3", b"P1", b"P4"):
        return _read_pgm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode != "L":
                    raise ImageFormatError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
                return GrayImage(np.array(im, dtype=np.uint8))
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"{path}: corrupt PNG ({exc})") from exc
    raise ImageFormatError(f"{path}: unrecognised image format")


def save_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.data.tobytes())


def save_png(img: GrayImage, path) -> None:
    Image.fromarray(np.ascontiguousarray(img.data), mode="L").save(path, format="PNG")


def _check_in_bounds(img: GrayImage, us, vs, margin=0.0):
    if (np.any(~np.isfinite(us)) or np.any(~np.isfinite(vs))
            or np.any(us < margin) or np.any(vs < margin)
            or np.any(us > img.width - 1 - margin) or np.any(vs > img.height - 1 - margin)):
        raise OutOfBoundsError("sample location outside the image")


def bilinear_many(arr: np.ndarray, us, vs) -> np.ndarray:
    """Bilinear lookup in a 2-D float/int array without bounds checking."""
    h, w = arr.shape
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    u0 = np.clip(np.floor(us).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vs).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = us - u0
    fv = vs - v0
    a = arr.astype(float, copy=False)
    top = a[v0, u0] * (1.0 - fu) + a[v0, u1] * fu
    bot = a[v1, u0] * (1.0 - fu) + a[v1, u1] * fu
    return top * (1.0 - fv) + bot * fv


def sample_bilinear_many(img: GrayImage, us, vs) -> np.ndarray:
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    _check_in_bounds(img, us, vs)
    return bilinear_many(img.data, us, vs)


def sample_bilinear(img: GrayImage, p) -> float:
    """Intensity at sub-pixel location ``p = (u, v)``; exact on the lattice."""
    return float(sample_bilinear_many(img, np.array([p[0]]), np.array([p[1]]))[0])


def lattice_gradients(img: GrayImage) -> tuple[np.ndarray, np.ndarray]:
    """Central differences on the integer lattice (zero on the outer ring)."""
    a = img.data.astype(float)
    gu = np.zeros_like(a)
    gv = np.zeros_like(a)
    gu[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
    gv[1:-1, :] = 0.5 * (a[2:, :] - a[:-2, :])
    return gu, gv


def gradient_many(img: GrayImage, us, vs, fields=None) -> np.ndarray:
    """Gradients at many sub-pixel points, shape ``(n, 2)``.

    ``fields`` may carry precomputed :func:`lattice_gradients` output.
    """
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    _check_in_bounds(img, us, vs, margin=1.0)
    gu, gv = fields if fields is not None else lattice_gradients(img)
    return np.stack([bilinear_many(gu, us, vs), bilinear_many(gv, us, vs)], axis=-1)


def gradient(img: GrayImage, p) -> np.ndarray:
    """Intensity gradient ``(dI/du, dI/dv)`` at ``p``; needs 1 px clearance from the border.

    Bilinear interpolation of the lattice central differences equals the
    central difference of the bilinearly sampled image, because an integer
    shift keeps the interpolation weights unchanged.
    """
    return gradient_many(img, np.array([p[0]]), np.array([p[1]]))[0]
