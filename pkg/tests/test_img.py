import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from jetpose.errors import ImageFormatError, OutOfBoundsError
from jetpose.img import (
    GrayImage,
    ImagePoint,
    gradient,
    gradient_many,
    load_image,
    sample_bilinear,
    sample_bilinear_many,
    save_pgm,
    save_png,
)

images = st.tuples(st.integers(1, 32), st.integers(1, 32)).flatmap(
    lambda hw: arrays(np.uint8, hw)).map(GrayImage)


def test_pgm_bytes_copied_exactly(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(p)
    assert (img.width, img.height) == (2, 2)
    assert img.data.ravel().tolist() == [0, 255, 128, 64]
    assert img == GrayImage.from_bytes(2, 2, [0, 255, 128, 64])


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n# max\n255\n" + bytes([1, 2, 3]))
    assert load_image(p).data.tolist() == [[1, 2, 3]]


def test_single_pixel_png(tmp_path):
    p = tmp_path / "one.png"
    Image.fromarray(np.array([[42]], dtype=np.uint8), mode="L").save(p)
    img = load_image(p)
    assert img.width == img.height == 1 and img[0, 0] == 42


def test_rgb_png_rejected(tmp_path):
    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(p)
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.pgm")
    bad = tmp_path / "short.pgm"
    bad.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ImageFormatError):
        load_image(bad)
    ascii_pgm = tmp_path / "ascii.pgm"
    ascii_pgm.write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(ImageFormatError):
        load_image(ascii_pgm)
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"hello")
    with pytest.raises(ImageFormatError):
        load_image(junk)


def test_data_length_invariant():
    with pytest.raises(ValueError):
        GrayImage.from_bytes(3, 2, [0] * 5)
    with pytest.raises(ValueError):
        GrayImage(np.array([[256]]))


def test_image_is_immutable():
    img = GrayImage(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1


@given(images)
def test_pgm_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("rt") / "x.pgm"
    save_pgm(img, p)
    raw = p.read_bytes()
    again = load_image(p)
    assert again == img
    save_pgm(again, p)
    assert p.read_bytes() == raw


@given(images)
def test_png_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("rt") / "x.png"
    save_png(img, p)
    assert load_image(p) == img


GRID = GrayImage(np.array([[0, 100], [0, 100]], dtype=np.uint8))


@pytest.mark.parametrize("p, expected", [((0.5, 0.5), 50.0), ((1, 0), 100.0), ((0.25, 0.0), 25.0)])
def test_bilinear_examples(p, expected):
    assert sample_bilinear(GRID, ImagePoint(*p)) == pytest.approx(expected, abs=1e-12)


def test_bilinear_out_of_bounds():
    for p in [(-0.01, 0), (0, 1.01), (1.5, 0.5)]:
        with pytest.raises(OutOfBoundsError):
            sample_bilinear(GRID, p)


@given(images)
def test_bilinear_exact_on_lattice(img):
    vs, us = np.mgrid[0:img.height, 0:img.width]
    vals = sample_bilinear_many(img, us.ravel().astype(float), vs.ravel().astype(float))
    assert np.array_equal(vals, img.data.ravel().astype(float))


@given(images, st.floats(0, 1), st.floats(0, 1))
def test_bilinear_matches_hand_weights(img, fu, fv):
    u = fu * (img.width - 1)
    v = fv * (img.height - 1)
    u0, v0 = min(int(u), max(img.width - 2, 0)), min(int(v), max(img.height - 2, 0))
    u1, v1 = min(u0 + 1, img.width - 1), min(v0 + 1, img.height - 1)
    a, b = u - u0, v - v0
    d = img.data.astype(float)
    expected = ((1 - a) * (1 - b) * d[v0, u0] + a * (1 - b) * d[v0, u1]
                + (1 - a) * b * d[v1, u0] + a * b * d[v1, u1])
    assert sample_bilinear(img, (u, v)) == pytest.approx(expected, abs=1e-9)


def _affine(a, b, c, w=12, h=10):
    vs, us = np.mgrid[0:h, 0:w]
    return GrayImage(a * us + b * vs + c)


def test_gradient_examples():
    assert np.allclose(gradient(_affine(10, 0, 0, w=20), (5.3, 4.7)), (10, 0))
    assert np.allclose(gradient(GrayImage(np.full((8, 8), 77, dtype=np.uint8)), (3, 3)), (0, 0))
    assert np.allclose(gradient(_affine(1, 2, 0), (4, 4)), (1, 2))


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 100),
       st.floats(1, 9.999), st.floats(1, 7.999))
def test_gradient_exact_on_affine_fields(a, b, c, u, v):
    img = _affine(a, b, c)
    assert np.allclose(gradient(img, (u, v)), (a, b), atol=1e-9)


def test_gradient_border_error():
    img = _affine(1, 1, 0)
    for p in [(0.5, 3), (3, 8.5), (10.2, 3)]:
        with pytest.raises(OutOfBoundsError):
            gradient(img, p)
    assert gradient_many(img, [1.0, 10.0], [1.0, 8.0]).shape == (2, 2)
