import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetpose.errors import InsufficientSamplesError, OutOfBoundsError, RankDeficientError
from jetpose.features import DescriptorField
from jetpose.img import GrayImage, gradient_many, sample_bilinear_many
from jetpose.quadfit import (
    PSD_EPS,
    Paraboloid,
    QuadSurface,
    descriptor_backend_fit,
    fit_quadratic,
    geometric_backend_fit,
    photometric_backend_fit,
    photometric_terms_many,
    project_psd,
    quad_to_paraboloid,
    window_offsets,
)

seeds = st.integers(0, 2**32 - 1)
coefs = st.lists(st.floats(-50, 50), min_size=6, max_size=6)


def grid(n):
    r = np.arange(n) - n // 2
    v2, v1 = np.meshgrid(r, r, indexing="ij")
    return np.stack([v1.ravel(), v2.ravel()], axis=1).astype(float)


def lstsq_oracle(offsets, z):
    """Least squares through an explicitly built monomial basis."""
    x1, x2 = offsets[:, 0], offsets[:, 1]
    basis = np.column_stack([x1 ** 2, x2 ** 2, x1 * x2, x1, x2, np.ones_like(x1)])
    return np.linalg.lstsq(basis, z, rcond=None)[0]


def test_fit_quadratic_examples():
    g = grid(3)
    q = fit_quadratic(g, g[:, 0] ** 2 + g[:, 1] ** 2)
    assert np.allclose(q.as_vector(), [1, 1, 0, 0, 0, 0], atol=1e-10)
    q = fit_quadratic([(tuple(o), 7.0) for o in g])
    assert np.allclose(q.as_vector(), [0, 0, 0, 0, 0, 7], atol=1e-10)
    g = grid(5)
    z = (g[:, 0] - 1) ** 2
    q = fit_quadratic(g, z)
    assert np.allclose(q.as_vector(), [1, 0, 0, -2, 0, 1], atol=1e-10)
    assert np.allclose(q.as_vector(), lstsq_oracle(g, z), atol=1e-10)


def test_fit_quadratic_rank_deficient():
    with pytest.raises(RankDeficientError):
        fit_quadratic(grid(3)[:5], np.zeros(5))
    # nine samples on a single line cannot pin down a 2-D quadratic
    line = np.stack([np.arange(9.0), 2 * np.arange(9.0)], axis=1)
    with pytest.raises(RankDeficientError):
        fit_quadratic(line, np.arange(9.0))


@given(seeds)
def test_fit_matches_lstsq_oracle_on_noisy_samples(seed):
    rng = np.random.default_rng(seed)
    g = grid(7)
    z = rng.normal(size=len(g)) * 10
    assert np.allclose(fit_quadratic(g, z).as_vector(), lstsq_oracle(g, z), atol=1e-9)


@pytest.mark.parametrize("window", [3, 5, 7, 15])
def test_exact_recovery_for_every_window(window):
    rng = np.random.default_rng(window)
    offs = window_offsets(window)
    assert len(offs) == window * window
    for _ in range(100):
        a = rng.uniform(-10, 10, 6)
        q0 = QuadSurface.from_vector(a)
        z = np.array([q0(o) for o in offs])
        q = fit_quadratic(offs, z)
        resid = np.array([q(o) for o in offs]) - z
        assert np.max(np.abs(resid)) < 1e-9
        assert np.allclose(q.as_vector(), a, atol=1e-9)


@given(coefs, st.tuples(st.floats(-20, 20), st.floats(-20, 20)))
def test_matrix_form_reproduces_f(a, x):
    q = QuadSurface.from_vector(a)
    xh = np.array([x[0], x[1], 1.0])
    assert xh @ q.matrix @ xh == pytest.approx(q(x), rel=1e-12, abs=1e-9)
    assert np.allclose(q.matrix, q.matrix.T)


def test_quad_to_paraboloid_examples():
    p = quad_to_paraboloid(QuadSurface(1, 1, 0, 0, 0, 0))
    assert np.allclose(p.A_prime, np.eye(2)) and np.allclose(p.b, 0) and p.c == 0 and not p.degenerate
    p = quad_to_paraboloid(QuadSurface(-1, 0, 0, 0, 0, 0))
    assert p.degenerate
    assert np.allclose(p.A_prime, PSD_EPS * np.eye(2))
    p = quad_to_paraboloid(QuadSurface(1, 0, 0, -2, 0, 1))
    assert p.degenerate
    assert np.allclose(p.A_prime, [[1, 0], [0, PSD_EPS]])
    assert np.allclose(p.b, [-1, 0]) and p.c == pytest.approx(1.0)
    # the unconstrained minimiser lies at v1 = 1; compare with a dense scan along v1
    ts = np.linspace(-5, 5, 100_001)
    vals = [p((t, 0.0)) for t in ts[::100]]
    assert p.minimizer()[0] == pytest.approx(1.0)
    assert ts[::100][int(np.argmin(vals))] == pytest.approx(1.0, abs=0.01)


@given(coefs, st.tuples(st.floats(-5, 5), st.floats(-5, 5)), st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_recentred_paraboloid_equals_surface(a, op, v):
    q = QuadSurface.from_vector(a)
    A = np.array([[a[0], a[2] / 2], [a[2] / 2, a[1]]])
    p = quad_to_paraboloid(q, op)
    raw = Paraboloid(A, p.b, p.c)
    assert raw(v) == pytest.approx(q(np.add(op, v)), rel=1e-10, abs=1e-8)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_psd_projection(abc):
    A = np.array([[abc[0], abc[1]], [abc[1], abc[2]]])
    P, clamped = project_psd(A)
    assert np.allclose(P, P.T, atol=1e-12)
    # reassembling V diag(w) V^T costs a few ulps of the largest eigenvalue
    assert np.linalg.eigvalsh(P).min() >= PSD_EPS - 1e-14 * max(1.0, np.abs(A).max())
    if not clamped:
        assert np.array_equal(P, A)
    else:
        assert np.linalg.eigvalsh(A).min() < PSD_EPS


# -- descriptor backend


def planted_field(fn, half_width=5, center=(40, 40)):
    """Field whose cell at offset o sits exactly ``fn(o)`` bits away from the zero descriptor."""
    f = DescriptorField(center, half_width, np.zeros(((2 * half_width + 1) ** 2, 32), dtype=np.uint8),
                        np.ones((2 * half_width + 1) ** 2, dtype=bool))
    bits = np.zeros((len(f.grid), 256), dtype=np.uint8)
    for i, o in enumerate(f.offsets()):
        bits[i, :int(fn(o))] = 1
    grid = np.packbits(bits, axis=1, bitorder="little")
    return DescriptorField(center, half_width, grid, f.valid_mask)


def test_descriptor_flat_field_is_degenerate():
    f = planted_field(lambda o: 0)
    p = descriptor_backend_fit(f, np.zeros(32, np.uint8), (40, 40), 7)
    assert p.degenerate
    assert np.allclose(p.A_prime, PSD_EPS * np.eye(2)) and np.allclose(p.b, 0) and abs(p.c) < 1e-10


def test_descriptor_planted_bowl():
    f = planted_field(lambda o: 4 * (o[0] ** 2 + o[1] ** 2))
    ref = np.zeros(32, np.uint8)
    p = descriptor_backend_fit(f, ref, (40, 40), 7)
    assert np.allclose(p.A_prime, 4 * np.eye(2), atol=1e-9) and np.allclose(p.b, 0, atol=1e-9)
    # fractional operating point: the model is re-centred on it
    p = descriptor_backend_fit(f, ref, (41.3, 39.8), 5)
    assert p((0.0, 0.0)) == pytest.approx(4 * (1.3 ** 2 + 0.2 ** 2))
    assert np.allclose(p.minimizer(), [-1.3, 0.2])


def test_descriptor_backend_errors():
    f = planted_field(lambda o: 1, half_width=3)
    ref = np.zeros(32, np.uint8)
    with pytest.raises(ValueError):
        descriptor_backend_fit(f, ref, (40, 40), 9)
    with pytest.raises(OutOfBoundsError):
        descriptor_backend_fit(f, ref, (42, 40), 5)
    sparse = DescriptorField(f.center, 3, f.grid, np.arange(49) < 5)
    with pytest.raises(InsufficientSamplesError):
        descriptor_backend_fit(sparse, ref, (40, 40), 7)


# -- photometric backend


def gaussian(window):
    o = window_offsets(window).astype(float)
    w = np.exp(-(o ** 2).sum(1) / (2 * (window / 2) ** 2))
    return o, w / w.sum()


def weighted_ssd(img_a, img_b, x, y, window):
    o, w = gaussian(window)
    ia = sample_bilinear_many(img_a, x[0] + o[:, 0], x[1] + o[:, 1])
    ib = sample_bilinear_many(img_b, y[0] + o[:, 0], y[1] + o[:, 1])
    return float(w @ (ia - ib) ** 2)


def wavy(shift=0.0, w=64, h=64):
    vs, us = np.mgrid[0:h, 0:w].astype(float)
    u = us - shift
    return GrayImage(np.rint(128 + 60 * np.sin(0.31 * u + 0.2 * vs) + 50 * np.cos(0.23 * vs - 0.11 * u)))


def affine_image(a, b, c, w=30, h=30):
    vs, us = np.mgrid[0:h, 0:w]
    return GrayImage(a * us + b * vs + c)


def test_photometric_identity_pair():
    img = wavy()
    x = np.array([30.0, 30.0])
    p = photometric_backend_fit(img, img, x, x, 7)
    assert np.allclose(p.b, 0) and p.c == 0
    o, w = gaussian(7)
    g = gradient_many(img, x[0] + o[:, 0], x[1] + o[:, 1])
    assert np.allclose(p.A_prime, np.einsum("m,mi,mj->ij", w, g, g), atol=1e-8)


def test_photometric_constant_target_is_degenerate():
    flat = GrayImage(np.full((40, 40), 100, np.uint8))
    p = photometric_backend_fit(wavy(w=40, h=40), flat, (20, 20), (20, 20), 7)
    assert p.degenerate and np.allclose(p.A_prime, PSD_EPS * np.eye(2))


def test_photometric_half_pixel_shift_matches_ssd_search():
    a, b = wavy(), wavy(0.5)
    x = np.array([32.0, 30.0])
    p = photometric_backend_fit(a, b, x, x, 7)
    v = p.minimizer()
    assert np.hypot(v[0] - 0.5, v[1]) < 0.1
    steps = np.arange(-100, 101) * 0.01
    best = min(((weighted_ssd(a, b, x, x + (du, dv), 7), du, dv) for du in steps[::5] for dv in steps[::5]))
    fine = np.arange(-5, 6) * 0.01
    best = min((weighted_ssd(a, b, x, x + (best[1] + du, best[2] + dv), 7), best[1] + du, best[2] + dv)
               for du in fine for dv in fine)
    assert np.hypot(v[0] - best[1], v[1] - best[2]) < 0.1


@given(st.integers(-2, 2), st.integers(-2, 2), st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
       st.tuples(st.floats(-1, 1), st.floats(-1, 1)))
def test_photometric_exact_on_affine_images(ga, gb, d, v):
    img = affine_image(ga, gb, 128)
    x = np.array([20.0, 19.0])
    y = x + d
    A, b, c, ok = photometric_terms_many(img, img, [x], [y], 5)
    assert ok[0]
    # structure tensor of a constant gradient, weights summing to one
    assert np.allclose(A[0], [[ga * ga, ga * gb], [ga * gb, gb * gb]], atol=1e-8)
    # the expansion is exact for affine intensities: Q(v) equals the weighted SSD at y + v
    q = Paraboloid(A[0], b[0], float(c[0]))
    assert q(v) == pytest.approx(weighted_ssd(img, img, x, y + v, 5), abs=1e-8)


def test_photometric_out_of_bounds():
    img = wavy(w=30, h=30)
    with pytest.raises(OutOfBoundsError):
        photometric_backend_fit(img, img, (2, 15), (15, 15), 7)
    with pytest.raises(OutOfBoundsError):
        photometric_backend_fit(img, img, (15, 15), (26.5, 15), 7)


def test_photometric_deterministic():
    a, b = wavy(), wavy(0.5)
    p1 = photometric_backend_fit(a, b, (30, 30), (30.2, 29.9), 5)
    p2 = photometric_backend_fit(a, b, (30, 30), (30.2, 29.9), 5)
    assert np.array_equal(p1.A_prime, p2.A_prime) and np.array_equal(p1.b, p2.b) and p1.c == p2.c


# -- geometric backend


def test_geometric_backend():
    p = geometric_backend_fit((12.5, 7.0))
    assert np.array_equal(p.A_prime, np.eye(2)) and not p.b.any() and p.c == 0
    assert p((3, 4)) == 25


def test_window_validation():
    for bad in (1, 2, 4, 0):
        with pytest.raises(ValueError):
            window_offsets(bad)
