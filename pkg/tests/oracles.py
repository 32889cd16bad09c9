"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
from scipy.optimize import minimize_scalar


def random_psd(rng, lo=0.05, hi=5.0):
    """Random symmetric 2x2 matrix with eigenvalues in [lo, hi]."""
    th = rng.uniform(0, np.pi)
    V = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return V @ np.diag(rng.uniform(lo, hi, 2)) @ V.T


def line_search_step(A, b, line, y, span=50.0, samples=100_001):
    """Minimise ``v^T A v + 2 v^T b`` over ``{v : (y + v, 1) . line = 0}`` by brute force.

    The line is walked in ``samples`` steps over ``+-span`` px around the
    foot of ``y``, then the best sample is polished by golden-section search.
    """
    g = np.asarray(line[:2], dtype=float)
    n = np.linalg.norm(g)
    g = g / n
    h = -(line[0] * y[0] + line[1] * y[1] + line[2]) / n
    foot = h * g
    along = np.array([-g[1], g[0]])

    def q(s):
        v = foot[None, :] + np.atleast_1d(s)[:, None] * along[None, :]
        return np.einsum("ki,ij,kj->k", v, A, v) + 2 * v @ b

    ss = np.linspace(-span, span, samples)
    k = int(np.argmin(q(ss)))
    if k in (0, samples - 1):
        raise ValueError("minimum lies outside the searched span")
    res = minimize_scalar(lambda s: q(s)[0], bracket=(ss[k - 1], ss[k], ss[k + 1]), method="golden", tol=1e-12)
    return foot + res.x * along


def random_step_case(rng):
    """A PSD paraboloid, a line and an operating point whose constrained optimum the oracle can bracket."""
    while True:
        A = random_psd(rng, 0.1, 5.0)
        b = rng.normal(size=2)
        line = np.append(rng.normal(size=2), rng.normal(scale=20))
        y = rng.uniform(-5, 5, 2)
        try:
            return A, b, line, y, line_search_step(A, b, line, y)
        except ValueError:
            continue


def perpendicular_foot(line, y):
    """Displacement from ``y`` to the nearest point of ``line``."""
    g = np.asarray(line[:2], dtype=float)
    r = line[0] * y[0] + line[1] * y[1] + line[2]
    return -r * g / (g @ g)
