"""Joint epipolar tracking: constrained point updates interleaved with pose refinement.

Each correspondence keeps a fixed point ``x`` in image A and an operating
point ``y`` in image B. Per outer iteration a local paraboloid is fitted at
``y``, the displacement ``v`` minimising it on the epipolar line of ``x`` is
solved in closed form, and the pose is moved one damped Gauss-Newton step on
the mean of the paraboloids evaluated at those constrained optima.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import quadfit
from .errors import (
    AllPointsCulledError,
    DegenerateLineError,
    IllConditionedError,
    InsufficientCorrespondencesError,
    SingularSystemError,
)
from .features import DenseDescriptorMap, in_descriptor_region
from .geometry import CameraIntrinsics, FundamentalMatrix, PoseHypothesis, fundamental_from_pose, retract
from .img import GrayImage, lattice_gradients
from .quadfit import Paraboloid

log = logging.getLogger(__name__)

DEGENERATE_WEIGHT = 0.1
MAX_CONDITION = 1e12
DAMPING_RETRIES = 8


@dataclass
class Correspondence:
    x: np.ndarray
    y: np.ndarray
    y0: np.ndarray | None = None
    v_opt: np.ndarray = field(default_factory=lambda: np.zeros(2))
    active: bool = True
    last_loss: float = math.nan

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(2)
        self.y = np.asarray(self.y, dtype=float).reshape(2)
        self.y0 = self.y.copy() if self.y0 is None else np.asarray(self.y0, dtype=float).reshape(2)
        self.v_opt = np.asarray(self.v_opt, dtype=float).reshape(2)

    @property
    def final_position(self) -> np.ndarray:
        return self.y + self.v_opt


@dataclass(frozen=True)
class StepStrategy:
    kind: str = "capped"     # "capped" (1 px cap) or "fractional"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("capped", "fractional"):
            raise ValueError(f"unknown step strategy {self.kind!r}")
        if self.kind == "fractional" and not 0.0 < self.alpha <= 1.0:
            raise ValueError("fractional step requires 0 < alpha <= 1")

    @classmethod
    def parse(cls, text: str) -> "StepStrategy":
        """``cap1`` or ``frac:<alpha>``."""
        text = text.strip()
        if text == "cap1":
            return cls("capped")
        if text.startswith("frac:"):
            return cls("fractional", float(text[5:]))
        raise ValueError(f"step strategy must be 'cap1' or 'frac:<alpha>', got {text!r}")

    def __str__(self):
        return "cap1" if self.kind == "capped" else f"frac:{self.alpha:g}"


@dataclass(frozen=True)
class JetConfig:
    residual_kind: str = "descriptor"
    window: int = 7
    step_strategy: StepStrategy = StepStrategy()
    convergence_eps: float = 1e-7
    max_outer_iterations: int = 30
    pose_step_damping: float = 1e-3
    finite_diff_h: float = 1e-6
    revert_points: bool = False

    def __post_init__(self):
        if self.residual_kind not in quadfit.KINDS:
            raise ValueError(f"residual_kind must be one of {quadfit.KINDS}")
        if self.convergence_eps <= 0 or self.pose_step_damping <= 0 or self.finite_diff_h <= 0:
            raise ValueError("convergence_eps, pose_step_damping and finite_diff_h must be positive")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.residual_kind != "geometric":
            quadfit.window_offsets(self.window)


@dataclass(frozen=True)
class IterationRecord:
    loss_before: float
    loss_after: float
    accepted: bool
    step_norm: float
    damping: float


@dataclass
class JetResult:
    pose: PoseHypothesis
    correspondences: list[Correspondence]
    total_loss: float
    iterations_used: int
    culled_count: int
    history: list[IterationRecord] = field(default_factory=list)
    refits: int = 0

    @property
    def accepted_losses(self) -> list[float]:
        """Pose-loss values at the start and after every accepted update, per iteration."""
        out = []
        for rec in self.history:
            out.append(rec.loss_before)
            if rec.accepted:
                out.append(rec.loss_after)
        return out


# --------------------------------------------------------------------------
# constrained point step


def constrained_steps(A, b, lines, ys):
    """Vectorised constrained minimisation.

    Minimises ``v^T A v + 2 v^T b`` subject to ``(y + v, 1) . line = 0`` for
    every row. Returns ``(v, status)`` where status is 0 for success, 1 for a
    degenerate line and 2 for a singular bordered system.
    """
    A = np.asarray(A, dtype=float).reshape(-1, 2, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    lines = np.asarray(lines, dtype=float).reshape(-1, 3)
    ys = np.asarray(ys, dtype=float).reshape(-1, 2)
    n = len(A)
    v = np.zeros((n, 2))
    status = np.zeros(n, dtype=np.int8)
    gn = np.hypot(lines[:, 0], lines[:, 1])
    bad_line = ~(gn >= 1e-12)
    status[bad_line] = 1
    good = ~bad_line
    if not np.any(good):
        return v, status
    g = lines[good, :2] / gn[good, None]
    h = -(ys[good, 0] * lines[good, 0] + ys[good, 1] * lines[good, 1] + lines[good, 2]) / gn[good]
    M = np.zeros((len(g), 3, 3))
    M[:, :2, :2] = A[good]
    M[:, :2, 2] = g
    M[:, 2, :2] = g
    rhs = np.concatenate([-b[good], h[:, None]], axis=1)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(M)
    singular = ~(cond <= MAX_CONDITION)
    solvable = ~singular
    sol = np.zeros((len(g), 3))
    if np.any(solvable):
        sol[solvable] = np.linalg.solve(M[solvable], rhs[solvable][..., None])[..., 0]
    idx = np.nonzero(good)[0]
    v[idx] = sol[:, :2]
    status[idx[singular]] = 2
    return v, status


def constrained_point_step(parab: Paraboloid, F, x, y) -> np.ndarray:
    """Displacement minimising ``parab`` subject to landing on the epipolar line of ``x``."""
    Fm = F.m if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    line = Fm @ np.array([x[0], x[1], 1.0])
    v, status = constrained_steps(parab.A_prime, parab.b, line, np.asarray(y, dtype=float))
    if status[0] == 1:
        raise DegenerateLineError(f"epipolar line of {tuple(x)} is degenerate")
    if status[0] == 2:
        raise SingularSystemError("bordered system is singular")
    return v[0]


# --------------------------------------------------------------------------
# array-level problem


class _Problem:
    """Paraboloids and points frozen for one pose update."""

    def __init__(self, K, xs, ys, A, b, c, degenerate, active, frozen_sum, n_total):
        self.K = K
        self.xs = xs
        self.ys = ys
        self.A = A
        self.b = b
        self.c = c
        self.active = active
        self.weights = np.where(degenerate, DEGENERATE_WEIGHT, 1.0)
        self.frozen_sum = frozen_sum
        self.n_total = n_total
        idx = np.nonzero(active)[0]
        self.idx = idx
        Aa = A[idx]
        # Q(v) = |L^T (v - v*)|^2 + q_min with A = L L^T
        self.L = np.linalg.cholesky(Aa)
        self.vstar = -np.linalg.solve(Aa, b[idx][..., None])[..., 0]
        self.qmin = c[idx] - np.einsum("ki,kij,kj->k", self.vstar, Aa, self.vstar)
        self.sqrt_w = np.sqrt(self.weights[idx])

    def vopt(self, pose):
        F = fundamental_from_pose(self.K, pose).m
        lines = np.concatenate([self.xs[self.idx], np.ones((len(self.idx), 1))], axis=1) @ F.T
        return constrained_steps(self.A[self.idx], self.b[self.idx], lines, self.ys[self.idx])

    def residuals(self, pose):
        v, status = self.vopt(pose)
        if np.any(status):
            return None
        r = np.einsum("kji,kj->ki", self.L, v - self.vstar)
        return (self.sqrt_w[:, None] * r).ravel()

    def loss_from_residuals(self, r):
        if r is None:
            return math.inf
        return float((r @ r + np.dot(self.weights[self.idx], self.qmin) + self.frozen_sum) / self.n_total)

    def loss(self, pose):
        return self.loss_from_residuals(self.residuals(pose))


def _jacobian(problem: _Problem, pose, r0, h):
    J = np.zeros((len(r0), 5))
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        rp = problem.residuals(retract(pose, e))
        rm = problem.residuals(retract(pose, -e))
        if rp is None or rm is None:
            continue
        J[:, i] = (rp - rm) / (2.0 * h)
    return J


def _lm_step(problem: _Problem, pose, damping, h):
    """One damped Gauss-Newton update. Returns ``(pose, record, next_damping)``."""
    r0 = problem.residuals(pose)
    if r0 is None:
        raise SingularSystemError("constrained step fails at the current pose")
    loss0 = problem.loss_from_residuals(r0)
    J = _jacobian(problem, pose, r0, h)
    H = J.T @ J
    g = J.T @ r0
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise IllConditionedError("non-finite normal equations")
    scale = np.maximum(np.diag(H), 1e-12 * max(1.0, float(np.max(np.diag(H)))))
    mu = damping
    for _ in range(DAMPING_RETRIES + 1):
        try:
            delta = -np.linalg.solve(H + mu * np.diag(scale), g)
        except np.linalg.LinAlgError:
            delta = None
        if delta is not None and np.all(np.isfinite(delta)) and np.linalg.norm(delta) > 0:
            candidate = retract(pose, delta)
            loss1 = problem.loss(candidate)
            if loss1 < loss0:
                rec = IterationRecord(loss0, loss1, True, float(np.linalg.norm(delta)), mu)
                return candidate, rec, max(mu / 10.0, 1e-12)
        mu *= 10.0
    return pose, IterationRecord(loss0, loss0, False, 0.0, mu), damping


# --------------------------------------------------------------------------
# list-level API


def _parab_arrays(parabs: Sequence[Paraboloid]):
    A = np.stack([p.A_prime for p in parabs]).astype(float)
    b = np.stack([p.b for p in parabs]).astype(float)
    c = np.array([p.c for p in parabs], dtype=float)
    deg = np.array([p.degenerate for p in parabs], dtype=bool)
    return A, b, c, deg


def _corr_arrays(corrs: Sequence[Correspondence]):
    xs = np.stack([c.x for c in corrs]).astype(float)
    ys = np.stack([c.y for c in corrs]).astype(float)
    active = np.array([c.active for c in corrs], dtype=bool)
    last = np.array([c.last_loss for c in corrs], dtype=float)
    return xs, ys, active, last


def pose_to_vopt(corrs: list[Correspondence], parabs: Sequence[Paraboloid], K: CameraIntrinsics,
                 pose: PoseHypothesis) -> list[np.ndarray]:
    """Constrained optimum for every active correspondence under ``pose``.

    Points whose step fails are deactivated in place; inactive entries keep
    their previous ``v_opt``.
    """
    xs, ys, active, _ = _corr_arrays(corrs)
    A, b, _, _ = _parab_arrays(parabs)
    F = fundamental_from_pose(K, pose).m
    lines = np.concatenate([xs, np.ones((len(xs), 1))], axis=1) @ F.T
    v, status = constrained_steps(A, b, lines, ys)
    out = []
    for i, corr in enumerate(corrs):
        if corr.active and status[i] == 0:
            corr.v_opt = v[i].copy()
        elif corr.active:
            log.debug("deactivating correspondence %d (status %d)", i, status[i])
            corr.active = False
        out.append(corr.v_opt.copy())
    return out


def _frozen(active, last, ever):
    culled = ever & ~active & np.isfinite(last)
    return float(last[culled].sum()), int(np.count_nonzero(ever & (active | np.isfinite(last))))


def _problem_from_lists(corrs, parabs, K):
    xs, ys, active, last = _corr_arrays(corrs)
    A, b, c, deg = _parab_arrays(parabs)
    A, _ = quadfit.project_psd(A)
    frozen_sum, n_total = _frozen(active, last, np.ones(len(corrs), dtype=bool))
    return _Problem(K, xs, ys, A, b, c, deg, active, frozen_sum, max(n_total, 1))


def pose_loss(corrs, parabs, K, pose) -> float:
    """Mean constrained paraboloid value; culled points add their frozen loss."""
    if not any(c.active for c in corrs):
        raise AllPointsCulledError("no active correspondences")
    return _problem_from_lists(corrs, parabs, K).loss(pose)


def optimize_pose_step(corrs, parabs, K, pose_in, damping: float = 1e-3, finite_diff_h: float = 1e-6
                       ) -> PoseHypothesis:
    """One accepted-or-rejected Levenberg-Marquardt update of the 5-DOF pose."""
    if sum(c.active for c in corrs) < 8:
        raise InsufficientCorrespondencesError("pose update needs at least 8 active correspondences")
    pose, _, _ = _lm_step(_problem_from_lists(corrs, parabs, K), pose_in, damping, finite_diff_h)
    return pose


def _step_arrays(ys, v, active, strategy: StepStrategy, width, height):
    step = np.zeros_like(v)
    if strategy.kind == "fractional":
        step = strategy.alpha * v
    else:
        norm = np.hypot(v[:, 0], v[:, 1])
        scale = np.where(norm < 1.0, 1.0, 1.0 / np.maximum(norm, 1e-300))
        step = v * scale[:, None]
    new = np.where(active[:, None], ys + step, ys)
    leaving = active & ~in_descriptor_region(width, height, new[:, 0], new[:, 1])
    return new, leaving


def step_keypoints(corrs: list[Correspondence], v_opts, strategy: StepStrategy, img_b_bounds):
    """Move active operating points towards their optima; cull those reaching the border."""
    width, height = img_b_bounds
    xs, ys, active, _ = _corr_arrays(corrs)
    v = np.asarray(v_opts, dtype=float).reshape(-1, 2)
    new, leaving = _step_arrays(ys, v, active, strategy, width, height)
    for i, corr in enumerate(corrs):
        if not corr.active:
            continue
        if leaving[i]:
            corr.active = False
            corr.v_opt = v[i] - (new[i] - corr.y)
        corr.y = new[i].copy()
    return corrs


# --------------------------------------------------------------------------
# main loop


class _Fitter:
    def __init__(self, cfg: JetConfig, img_a: GrayImage, img_b: GrayImage, xs, y0s, dmap_b=None):
        self.cfg = cfg
        self.img_a = img_a
        self.img_b = img_b
        self.xs = xs
        self.y0s = y0s
        self.count = 0
        if cfg.residual_kind == "descriptor":
            self.dmap_b = dmap_b or DenseDescriptorMap(img_b)
            dmap_a = DenseDescriptorMap(img_a)
            cells = np.rint(xs).astype(np.int64)
            ok = dmap_a.valid(cells[:, 0], cells[:, 1])
            self.ref = np.zeros((len(xs), 32), dtype=np.uint8)
            if np.any(ok):
                self.ref[ok] = dmap_a.get(cells[ok, 0], cells[ok, 1])
            self.ref_ok = ok
        elif cfg.residual_kind == "photometric":
            self.grad_b = lattice_gradients(img_b)

    def __call__(self, ys):
        self.count += 1
        kind = self.cfg.residual_kind
        if kind == "descriptor":
            A, b, c, deg, ok = quadfit.descriptor_fit_many(self.dmap_b, self.ref, ys, self.cfg.window)
            ok &= self.ref_ok
        elif kind == "photometric":
            A, b, c, deg, ok = quadfit.photometric_fit_many(self.img_a, self.img_b, self.xs, ys,
                                                           self.cfg.window, self.grad_b)
        else:
            # the circular loss stays anchored at the measured position
            A, b, c, deg, ok = quadfit.geometric_fit_many(len(ys), ys - self.y0s)
        return A, b, c, deg, ok


def _qvals(A, b, c, v):
    return np.einsum("ki,kij,kj->k", v, A, v) + 2.0 * np.einsum("ki,ki->k", v, b) + c


def run_jet(img_a: GrayImage, img_b: GrayImage, corrs: Sequence[Correspondence], K: CameraIntrinsics,
            pose0: PoseHypothesis, cfg: JetConfig | None = None, dmap_b: DenseDescriptorMap | None = None
            ) -> JetResult:
    """Alternate paraboloid refits, constrained point optima and pose updates.

    The input correspondences are not modified; the result carries copies.
    ``dmap_b`` may share a descriptor cache of ``img_b`` between runs.
    After the loop each active point either snaps onto its optimum
    (``y <- y + v``, ``v <- 0``) or, with ``revert_points``, returns to ``y0``
    with ``v`` set to the offset of the optimum from ``y0``. Either way
    ``y + v_opt`` is the final on-line position.
    """
    cfg = cfg or JetConfig()
    corrs = [replace(c, x=c.x.copy(), y=c.y.copy(), y0=c.y0.copy(), v_opt=c.v_opt.copy()) for c in corrs]
    n = len(corrs)
    if n == 0 or sum(c.active for c in corrs) < 8:
        raise InsufficientCorrespondencesError("run_jet needs at least 8 active correspondences")
    xs, ys, active, last = _corr_arrays(corrs)
    vopt = np.stack([c.v_opt for c in corrs])
    ever = active.copy()
    fit = _Fitter(cfg, img_a, img_b, xs, np.stack([c.y0 for c in corrs]), dmap_b)
    width, height = img_b.width, img_b.height
    pose = pose0
    damping = cfg.pose_step_damping
    history: list[IterationRecord] = []
    iterations = 0
    A = b = c = deg = None

    def cull(mask, why):
        nonlocal active
        if np.any(mask):
            log.debug("culling %d points: %s", np.count_nonzero(mask), why)
        active = active & ~mask

    def build_problem():
        if not np.any(active):
            raise AllPointsCulledError("all correspondences culled")
        frozen_sum, n_total = _frozen(active, last, ever)
        return _Problem(K, xs, ys, A, b, c, deg, active, frozen_sum, n_total)

    def solve_points(problem):
        v, status = problem.vopt(pose)
        ok_idx = problem.idx[status == 0]
        vopt[ok_idx] = v[status == 0]
        last[ok_idx] = _qvals(A[ok_idx], b[ok_idx], c[ok_idx], v[status == 0])
        failed = np.zeros(n, dtype=bool)
        failed[problem.idx[status != 0]] = True
        return failed

    while True:
        iterations += 1
        A, b, c, deg, ok = fit(ys)
        cull(active & ~ok, "paraboloid fit failed")
        problem = build_problem()
        failed = solve_points(problem)
        if np.any(failed):
            cull(failed, "constrained step failed")
            problem = build_problem()

        if np.count_nonzero(active) >= 8:
            pose, rec, damping = _lm_step(problem, pose, damping, cfg.finite_diff_h)
        else:
            loss = problem.loss(pose)
            rec = IterationRecord(loss, loss, False, 0.0, damping)
        history.append(rec)
        cull(solve_points(problem), "constrained step failed after pose update")

        if rec.step_norm < cfg.convergence_eps or iterations >= cfg.max_outer_iterations:
            break
        prev = ys
        ys, leaving = _step_arrays(ys, vopt, active, cfg.step_strategy, width, height)
        # keep y + v_opt at the frozen optimum for points culled by this step
        vopt[leaving] -= ys[leaving] - prev[leaving]
        cull(leaving, "moved into the border margin")
        if not np.any(active):
            raise AllPointsCulledError("all correspondences culled")

    final = ys + vopt
    counted = ever & (active | np.isfinite(last))
    total_loss = float(np.mean(last[counted])) if np.any(counted) else math.nan
    for i, corr in enumerate(corrs):
        corr.active = bool(active[i])
        corr.last_loss = float(last[i])
        if not active[i]:
            corr.y = ys[i].copy()
            corr.v_opt = vopt[i].copy()
        elif cfg.revert_points:
            corr.y = corr.y0.copy()
            corr.v_opt = final[i] - corr.y0
        else:
            corr.y = final[i].copy()
            corr.v_opt = np.zeros(2)
    culled = int(np.count_nonzero(ever & ~active))
    return JetResult(pose, corrs, total_loss, iterations, culled, history, fit.count)
