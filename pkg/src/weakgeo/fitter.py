"""Recover 3D boxes from 2D labels by direct optimization of the consistency loss.

Each target is fitted independently. Starts are placed along the depth
axis (the direction the projection loss cannot resolve): the 2D box center
is back-projected at ``n_starts`` log-spaced depths and the dims are sized
to the 2D box at that depth. All starts are optimized together as one
batch.

Optimization runs in two stages, both over the internal variables
``(x, y, z, log l, log w, log h, yaw)``:

1. Levenberg-Marquardt on the least-squares surrogate
   (:meth:`BatchObjective.residuals`): hull-coordinate errors scaled by the
   label diagonal plus the direction residual. Plain first-order descent
   stalls on the kinks of the GIoU/AABB loss; the surrogate has the same
   zero set and converges quickly into the basin. A first pass adds a weak
   pull of the log dims toward ``dims_prior``; a second pass without it
   returns to the zero set.
2. Gradient descent with Armijo backtracking on the true weighted loss.
   Accepted steps never increase the loss; the step grows after each
   accepted step and decays by ``step_decay`` after each rejection.

The loss handed to stage 2 is never above the start's own loss. The winner
is the start with the lowest true loss; starts within ``tol_loss`` of it
count as tied and the tie goes to the dims nearest ``dims_prior``.

Why a size prior at all: when a camera pair sees only one side face of a
box, every AABB extreme comes from that face and the far extent of the
footprint is unobserved. The loss then has a whole curve of exact zeros
(the hidden dimension trades against height and depth) and only outside
knowledge of object size can pick one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllStartsDiverged, NoLabels
from .geometry import Box3D
from .labels import recover_direction
from .losses import LossBreakdown, LossWeights, TargetObservation, total_loss
from .objective import BatchObjective, loss_gradient

_FREE_ALL = np.ones(7, dtype=bool)
_ARMIJO = 1e-4
_STEP_GROWTH = 1.5
_LM_MU0 = 1e-3
_LM_MU_MAX = 1e12


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 2000
    step: float = 0.05
    step_decay: float = 0.5
    tol_loss: float = 1e-10
    tol_step: float = 1e-8
    n_starts: int = 8
    depth_range: tuple[float, float] = (2.0, 80.0)
    fix_dims: bool = False
    dims_prior: tuple[float, float, float] = (3.9, 1.6, 1.56)
    dims_prior_weight: float = 1e-3
    lm_iters: int = 200

    def __post_init__(self):
        if self.max_iters <= 0:
            raise ValueError("max_iters must be > 0")
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise ValueError("depth_range must satisfy 0 < z_min <= z_max")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if not 0 < self.step_decay < 1:
            raise ValueError("step_decay must lie in (0, 1)")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.lm_iters < 0:
            raise ValueError("lm_iters must be >= 0")
        if self.dims_prior_weight < 0 or not all(d > 0 for d in self.dims_prior):
            raise ValueError("dims prior must be positive with a non-negative weight")


@dataclass
class FitResult:
    box: Box3D
    final: LossBreakdown
    iters: int
    converged: bool
    start_index: int
    trace: list[tuple] = field(default_factory=list, repr=False)

    def write_trace(self, path) -> None:
        """Per-iteration CSV: iter, proj, con, rot, total, step."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "proj", "con", "rot", "total", "step"])
            for row in self.trace:
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _to_physical(Q: np.ndarray) -> np.ndarray:
    P = Q.copy()
    P[:, 3:6] = np.exp(Q[:, 3:6])
    return P


def _to_internal(P: np.ndarray) -> np.ndarray:
    Q = np.array(P, dtype=float, copy=True)
    Q[:, 3:6] = np.log(Q[:, 3:6])
    return Q


def _label_view(obs: TargetObservation):
    for view in (obs.view1, obs.view2):
        if view is not None and view.box2d is not None:
            return view
    return None


def initial_starts(obs: TargetObservation, cfg: FitConfig) -> np.ndarray:
    """Start boxes ``(n_starts, 7)`` in physical parameters (view-1 frame)."""
    view = obs.view1 if obs.view1.box2d is not None else None
    if view is None:
        raise NoLabels("multi-start initialization needs a view-1 box label")
    K, b = view.intrinsics, view.box2d
    depths = np.geomspace(cfg.depth_range[0], cfg.depth_range[1], cfg.n_starts)
    if view.direction is not None:
        n = recover_direction(K, view.direction)
        yaws = [math.atan2(n[1], n[0])] * cfg.n_starts
    else:
        n_angles = max(cfg.n_starts // 2, 1)
        angles = [math.pi * k / n_angles for k in range(n_angles)]
        yaws = [angles[k % n_angles] for k in range(cfg.n_starts)]
    uc, vc = 0.5 * (b.u_min + b.u_max), 0.5 * (b.v_min + b.v_max)
    rows = []
    for z, yaw in zip(depths, yaws):
        height = max(b.v_max - b.v_min, 1.0) * z / K.f_y
        width = max(b.u_max - b.u_min, 1.0) * z / K.f_x
        if cfg.fix_dims:
            dims = cfg.dims_prior
        else:
            # Footprint width of an l x 0.4l rectangle seen at this yaw.
            length = width / (abs(math.cos(yaw)) + 0.4 * abs(math.sin(yaw)))
            dims = (length, 0.4 * length, height)
        rows.append([z * (uc - K.o_x) / K.f_x, z * (vc - K.o_y) / K.f_y, z, *dims, yaw])
    return np.array(rows)


class _Problem:
    """Batched objective in internal coordinates with a mask of free variables.

    ``prior_weight`` adds ``weight * (log dims - log dims_prior)`` rows to the
    least-squares surrogate only; :meth:`loss` is always the plain loss.
    """

    def __init__(self, obj: BatchObjective, free: np.ndarray, dims_prior=None, prior_weight=0.0):
        self.obj = obj
        self.free = free.astype(float)
        self.log_prior = None if dims_prior is None else np.log(np.asarray(dims_prior, dtype=float))
        self.prior_weight = prior_weight

    def loss(self, Q, grad=True):
        P = _to_physical(Q)
        out = self.obj(P, grad=grad)
        if grad:
            g = out.grad.copy()
            g[:, 3:6] *= P[:, 3:6]
            out.grad = g * self.free
        return out

    def residuals(self, Q, grad=True):
        P = _to_physical(Q)
        r, J, valid = self.obj.residuals(P, grad=grad)
        if grad:
            J = J.copy()
            J[:, :, 3:6] *= P[:, None, 3:6]
        if self.prior_weight > 0 and self.log_prior is not None:
            S = Q.shape[0]
            r = np.concatenate([r, self.prior_weight * (Q[:, 3:6] - self.log_prior)], axis=1)
            if grad:
                Jp = np.zeros((S, 3, 7))
                Jp[:, [0, 1, 2], [3, 4, 5]] = self.prior_weight
                J = np.concatenate([J, Jp], axis=1)
        if grad:
            J *= self.free
        return r, J, valid


def _lm_stage(prob: _Problem, Q, iters, tol_loss, keep_best=True):
    """Batched Levenberg-Marquardt.

    Returns the per-start best iterate by true loss (``keep_best``) or the
    last accepted iterate, and the number of iterations run.
    """
    S = Q.shape[0]
    r, J, valid = prob.residuals(Q)
    cost = np.where(valid, np.sum(r * r, axis=1), np.inf)
    best_Q = Q.copy()
    best = prob.loss(Q, grad=False).total.copy()
    mu = np.full(S, _LM_MU0)
    active = np.isfinite(cost) & ((best > tol_loss) | (not keep_best))
    n_done = 0
    eye = np.eye(7)
    fixed = np.diag(1.0 - prob.free)
    for n_done in range(1, iters + 1):
        if not active.any():
            n_done -= 1
            break
        A = np.matmul(np.swapaxes(J, 1, 2), J)
        g = np.matmul(np.swapaxes(J, 1, 2), r[:, :, None])[:, :, 0]
        diag = np.diagonal(A, axis1=1, axis2=2)
        damp = mu[:, None, None] * (diag[:, :, None] * eye + 1e-9 * eye)
        delta = -np.linalg.solve(A + damp + fixed, g[:, :, None])[:, :, 0]
        delta *= prob.free
        delta[~active] = 0.0
        trial = Q + delta
        r_t, J_t, valid_t = prob.residuals(trial)
        cost_t = np.where(valid_t, np.sum(r_t * r_t, axis=1), np.inf)
        accept = active & (cost_t < cost)
        Q = np.where(accept[:, None], trial, Q)
        r = np.where(accept[:, None], r_t, r)
        J = np.where(accept[:, None, None], J_t, J)
        cost = np.where(accept, cost_t, cost)
        mu = np.where(accept, np.maximum(mu / 3.0, 1e-12), mu * 4.0)
        if accept.any():
            f = prob.loss(Q, grad=False).total
            better = accept & (f < best)
            best = np.where(better, f, best)
            best_Q = np.where(better[:, None], Q, best_Q)
        small = np.abs(delta).max(axis=1) < 1e-14
        active &= (mu < _LM_MU_MAX) & ~(accept & small)
        if keep_best:
            active &= best > tol_loss
    return (best_Q if keep_best else Q), n_done


def _gd_stage(prob: _Problem, Q, cfg: FitConfig, iters, trace_rows):
    """Monotone gradient descent with Armijo backtracking on the true loss."""
    S = Q.shape[0]
    out = prob.loss(Q)
    f, g = out.total.copy(), out.grad
    step = np.full(S, cfg.step)
    active = np.isfinite(f) & (f > cfg.tol_loss)
    stalled = np.zeros(S, dtype=bool)
    n_done = 0
    for n_done in range(1, iters + 1):
        if not active.any():
            n_done -= 1
            break
        gg = np.sum(g * g, axis=1)
        trial = Q - step[:, None] * g
        out_t = prob.loss(trial, grad=False)
        accept = active & (out_t.total <= f - _ARMIJO * step * gg) & (out_t.total < f)
        if accept.any():
            Q = np.where(accept[:, None], trial, Q)
            out_n = prob.loss(Q)
            f = np.where(accept, out_n.total, f)
            g = np.where(accept[:, None], out_n.grad, g)
            for k in ("proj", "con", "rot"):
                setattr(out, k, np.where(accept, getattr(out_n, k), getattr(out, k)))
        step = np.where(accept, step * _STEP_GROWTH, np.where(active, step * cfg.step_decay, step))
        trace_rows.append((out.proj.copy(), out.con.copy(), out.rot.copy(), f.copy(), step.copy()))
        stalled |= active & (step < cfg.tol_step)
        active &= (f > cfg.tol_loss) & (step >= cfg.tol_step) & (gg > 0)
    return Q, f, n_done, stalled


def _optimize(obs, w, P0, cfg: FitConfig, free: np.ndarray):
    obj = BatchObjective(obs, w)
    prob = _Problem(obj, free)
    Q0 = _to_internal(P0)
    f0 = prob.loss(Q0, grad=False).total
    if np.all(f0 <= cfg.tol_loss):
        return P0.copy(), f0, 0, np.ones(len(f0), dtype=bool), [], 0
    # Trial steps may overflow (huge log dims); they come back non-finite and are rejected.
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_stages(prob, obj, free, Q0, f0, cfg)


def _run_stages(prob, obj, free, Q0, f0, cfg: FitConfig):
    Q = Q0
    lm_iters = 0
    if cfg.dims_prior_weight > 0 and free[3:6].any():
        prior = _Problem(obj, free, cfg.dims_prior, cfg.dims_prior_weight)
        Q, lm_iters = _lm_stage(prior, Q, min(cfg.lm_iters, cfg.max_iters), cfg.tol_loss, keep_best=False)
    Q, n = _lm_stage(prob, Q, min(cfg.lm_iters, cfg.max_iters - lm_iters), cfg.tol_loss)
    lm_iters += n
    # The prior pass may leave the zero set; never hand back worse than the start.
    f1 = prob.loss(Q, grad=False).total
    Q = np.where((f0 <= f1)[:, None], Q0, Q)
    trace_rows = []
    gd_budget = max(cfg.max_iters - lm_iters, 0)
    Q, f, gd_iters, stalled = _gd_stage(prob, Q, cfg, gd_budget, trace_rows)
    converged = (f <= cfg.tol_loss) | stalled
    return _to_physical(Q), f, lm_iters + gd_iters, converged, trace_rows, lm_iters


def fit(obs: TargetObservation, w: LossWeights = LossWeights(), cfg: FitConfig = FitConfig(),
        init: Box3D | None = None) -> FitResult:
    """Fit the view-1 box of one target from its 2D labels.

    Args:
        obs: labels; view 2 is used (tied through ``T_12``) when present and
            the target is consistent.
        w: loss weights.
        cfg: optimizer settings.
        init: optional single start replacing the multi-start set.

    Raises:
        NoLabels: no 2D box label in any view.
        AllStartsDiverged: every start ended with a non-finite loss.
    """
    if not obs.has_labels:
        raise NoLabels("observation has no 2D box label")
    P0 = initial_starts(obs, cfg) if init is None else init.params[None, :]
    free = _FREE_ALL.copy()
    if cfg.fix_dims:
        free[3:6] = False
    P, f, iters, converged, trace_rows, offset = _optimize(obs, w, P0, cfg, free)
    if not np.any(np.isfinite(f)):
        raise AllStartsDiverged("no start produced a finite loss")
    k = _select_start(P, f, cfg, free)
    box = Box3D.from_params(P[k])
    final = total_loss(obs, w, box)
    trace = [(offset + i + 1, r[0][k], r[1][k], r[2][k], r[3][k], r[4][k]) for i, r in enumerate(trace_rows)]
    return FitResult(box, final, iters, bool(converged[k]), k, trace)


def _select_start(P, f, cfg: FitConfig, free) -> int:
    """Lowest loss wins; starts within ``tol_loss`` of it are tied and, when the
    dims are free, the tie goes to the dims closest to ``dims_prior`` (log scale).

    Two views can leave a whole family of exact solutions (one dimension of
    the footprint unobserved), so the loss alone cannot choose among them.
    """
    f = np.where(np.isfinite(f), f, np.inf)
    k = int(np.argmin(f))
    if cfg.dims_prior_weight <= 0 or not free[3:6].any():
        return k
    tied = np.flatnonzero(f <= f[k] + cfg.tol_loss)
    dist = np.sum((np.log(P[tied, 3:6]) - np.log(cfg.dims_prior)) ** 2, axis=1)
    return int(tied[np.argmin(dist)])


def scale_box(box: Box3D, factor: float) -> Box3D:
    """Scale a box about the view-1 camera center (same view-1 projection)."""
    return Box3D(tuple(factor * c for c in box.center), tuple(factor * d for d in box.dims), box.yaw)


def depth_sweep(obs: TargetObservation, w: LossWeights, depths, cfg: FitConfig = FitConfig(),
                two_view: bool = False) -> list[tuple[float, float]]:
    """Minimum achievable loss with the box center depth pinned to each value.

    Single-view mode (the default) drops view 2 and zeroes the direction and
    multi-view weights, leaving only the projection loss. ``two_view=True``
    keeps view 2 (tied through ``T_12``) with the projection and multi-view
    weights and holds yaw at the heading recovered from the view-1 direction
    label (free if there is none). With a horizontal baseline both views see
    the same image rows, so a free yaw would leave as many unknowns as
    independent constraints at every pinned depth.

    Each depth is seeded by scaling a free fit of the same problem about the
    camera center, which keeps the view-1 projection unchanged, then refined
    with z held fixed.
    """
    depths = [float(z) for z in depths]
    if not depths:
        return []
    free = _FREE_ALL.copy()
    free[2] = False
    if cfg.fix_dims:
        free[3:6] = False
    if two_view:
        if obs.view2 is None:
            raise ValueError("two-view sweep needs a second view")
        sub, ws = obs, LossWeights(w.lambda_l1, w.gamma, w.w_proj, w.w_con, 0.0)
        anchor = fit(obs, w, cfg).box
        yaw = anchor.yaw
        if obs.view1.direction is not None:
            n = recover_direction(obs.view1.intrinsics, obs.view1.direction)
            yaw = math.atan2(n[1], n[0])
            free[6] = False
    else:
        sub, ws = obs.single_view(), LossWeights(w.lambda_l1, w.gamma, w.w_proj, 0.0, 0.0)
        anchor = fit(sub, ws, cfg).box
        yaw = anchor.yaw
    P0 = np.array([scale_box(anchor, z / anchor.center[2]).params for z in depths])
    P0[:, 6] = yaw
    _, f, _, _, _, _ = _optimize(sub, ws, P0, cfg, free)
    return list(zip(depths, (float(v) for v in f)))


@dataclass
class GradientCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float
    nondifferentiable: list[int]  # parameter indices whose FD stencil crosses a kink
    report: list[str]


def gradient_check(obs: TargetObservation, w: LossWeights, box: Box3D, step: float = 1e-5,
                   box2: Box3D | None = None, floor: float = 1e-6,
                   scale_floor: float = 1e-3) -> GradientCheckReport:
    """Compare the analytic gradient with central differences of :func:`total_loss`.

    Relative error per parameter is ``|a - n| / max(|a|, |n|, floor, scale_floor * max|a|)``.
    The last term keeps components that are zero analytically from being
    judged against pure rounding noise of the difference quotient, which is
    about ``eps * loss / step`` and so grows with the loss value.
    Parameters whose stencil ``p +- step`` crosses a branch boundary are listed
    in ``nondifferentiable`` and excluded from ``max_rel_error``.
    """
    p = box.params
    analytic, report = loss_gradient(obs, w, p, box2=box2)
    obj = BatchObjective(obs, w, box2=box2)
    base_sig = obj(p[None, :], grad=False, signature=True).signature[0]
    steps = step * np.eye(7)
    sig = obj(np.concatenate([p + steps, p - steps]), grad=False, signature=True).signature
    crossed = np.any(sig != base_sig, axis=1)
    bad = [j for j in range(7) if crossed[j] or crossed[7 + j]]
    numeric = np.zeros(7)
    for j in range(7):
        e = steps[j]
        fp = total_loss(obs, w, Box3D.from_params(p + e), box2).total
        fm = total_loss(obs, w, Box3D.from_params(p - e), box2).total
        numeric[j] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                       max(floor, scale_floor * float(np.abs(analytic).max())))
    rel = np.abs(analytic - numeric) / denom
    good = [j for j in range(7) if j not in bad]
    max_rel = float(rel[good].max()) if good else 0.0
    if bad and "NonDifferentiablePoint" not in report:
        report = report + ["NonDifferentiablePoint"]
    return GradientCheckReport(analytic, numeric, rel, max_rel, bad, report)
