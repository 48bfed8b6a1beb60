"""Batched loss with analytic gradient in the 7 box parameters.

``BatchObjective`` evaluates :func:`weakgeo.losses.total_loss` for a stack
of candidate view-1 boxes ``P`` (shape ``(S, 7)``, rows
``(x, y, z, l, w, h, yaw)``) and returns the gradient of each row. It is the
workhorse of the fitter; :func:`loss_gradient` is the single-box front end.

Non-smooth points (AABB corner switches, GIoU coordinate ties, SmoothL1
knees, sign changes of the L1 corner differences) are tracked in an integer
*branch signature*: two parameter vectors with the same signature lie on the
same smooth piece of the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Z_EPS,
    Box3D,
    corners_from_params,
    corners_jacobian,
    project_xyz,
    transform_params,
    transform_params_jacobian,
)
from .labels import recover_direction
from .losses import (
    LossWeights,
    TargetObservation,
    e_proj,
    e_rot,
    giou_and_grad,
    heading_vector,
    smooth_l1_and_grad,
)


@dataclass
class ObjectiveValue:
    total: np.ndarray  # (S,)
    proj: np.ndarray
    con: np.ndarray
    rot: np.ndarray
    grad: np.ndarray | None  # (S, 7)
    signature: np.ndarray | None  # (S, k) int


@dataclass
class _View:
    K: tuple
    label: np.ndarray | None  # (4,)
    n_dir: np.ndarray | None  # (2,) unit
    R: np.ndarray | None = None  # transform applied to view-1 params
    t: np.ndarray | None = None


class BatchObjective:
    """Loss of view-1 box candidates for one target.

    Args:
        obs: labels and relative pose.
        weights: loss weights.
        box2: optional fixed view-2 box. Without it view 2 is tied to the
            candidate (``T_12 . box``) and ``E_con`` is identically zero;
            inconsistent targets then ignore view 2.
        z_eps: depth threshold; rows with a corner closer than this get an
            infinite loss.
    """

    def __init__(self, obs: TargetObservation, weights: LossWeights, box2: Box3D | None = None,
                 z_eps: float = Z_EPS):
        self.weights = weights
        self.z_eps = z_eps
        self.views: list[_View] = [self._make_view(obs.view1)]
        self.const_proj = 0.0
        self.const_rot = 0.0
        self.box2_corners = None
        self.T = (obs.T_12.rotation, obs.T_12.translation)
        if obs.view2 is not None:
            if box2 is None:
                if obs.consistent:
                    R, t = self.T
                    self.views.append(self._make_view(obs.view2, R, t))
            else:
                v2 = obs.view2
                if v2.box2d is not None:
                    self.const_proj = e_proj(v2.intrinsics, box2, v2.box2d, weights)
                if v2.direction is not None:
                    n = recover_direction(v2.intrinsics, v2.direction)
                    self.const_rot = e_rot(heading_vector(box2.yaw), n)
                if obs.consistent:
                    self.box2_corners = corners_from_params(box2.params)

    @staticmethod
    def _make_view(view, R=None, t=None) -> _View:
        K = view.intrinsics
        label = None if view.box2d is None else view.box2d.as_array()
        n_dir = None
        if view.direction is not None:
            n_dir = recover_direction(K, view.direction)
        return _View((K.f_x, K.f_y, K.o_x, K.o_y), label, n_dir, R, t)

    def __call__(self, P, grad: bool = True, signature: bool = False) -> ObjectiveValue:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        S = P.shape[0]
        w = self.weights
        proj = np.full(S, self.const_proj)
        rot = np.full(S, self.const_rot)
        con = np.zeros(S)
        valid = np.all(np.isfinite(P), axis=1) & np.all(P[:, 3:6] > 0, axis=1)
        g_proj = np.zeros((S, 7))
        g_rot = np.zeros((S, 7))
        g_con = np.zeros((S, 7))
        sigs = []

        for view in self.views:
            if view.R is None:
                Pv, Jt = P, None
            else:
                Pv = transform_params(view.R, view.t, P)
                Jt = transform_params_jacobian(view.R, P) if grad else None
                valid &= np.isfinite(Pv[:, 6])
            if view.label is not None:
                val, dval, sig = self._proj_term(view, Pv, grad, signature)
                valid &= np.isfinite(val)
                proj += val
                if grad:
                    g_proj += dval if Jt is None else np.einsum("sj,sjk->sk", dval, Jt)
                if signature:
                    sigs.append(sig)
            if view.n_dir is not None:
                yaw = Pv[:, 6]
                c, s = np.cos(yaw), np.sin(yaw)
                n0, n1 = view.n_dir
                cos = np.clip(n0 * c + n1 * s, -1.0, 1.0)
                rot += 1.0 - cos
                if grad:
                    dyaw = n0 * s - n1 * c
                    if Jt is not None:
                        dyaw = dyaw * Jt[:, 6, 6]
                    g_rot[:, 6] += dyaw

        if self.box2_corners is not None:
            R, t = self.T
            Pm = transform_params(R, t, P)
            valid &= np.isfinite(Pm[:, 6])
            diff = corners_from_params(Pm) - self.box2_corners
            con = np.mean(np.abs(diff), axis=(1, 2))
            if grad:
                Jm = np.einsum("snij,sjk->snik", corners_jacobian(Pm), transform_params_jacobian(R, P))
                g_con = np.einsum("sni,snik->sk", np.sign(diff), Jm) / 24.0
            if signature:
                sigs.append(np.sign(diff).reshape(S, -1).astype(np.int64))

        total = w.w_proj * proj + w.w_con * con + w.w_rot * rot
        total = np.where(valid, total, np.inf)
        G = None
        if grad:
            G = w.w_proj * g_proj + w.w_con * g_con + w.w_rot * g_rot
            G = np.where(valid[:, None], G, 0.0)
        sig = np.concatenate(sigs, axis=1) if signature and sigs else (
            np.zeros((S, 0), dtype=np.int64) if signature else None)
        return ObjectiveValue(total, proj, con, rot, G, sig)

    def _aabb(self, view: _View, Pv, grad):
        """Projected hull ``b`` (S, 4), its Jacobian (S, 4, 7), validity and argmin/max masks."""
        S = Pv.shape[0]
        f_x, f_y, o_x, o_y = view.K
        C = corners_from_params(Pv)
        X, Y, Z = C[..., 0], C[..., 1], C[..., 2]
        front = np.all(Z > self.z_eps, axis=1)
        Zs = np.where(front[:, None], Z, 1.0)
        u, v = project_xyz(f_x, f_y, o_x, o_y, X, Y, Zs)
        b = np.stack([u.min(1), v.min(1), u.max(1), v.max(1)], axis=1)
        masks = np.stack([u == b[:, 0:1], v == b[:, 1:2], u == b[:, 2:3], v == b[:, 3:4]], axis=1)
        db = None
        if grad:
            J = corners_jacobian(Pv)
            Zi = 1.0 / Zs
            du = f_x * (J[:, :, 0, :] - (X * Zi)[..., None] * J[:, :, 2, :]) * Zi[..., None]
            dv = f_y * (J[:, :, 1, :] - (Y * Zi)[..., None] * J[:, :, 2, :]) * Zi[..., None]
            mf = masks / masks.sum(axis=2, keepdims=True)
            db = np.empty((S, 4, 7))
            db[:, 0::2, :] = np.matmul(mf[:, 0::2, :], du)
            db[:, 1::2, :] = np.matmul(mf[:, 1::2, :], dv)
        return b, db, front, masks

    def _proj_term(self, view: _View, Pv, grad, signature):
        b, db, front, masks = self._aabb(view, Pv, grad)
        giou, dgiou = giou_and_grad(b, view.label)
        sl1, dsl1 = smooth_l1_and_grad(b, view.label, self.weights.gamma)
        lam = self.weights.lambda_l1
        val = (1.0 - giou) + lam * sl1.mean(axis=1)
        val = np.where(front, val, np.inf)

        dval = None
        if grad:
            dl_db = -dgiou + lam * dsl1 / 4.0
            dval = np.matmul(dl_db[:, None, :], db)[:, 0, :]

        sig = None
        if signature:
            pow2 = 1 << np.arange(8)
            tie_codes = (masks * pow2).sum(axis=2)
            d = b - view.label
            knee = (np.abs(d) > self.weights.gamma).astype(np.int64)
            inter_pos = np.stack(
                [np.minimum(b[:, 2], view.label[2]) - np.maximum(b[:, 0], view.label[0]) > 0,
                 np.minimum(b[:, 3], view.label[3]) - np.maximum(b[:, 1], view.label[1]) > 0],
                axis=1).astype(np.int64)
            sig = np.concatenate([tie_codes, np.sign(d).astype(np.int64), knee, inter_pos], axis=1)
        return val, dval, sig

    def residuals(self, P, grad: bool = True):
        """Least-squares surrogate of the loss: ``(r, J, valid)``.

        Per view, the four hull-coordinate errors divided by the label
        diagonal (scale-free like GIoU) and weighted by ``sqrt(w_proj)``; per
        direction label, ``sqrt(2 w_rot) sin(theta / 2)`` so that its square is
        ``w_rot * E_rot``. Only the tied two-view mode is supported.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        S = P.shape[0]
        w = self.weights
        rs, Js = [], []
        valid = np.all(np.isfinite(P), axis=1) & np.all(P[:, 3:6] > 0, axis=1)
        for view in self.views:
            if view.R is None:
                Pv, Jt = P, None
            else:
                Pv = transform_params(view.R, view.t, P)
                Jt = transform_params_jacobian(view.R, P) if grad else None
                valid &= np.isfinite(Pv[:, 6])
            if view.label is not None and w.w_proj > 0:
                b, db, front, _ = self._aabb(view, Pv, grad)
                lab = view.label
                scale = np.sqrt(w.w_proj) / max(np.hypot(lab[2] - lab[0], lab[3] - lab[1]), 1e-9)
                valid &= front
                rs.append(scale * (b - lab))
                if grad:
                    Jb = scale * db
                    Js.append(Jb if Jt is None else np.matmul(Jb, Jt))
            if view.n_dir is not None and w.w_rot > 0:
                yaw = Pv[:, 6]
                theta = np.remainder(yaw - np.arctan2(view.n_dir[1], view.n_dir[0]) + np.pi,
                                     2 * np.pi) - np.pi
                k = np.sqrt(2.0 * w.w_rot)
                rs.append((k * np.sin(0.5 * theta))[:, None])
                if grad:
                    Jr = np.zeros((S, 1, 7))
                    Jr[:, 0, 6] = 0.5 * k * np.cos(0.5 * theta)
                    Js.append(Jr if Jt is None else np.matmul(Jr, Jt))
        r = np.concatenate(rs, axis=1) if rs else np.zeros((S, 0))
        J = (np.concatenate(Js, axis=1) if Js else np.zeros((S, 0, 7))) if grad else None
        return r, J, valid


def loss_gradient(obs: TargetObservation, w: LossWeights, params, box2: Box3D | None = None):
    """Analytic gradient of :func:`total_loss` w.r.t. ``(x, y, z, l, w, h, yaw)``.

    Returns ``(gradient, report)``; ``report`` is ``["NonDifferentiablePoint"]``
    when ``params`` sits on a branch boundary of the loss (a subgradient is
    returned there), otherwise empty.
    """
    obj = BatchObjective(obs, w, box2=box2)
    out = obj(np.asarray(params, dtype=float)[None, :], grad=True, signature=True)
    report = ["NonDifferentiablePoint"] if at_branch_boundary(obj, params, out) else []
    return out.grad[0], report


def at_branch_boundary(obj: BatchObjective, params, out: ObjectiveValue | None = None,
                       rel: float = 1e-9) -> bool:
    """True if an infinitesimal move along some axis changes the branch signature."""
    params = np.asarray(params, dtype=float)
    if out is None:
        out = obj(params[None, :], grad=False, signature=True)
    h = rel * np.maximum(np.abs(params), 1.0)
    probes = np.concatenate([params + np.diag(h), params - np.diag(h)], axis=0)
    sig = obj(probes, grad=False, signature=True).signature
    return bool(np.any(sig != out.signature[0]))
