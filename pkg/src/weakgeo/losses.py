"""Projection, multi-view and direction consistency losses.

Per target and per view the projection loss is::

    E_proj = (1 - GIoU(b, y_box)) + lambda * mean_i SmoothL1(b_i, y_i; gamma)

where ``b`` is the projected axis-aligned hull of the box corners. The
multi-view loss ``E_con`` is the mean absolute difference of the 24 corner
coordinates of ``T_12 . B_1`` and ``B_2``; the direction loss ``E_rot`` is
one minus the cosine between the predicted heading and the heading
recovered from the 2D direction label.

``total_loss`` sums projection and direction terms over views, adds the
multi-view term for consistent targets and weights the three.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ZeroLengthDirection
from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    RigidTransform,
    box_corners,
    heading_vector,
    project_box_to_aabb,
    transform_box,
)
from .labels import DirectionLabel2D, recover_direction


@dataclass(frozen=True)
class LossWeights:
    """Loss hyper-parameters.

    ``gamma`` is the SmoothL1 soft margin in pixels, ``lambda_l1`` balances the
    SmoothL1 term against GIoU.
    """

    lambda_l1: float = 0.05
    gamma: float = 8.0
    w_proj: float = 1.0
    w_con: float = 1.0
    w_rot: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    _JSON_KEYS = {"lambda_l1": "lambda_l1", "gamma_px": "gamma", "w_proj": "w_proj",
                  "w_con": "w_con", "w_rot": "w_rot"}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(cls._JSON_KEYS)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{cls._JSON_KEYS[k]: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, attr) for k, attr in self._JSON_KEYS.items()}


@dataclass(frozen=True)
class LossBreakdown:
    proj: float
    con: float
    rot: float
    total: float

    @classmethod
    def combine(cls, proj, con, rot, w: LossWeights) -> "LossBreakdown":
        return cls(proj, con, rot, w.w_proj * proj + w.w_con * con + w.w_rot * rot)


@dataclass(frozen=True)
class ViewObservation:
    intrinsics: CameraIntrinsics
    box2d: Box2D | None
    direction: DirectionLabel2D | None = None


@dataclass(frozen=True)
class TargetObservation:
    """Everything known about one object: labels in view 1 (and 2), and ``T_12``.

    ``T_12`` maps view-1 camera coordinates into view-2 camera coordinates.
    """

    view1: ViewObservation
    view2: ViewObservation | None = None
    T_12: RigidTransform = field(default_factory=RigidTransform.identity)
    consistent: bool = True
    track_id: object = 0

    def single_view(self) -> "TargetObservation":
        return replace(self, view2=None)

    @property
    def has_labels(self) -> bool:
        return any(v is not None and v.box2d is not None for v in (self.view1, self.view2))


# ---------------------------------------------------------------------------
# Primitive losses


def _step(x):
    """d max(a, b) / d a as a function of ``a - b``; ties split evenly."""
    return np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))


def giou_and_grad(a, b):
    """GIoU of boxes ``a`` and ``b`` (``(..., 4)``) and its gradient w.r.t. ``a``.

    At coordinate ties the min/max derivatives are split evenly, which makes
    the gradient vanish at perfect overlap.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2, a3 = (a[..., i] for i in range(4))
    b0, b1, b2, b3 = (b[..., i] for i in range(4))

    ix0, iy0 = np.maximum(a0, b0), np.maximum(a1, b1)
    ix1, iy1 = np.minimum(a2, b2), np.minimum(a3, b3)
    iw, ih = np.maximum(ix1 - ix0, 0.0), np.maximum(iy1 - iy0, 0.0)
    inter = iw * ih
    wa, ha = a2 - a0, a3 - a1
    area_a = wa * ha
    area_b = (b2 - b0) * (b3 - b1)
    union = area_a + area_b - inter
    cw = np.maximum(a2, b2) - np.minimum(a0, b0)
    ch = np.maximum(a3, b3) - np.minimum(a1, b1)
    hull = cw * ch

    identical = (a0 == b0) & (a1 == b1) & (a2 == b2) & (a3 == b3)
    pos_u = union > 0
    pos_c = hull > 0
    safe_u = np.where(pos_u, union, 1.0)
    safe_c = np.where(pos_c, hull, 1.0)
    iou = np.where(pos_u, inter / safe_u, np.where(identical, 1.0, 0.0))
    giou = iou - np.where(pos_c, (hull - union) / safe_c, 0.0)

    # d inter / d a
    ow, oh = (ix1 - ix0 > 0).astype(float), (iy1 - iy0 > 0).astype(float)
    d_inter = np.stack(
        [
            -ih * ow * _step(a0 - b0),
            -iw * oh * _step(a1 - b1),
            ih * ow * _step(b2 - a2),
            iw * oh * _step(b3 - a3),
        ],
        axis=-1,
    )
    d_area = np.stack([-ha, -wa, ha, wa], axis=-1)
    d_union = d_area - d_inter
    d_hull = np.stack(
        [
            -ch * _step(b0 - a0),
            -cw * _step(b1 - a1),
            ch * _step(a2 - b2),
            cw * _step(a3 - b3),
        ],
        axis=-1,
    )
    u_ = safe_u[..., None]
    c_ = safe_c[..., None]
    d_iou = (d_inter - (inter[..., None] / u_) * d_union) / u_
    d_pen = (d_union - (union[..., None] / c_) * d_hull) / c_
    grad = np.where(pos_u[..., None], d_iou, 0.0) + np.where(pos_c[..., None], d_pen, 0.0)
    return giou, grad


def giou_2d(a: Box2D, b: Box2D) -> float:
    """Generalized IoU in ``(-1, 1]``; two coincident zero-area boxes give 1."""
    g, _ = giou_and_grad(a.as_array(), b.as_array())
    return float(g)


def giou_report(a: Box2D, b: Box2D) -> list[str]:
    """``["DegenerateBoxes"]`` for two coincident zero-area boxes (GIoU defined as 1), else empty."""
    if a.area == 0 and b.area == 0 and a.as_tuple() == b.as_tuple():
        return ["DegenerateBoxes"]
    return []


def smooth_l1_and_grad(a, b, gamma: float):
    """SmoothL1 of ``a - b`` with soft margin ``gamma`` and its derivative in ``a``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    ad = np.abs(d)
    if gamma == 0:
        return ad, np.sign(d)
    val = np.where(ad > gamma, ad - 0.5 * gamma, 0.5 * d * d / gamma)
    der = np.where(ad > gamma, np.sign(d), d / gamma)
    return val, der


def smooth_l1(a: float, b: float, gamma: float) -> float:
    """``|a-b| - gamma/2`` beyond the margin, ``(a-b)^2 / (2 gamma)`` inside it."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return float(smooth_l1_and_grad(a, b, gamma)[0])


def e_proj(K: CameraIntrinsics, box: Box3D, label: Box2D, w: LossWeights) -> float:
    b = project_box_to_aabb(K, box)
    g = giou_2d(b, label)
    sl1 = smooth_l1_and_grad(b.as_array(), label.as_array(), w.gamma)[0]
    return (1.0 - g) + w.lambda_l1 * float(np.mean(sl1))


def e_con(box1: Box3D, box2: Box3D, T_12: RigidTransform) -> float:
    moved = transform_box(T_12, box1)
    return float(np.mean(np.abs(box_corners(moved) - box_corners(box2))))


def e_rot(n_pred, n_label) -> float:
    """``1 - cos`` of the angle between two XZ vectors, in ``[0, 2]``."""
    n_pred = np.asarray(n_pred, dtype=float)
    n_label = np.asarray(n_label, dtype=float)
    np_, nl = math.hypot(*n_pred), math.hypot(*n_label)
    if np_ <= 1e-12 or nl <= 1e-12:
        raise ZeroLengthDirection("e_rot needs non-zero vectors")
    cos = float(n_pred @ n_label) / (np_ * nl)
    return 1.0 - min(1.0, max(-1.0, cos))


def total_loss(
    obs: TargetObservation,
    w: LossWeights,
    box1: Box3D,
    box2: Box3D | None = None,
) -> LossBreakdown:
    """Weighted loss of one target.

    ``box2`` is the view-2 prediction. When omitted it is tied to ``box1``
    (``box2 = T_12 . box1``); a tied box cannot explain an object that moved,
    so view 2 is then ignored for inconsistent targets.
    """
    views = [(obs.view1, box1)]
    if obs.view2 is not None:
        if box2 is None and obs.consistent:
            box2 = transform_box(obs.T_12, box1)
        if box2 is not None:
            views.append((obs.view2, box2))

    proj = rot = 0.0
    for view, box in views:
        if view.box2d is not None:
            proj += e_proj(view.intrinsics, box, view.box2d, w)
        if view.direction is not None:
            n = recover_direction(view.intrinsics, view.direction)
            rot += e_rot(heading_vector(box.yaw), n)
    con = 0.0
    if obs.consistent and len(views) == 2:
        con = e_con(box1, views[1][1], obs.T_12)
    return LossBreakdown.combine(proj, con, rot, w)


def scene_loss(observations, boxes, w: LossWeights) -> LossBreakdown:
    """Mean of :func:`total_loss` over targets (views are summed inside each target)."""
    parts = [total_loss(o, w, b) for o, b in zip(observations, boxes)]
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0)
    mean = [float(np.mean([getattr(p, k) for p in parts])) for k in ("proj", "con", "rot")]
    return LossBreakdown.combine(*mean, w)


from .objective import loss_gradient  # noqa: E402  (objective imports the types above)
