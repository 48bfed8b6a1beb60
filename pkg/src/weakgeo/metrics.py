"""Metrics for recovered boxes: 2D/BEV/3D IoU and per-target error summaries.

KITTI average precision needs ranked detections from a trained detector
and is not computed here; raw IoUs and error distributions are reported
instead.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IdMismatch
from .geometry import Box2D, Box3D, heading_vector

DEFAULT_THRESHOLDS = {
    "center_err": 0.3,
    "yaw_err": math.radians(1.0),
    "bev_iou": 0.5,
    "iou3d": 0.5,
}
METRIC_NAMES = ("center_err", "depth_err", "yaw_err", "dims_err", "bev_iou", "iou3d")


def aabb_iou(a: Box2D, b: Box2D) -> float:
    """Intersection over union of two image boxes; coincident zero-area boxes give 1."""
    iw = max(0.0, min(a.u_max, b.u_max) - max(a.u_min, b.u_min))
    ih = max(0.0, min(a.v_max, b.v_max) - max(a.v_min, b.v_min))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 1.0 if a.as_tuple() == b.as_tuple() else 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Bird's-eye view


def footprint(box: Box3D) -> np.ndarray:
    """Ground footprint corners ``(4, 2)`` in (x, z), counter-clockwise in that plane."""
    x, _, z = box.center
    l, w, _ = box.dims
    c, s = heading_vector(box.yaw)
    along = 0.5 * l * np.array([c, s])
    across = 0.5 * w * np.array([-s, c])
    center = np.array([x, z])
    return np.array([center - along - across, center + along - across,
                     center + along + across, center - along + across])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_cross_point(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=float).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return max(polygon_area(clip_polygon(footprint(a), footprint(b))), 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two rotated ground footprints."""
    inter = bev_intersection(a, b)
    union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter
    return min(max(inter / union, 0.0), 1.0) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: footprint intersection times vertical overlap, over the union."""
    ya0, ya1 = a.center[1] - 0.5 * a.dims[2], a.center[1] + 0.5 * a.dims[2]
    yb0, yb1 = b.center[1] - 0.5 * b.dims[2], b.center[1] + 0.5 * b.dims[2]
    dy = min(ya1, yb1) - max(ya0, yb0)
    if dy <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dy
    union = float(np.prod(a.dims)) + float(np.prod(b.dims)) - inter
    return min(max(inter / union, 0.0), 1.0) if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Reports


def yaw_error(a: float, b: float, orientation_aware: bool = False) -> float:
    """Absolute yaw difference, modulo pi (box symmetry) or 2 pi (orientation-aware)."""
    period = 2 * math.pi if orientation_aware else math.pi
    return abs(math.remainder(a - b, period))


@dataclass(frozen=True)
class TargetMetrics:
    track_id: object
    center_err: float
    depth_err: float
    yaw_err: float
    dims_err: float
    bev_iou: float
    iou3d: float


@dataclass
class RecoveryReport:
    targets: list[TargetMetrics] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    median: dict = field(default_factory=dict)
    fraction: dict = field(default_factory=dict)  # share of targets meeting each threshold
    thresholds: dict = field(default_factory=dict)
    orientation_aware: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("track_id",) + METRIC_NAMES)
        for t in self.targets:
            writer.writerow([t.track_id] + [repr(float(getattr(t, k))) for k in METRIC_NAMES])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_targets": len(self.targets),
            "orientation_aware": self.orientation_aware,
            "thresholds": self.thresholds,
            "mean": self.mean,
            "median": self.median,
            "fraction": self.fraction,
            "targets": [asdict(t) for t in self.targets],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def target_metrics(gt: Box3D, fitted: Box3D, track_id=0, orientation_aware=False) -> TargetMetrics:
    dc = np.asarray(fitted.center) - np.asarray(gt.center)
    return TargetMetrics(
        track_id=track_id,
        center_err=float(np.linalg.norm(dc)),
        depth_err=float(abs(dc[2])),
        yaw_err=yaw_error(fitted.yaw, gt.yaw, orientation_aware),
        dims_err=float(np.linalg.norm(np.asarray(fitted.dims) - np.asarray(gt.dims))),
        bev_iou=bev_iou(gt, fitted),
        iou3d=iou_3d(gt, fitted),
    )


def summarize(gt, fitted, thresholds=None, gt_ids=None, fitted_ids=None,
              orientation_aware: bool = False) -> RecoveryReport:
    """Per-target metrics plus mean / median / threshold fractions.

    ``fitted`` holds :class:`Box3D` or objects with a ``.box`` attribute
    (such as fit results). Errors count as passing when ``<=`` their
    threshold, IoUs when ``>=``.

    Raises:
        IdMismatch: list lengths or track ids disagree.
    """
    fitted_boxes = [getattr(f, "box", f) for f in fitted]
    if len(gt) != len(fitted_boxes):
        raise IdMismatch(f"{len(gt)} ground-truth boxes vs {len(fitted_boxes)} fitted")
    ids = list(gt_ids) if gt_ids is not None else list(range(len(gt)))
    if fitted_ids is not None and list(fitted_ids) != ids:
        raise IdMismatch("track ids of ground truth and fits are not aligned")
    if len(ids) != len(gt):
        raise IdMismatch("track id list length does not match the boxes")
    th = dict(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
    unknown = set(th) - set(METRIC_NAMES)
    if unknown:
        raise ValueError(f"unknown threshold metrics: {sorted(unknown)}")
    rows = [target_metrics(g, f, i, orientation_aware) for g, f, i in zip(gt, fitted_boxes, ids)]
    report = RecoveryReport(rows, thresholds=th, orientation_aware=orientation_aware)
    if not rows:
        return report
    for k in METRIC_NAMES:
        vals = np.array([getattr(r, k) for r in rows])
        report.mean[k] = float(np.mean(vals))
        report.median[k] = float(np.median(vals))
    for k, v in th.items():
        vals = np.array([getattr(r, k) for r in rows])
        ok = vals >= v if k in ("bev_iou", "iou3d") else vals <= v
        report.fraction[k] = float(np.mean(ok))
    return report
