"""2D ground-truth containers and heading recovery from 2D direction labels.

A direction label is an oriented image segment drawn along the ground
contact of an object (e.g. along the wheels), start at the rear and end at
the front. Assuming both endpoints share the same camera height ``y``,
each endpoint back-projects to

    x_i = y f_y (u_i - o_x) / (f_x (v_i - o_y)),   z_i = y f_y / (v_i - o_y)

and the XZ heading is ``(x_2 - x_1, z_2 - z_1)`` normalized. The unknown
``y`` only scales that vector, so the recovered unit direction does not
depend on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .errors import HorizonDegenerate, ZeroLengthDirection
from .geometry import Box2D, CameraIntrinsics, PixelPoint

V_EPS = 1e-3
MIN_LABEL_LENGTH = 0.5
DEFAULT_ASSUMED_Y = 1.0


@dataclass(frozen=True)
class DirectionLabel2D:
    start: PixelPoint
    end: PixelPoint

    def __post_init__(self):
        if self.length <= MIN_LABEL_LENGTH:
            raise ValueError(f"direction label shorter than {MIN_LABEL_LENGTH} px")

    @property
    def length(self) -> float:
        return math.hypot(self.end.u - self.start.u, self.end.v - self.start.v)

    @classmethod
    def from_pairs(cls, pairs) -> "DirectionLabel2D":
        (u1, v1), (u2, v2) = pairs
        return cls(PixelPoint(float(u1), float(v1)), PixelPoint(float(u2), float(v2)))

    def as_pairs(self):
        return [[self.start.u, self.start.v], [self.end.u, self.end.v]]


@dataclass(frozen=True)
class TargetLabel:
    """Per-view label of one object. ``consistent=False`` marks an object that moved."""

    box2d: Box2D
    direction: DirectionLabel2D | None = None
    track_id: Hashable = 0
    consistent: bool = True


def _back_project_xz(K: CameraIntrinsics, u: float, v: float, y: float, v_eps: float):
    dv = v - K.o_y
    if abs(dv) <= v_eps:
        raise HorizonDegenerate(f"v={v:.6g} within {v_eps:g} px of the horizon row o_y={K.o_y:.6g}")
    z = y * K.f_y / dv
    x = y * K.f_y * (u - K.o_x) / (K.f_x * dv)
    return x, z


def recover_direction(
    K: CameraIntrinsics,
    label: DirectionLabel2D,
    assumed_y: float = DEFAULT_ASSUMED_Y,
    v_eps: float = V_EPS,
) -> np.ndarray:
    """Unit XZ heading implied by a 2D direction label.

    Raises:
        HorizonDegenerate: an endpoint lies within ``v_eps`` px of ``o_y``.
        ZeroLengthDirection: both endpoints back-project to the same point.
    """
    if not assumed_y > 0:
        raise ValueError("assumed_y must be positive")
    x1, z1 = _back_project_xz(K, label.start.u, label.start.v, assumed_y, v_eps)
    x2, z2 = _back_project_xz(K, label.end.u, label.end.v, assumed_y, v_eps)
    n = np.array([x2 - x1, z2 - z1])
    norm = math.hypot(n[0], n[1])
    if norm < 1e-12:
        raise ZeroLengthDirection("recovered 3D direction has zero length")
    return n / norm


def validate_direction_label(K: CameraIntrinsics, label, v_eps: float = V_EPS) -> list[str]:
    """Lint a direction label without raising.

    ``label`` may be a :class:`DirectionLabel2D` or a raw ``[[u1, v1], [u2, v2]]``
    pair (raw input is how degenerate zero-length labels reach the linter).
    Returns a list of report codes, empty for a usable label.
    """
    if isinstance(label, DirectionLabel2D):
        (u1, v1), (u2, v2) = label.as_pairs()
    else:
        (u1, v1), (u2, v2) = label
    report = []
    if abs(v1 - K.o_y) <= v_eps or abs(v2 - K.o_y) <= v_eps:
        report.append("HorizonDegenerate")
    if math.hypot(u2 - u1, v2 - v1) <= MIN_LABEL_LENGTH:
        report.append("ZeroLengthDirection")
    elif "HorizonDegenerate" not in report:
        x1, z1 = _back_project_xz(K, u1, v1, DEFAULT_ASSUMED_Y, v_eps)
        x2, z2 = _back_project_xz(K, u2, v2, DEFAULT_ASSUMED_Y, v_eps)
        if math.hypot(x2 - x1, z2 - z1) < 1e-12:
            report.append("ZeroLengthDirection")
    return report


# ---------------------------------------------------------------------------
# Label JSON: one document per frame.


def _f6(x: float) -> float:
    return float(f"{x:.6f}")


def target_to_dict(t: TargetLabel, precision: int | None = 6) -> dict:
    fmt = _f6 if precision == 6 else float
    return {
        "track_id": t.track_id,
        "box2d": [fmt(v) for v in t.box2d.as_tuple()],
        "direction": None
        if t.direction is None
        else [[fmt(a) for a in pair] for pair in t.direction.as_pairs()],
        "consistent": bool(t.consistent),
    }


def target_from_dict(d: dict) -> TargetLabel:
    direction = d.get("direction")
    return TargetLabel(
        box2d=Box2D.from_array(d["box2d"]),
        direction=None if direction is None else DirectionLabel2D.from_pairs(direction),
        track_id=d["track_id"],
        consistent=bool(d.get("consistent", True)),
    )


def frame_to_json(frame_id, camera_id, targets: list[TargetLabel]) -> str:
    """Serialize one frame's labels (fixed key order, 6 decimal places)."""
    doc = {
        "frame_id": frame_id,
        "camera_id": camera_id,
        "targets": [target_to_dict(t) for t in targets],
    }
    return _dumps_fixed(doc)


def frame_from_json(text: str):
    """Inverse of :func:`frame_to_json`; returns ``(frame_id, camera_id, targets)``."""
    doc = json.loads(text)
    return doc["frame_id"], doc["camera_id"], [target_from_dict(t) for t in doc["targets"]]


def _dumps_fixed(doc) -> str:
    # Six-decimal floats need a custom encoder; json's float repr is shortest-roundtrip.
    def enc(o, indent=0):
        pad = "  " * indent
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f'{pad}  {json.dumps(k)}: {enc(v, indent + 1)}' for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(not isinstance(v, (dict, list)) for v in o) or all(
                isinstance(v, list) and all(not isinstance(w, (dict, list)) for w in v) for v in o
            ):
                return "[" + ", ".join(enc(v, indent) for v in o) + "]"
            items = [pad + "  " + enc(v, indent + 1) for v in o]
            return "[\n" + ",\n".join(items) + "\n" + pad + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, float):
            return f"{o:.6f}"
        return json.dumps(o)

    return enc(doc) + "\n"
