"""KITTI calibration and label files, and the bridge to :class:`Box3D`.

Conventions (rectified camera frame, x right, y down, z forward):

* KITTI ``location`` is the bottom-face center; ``Box3D.center`` is the
  volumetric center, so ``center = location - (0, h/2, 0)``.
* KITTI ``dimensions`` are ``(h, w, l)``; ``Box3D.dims`` are ``(l, w, h)``.
* KITTI ``rotation_y`` turns the object's forward axis from camera x toward
  camera z *negatively*: forward is ``(cos ry, -sin ry)`` in XZ. The library's
  heading is ``(cos yaw, sin yaw)``, hence ``yaw = -rotation_y``.

Labels live in the rectified reference frame (camera 0). Camera ``P_i``
sees a point ``X`` at ``K (X + t_i)`` with ``t_i = K^-1 P_i[:, 3]``;
:func:`camera_offset` returns ``t_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import DontCareLabel, MalformedCalib, MalformedLabel
from .geometry import Box2D, Box3D, CameraIntrinsics, RigidTransform, clip_box2d, project_box_to_aabb

CALIB_KEYS = ("P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam")
_CALIB_SHAPES = {"P0": (3, 4), "P1": (3, 4), "P2": (3, 4), "P3": (3, 4), "R0_rect": (3, 3),
                 "Tr_velo_to_cam": (3, 4)}
DONT_CARE = "DontCare"


@dataclass
class KittiCalib:
    P0: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    extra: dict = field(default_factory=dict)  # other lines (e.g. Tr_imu_to_velo), kept for round trips


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom-face center
    rotation_y: float
    score: float | None = None

    @property
    def is_dont_care(self) -> bool:
        return self.type == DONT_CARE

    @property
    def box2d(self) -> Box2D:
        return Box2D(*self.bbox)


# ---------------------------------------------------------------------------
# Calibration


def parse_calib(text: str) -> KittiCalib:
    """Parse a KITTI ``calib/*.txt`` document.

    Raises:
        MalformedCalib: a required line is missing or has the wrong number of values.
    """
    mats = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        key, sep, rest = raw.partition(":")
        if not sep:
            raise MalformedCalib(f"line {n}: expected 'key: values'")
        try:
            vals = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedCalib(f"line {n}: {exc}") from None
        key = key.strip()
        if key in _CALIB_SHAPES:
            shape = _CALIB_SHAPES[key]
            if vals.size != shape[0] * shape[1]:
                raise MalformedCalib(f"line {n}: {key} needs {shape[0] * shape[1]} values, got {vals.size}")
            vals = vals.reshape(shape)
        mats[key] = vals
    missing = [k for k in CALIB_KEYS if k not in mats]
    if missing:
        raise MalformedCalib(f"missing calibration lines: {', '.join(missing)}")
    extra = {k: v for k, v in mats.items() if k not in _CALIB_SHAPES}
    calib = KittiCalib(*(mats[k] for k in CALIB_KEYS), extra=extra)
    for key in ("P2", "P3"):
        P = getattr(calib, key)
        if not (P[0, 0] > 0 and P[1, 1] > 0):
            raise MalformedCalib(f"{key} has non-positive focal length")
    return calib


def write_calib(calib: KittiCalib) -> str:
    """KITTI calib text; values in ``%.12e`` like the dataset files."""
    rows = []
    for key in CALIB_KEYS:
        rows.append(_calib_line(key, getattr(calib, key)))
    for key, vals in calib.extra.items():
        rows.append(_calib_line(key, vals))
    return "\n".join(rows) + "\n"


def _calib_line(key, vals) -> str:
    return key + ": " + " ".join("%.12e" % v for v in np.ravel(vals))


def intrinsics_of(P, image_width: int = 0, image_height: int = 0) -> CameraIntrinsics:
    """Pinhole intrinsics from a 3x4 projection matrix."""
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 4):
        raise MalformedCalib(f"projection matrix must be 3x4, got {P.shape}")
    if not (P[0, 0] > 0 and P[1, 1] > 0):
        raise MalformedCalib("projection matrix has non-positive focal length")
    return CameraIntrinsics(float(P[0, 0]), float(P[1, 1]), float(P[0, 2]), float(P[1, 2]),
                            image_width, image_height)


def camera_offset(P) -> np.ndarray:
    """Translation ``t`` with ``P X = K (X + t)`` for reference-frame points ``X``."""
    P = np.asarray(P, dtype=float)
    return np.linalg.solve(P[:, :3], P[:, 3])


def stereo_baseline(P2, P3) -> RigidTransform:
    """Rigid map from camera-2 coordinates to camera-3 coordinates.

    Rectified cameras share their rotation, so this is a pure translation;
    its x component is ``(P3[0][3] - P2[0][3]) / f_x`` (about -0.54 m on KITTI)
    plus the small terms from the third row.
    """
    return RigidTransform.from_translation(camera_offset(P3) - camera_offset(P2))


# ---------------------------------------------------------------------------
# Labels


def parse_labels(text: str) -> list[KittiLabel]:
    """Parse a KITTI ``label_2/*.txt`` document (15 fields, optional 16th score)."""
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) not in (15, 16):
            raise MalformedLabel(f"expected 15 fields, got {len(parts)}", n)
        try:
            nums = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise MalformedLabel(str(exc), n) from None
        label = KittiLabel(
            type=parts[0],
            truncated=nums[0],
            occluded=int(nums[1]),
            alpha=nums[2],
            bbox=tuple(nums[3:7]),
            dimensions=tuple(nums[7:10]),
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        )
        if not label.is_dont_care and min(label.dimensions) <= 0:
            raise MalformedLabel("dimensions must be positive", n)
        out.append(label)
    return out


def _fmt_label(lab: KittiLabel) -> str:
    # DontCare rows use bare -1 sentinels for truncation and dimensions in the dataset files.
    def sentinel(v):
        return "-1" if lab.is_dont_care and v == -1 else f"{v:.2f}"

    fields_ = [lab.type, sentinel(lab.truncated), str(int(lab.occluded)), f"{lab.alpha:.2f}"]
    fields_ += [f"{v:.2f}" for v in lab.bbox]
    fields_ += [sentinel(v) for v in lab.dimensions]
    fields_ += [f"{v:.2f}" for v in (*lab.location, lab.rotation_y)]
    if lab.score is not None:
        fields_.append(f"{lab.score:.2f}")
    return " ".join(fields_)


def write_labels(labels) -> str:
    """KITTI label text with 2-decimal floats."""
    return "".join(_fmt_label(lab) + "\n" for lab in labels)


# ---------------------------------------------------------------------------
# Convention bridge


def rotation_y_to_yaw(rotation_y: float) -> float:
    return -rotation_y


def yaw_to_rotation_y(yaw: float) -> float:
    # Box3D keeps yaw in (-pi, pi], so this lands in [-pi, pi) like KITTI.
    return -yaw


def kitti_to_box3d(label: KittiLabel, offset=(0.0, 0.0, 0.0)) -> Box3D:
    """Box in the rectified frame, shifted by ``offset`` (e.g. ``camera_offset(P2)``).

    Raises:
        DontCareLabel: the entry has no 3D box.
    """
    if label.is_dont_care:
        raise DontCareLabel("DontCare entries carry no 3D box")
    h, w, l = label.dimensions
    x, y, z = label.location
    ox, oy, oz = offset
    return Box3D((x + ox, y - 0.5 * h + oy, z + oz), (l, w, h), rotation_y_to_yaw(label.rotation_y))


def box3d_to_kitti(
    box: Box3D,
    K: CameraIntrinsics | None = None,
    type: str = "Car",
    offset=(0.0, 0.0, 0.0),
    truncated: float = 0.0,
    occluded: int = 0,
    score: float | None = None,
) -> KittiLabel:
    """Inverse of :func:`kitti_to_box3d`.

    ``bbox`` is the projected AABB through ``K`` (clipped to the image when its
    size is known), or zeros when ``K`` is None. ``alpha`` is the observation
    angle ``rotation_y - atan2(x, z)``.
    """
    l, w, h = box.dims
    x, y, z = (c - o for c, o in zip(box.center, offset))
    ry = yaw_to_rotation_y(box.yaw)
    if K is None:
        bbox = (0.0, 0.0, 0.0, 0.0)
    else:
        bbox = clip_box2d(project_box_to_aabb(K, box), K).as_tuple()
    cx, _, cz = box.center
    alpha = math.remainder(ry - math.atan2(cx, cz), 2 * math.pi)
    return KittiLabel(type, truncated, occluded, alpha, tuple(bbox), (h, w, l), (x, y + 0.5 * h, z), ry, score)


# ---------------------------------------------------------------------------
# Bundled fixtures


FIXTURE_FRAMES = ("000000", "000003")


def fixture_text(kind: str, frame: str) -> str:
    """Text of a bundled KITTI fixture; ``kind`` is ``"calib"`` or ``"label_2"``."""
    if kind not in ("calib", "label_2"):
        raise ValueError("kind must be 'calib' or 'label_2'")
    return resources.files("weakgeo").joinpath("data", "kitti", kind, f"{frame}.txt").read_text()


def with_bbox(label: KittiLabel, box: Box2D) -> KittiLabel:
    return replace(label, bbox=box.as_tuple())
