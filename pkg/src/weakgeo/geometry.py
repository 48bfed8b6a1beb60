"""Pinhole camera, rigid transforms and oriented 3D boxes.

Camera frame convention: x right, y down, z forward (the KITTI camera
frame). A box heading lives in the XZ plane; ``heading_vector(yaw)`` is
``(cos yaw, sin yaw)`` as ``(x, z)`` components.

Rotations about the camera y-axis use the usual right-handed matrix::

    R_y(phi) = [[ cos phi, 0, sin phi],
                [       0, 1,       0],
                [-sin phi, 0, cos phi]]

so ``R_y(pi/2)`` maps ``(1, 0, 0)`` to ``(0, 0, -1)`` and a box transformed
by ``R_y(phi)`` ends up with ``yaw - phi``.

Everything that touches corners or projections goes through the
elementwise helpers at the bottom of this module (``corners_from_params``,
``apply_rigid``, ``project_xyz``). The fitter's batched objective uses the
same helpers, so a box projected here and inside the optimizer gives
bit-identical pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateHeading, NonPositiveDepth

Z_EPS = 1e-6
_ORTHO_TOL = 1e-9
_HEADING_EPS = 1e-9

# Corner index bits: bit 0 -> length (along heading), bit 1 -> width
# (perpendicular in XZ), bit 2 -> height (along y). Clear bit = minus side.
_IDX = np.arange(8)
SIGN_L = np.where(_IDX & 1, 1.0, -1.0)
SIGN_W = np.where(_IDX & 2, 1.0, -1.0)
SIGN_H = np.where(_IDX & 4, 1.0, -1.0)


def normalize_angle(angle: float) -> float:
    """Wrap an angle to ``(-pi, pi]``."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. ``image_width``/``image_height`` of 0 mean unbounded."""

    f_x: float
    f_y: float
    o_x: float
    o_y: float
    image_width: int = 0
    image_height: int = 0

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError(f"focal lengths must be positive, got {self.f_x}, {self.f_y}")
        if self.image_width < 0 or self.image_height < 0:
            raise ValueError("image size must be non-negative")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f_x, 0.0, self.o_x], [0.0, self.f_y, self.o_y], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("pixel coordinates must be finite")


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box ``(u_min, v_min, u_max, v_max)`` in pixels."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min <= self.u_max and self.v_min <= self.v_max):
            raise ValueError(f"invalid Box2D {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u_min, self.v_min, self.u_max, self.v_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box2D":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Box3D:
    """Oriented box: volumetric ``center`` (m), ``dims`` = (l, w, h) (m), ``yaw`` (rad).

    ``l`` runs along the heading, ``w`` across it in the XZ plane and ``h``
    along the camera y-axis. ``yaw`` is wrapped to ``(-pi, pi]``.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        dims = tuple(float(d) for d in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims must have 3 components")
        if not all(d > 0 for d in dims):
            raise ValueError(f"box dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def params(self) -> np.ndarray:
        """The 7-vector ``(x, y, z, l, w, h, yaw)``."""
        return np.array([*self.center, *self.dims, self.yaw])

    @classmethod
    def from_params(cls, p: Sequence[float]) -> "Box3D":
        p = [float(v) for v in p]
        return cls(center=tuple(p[0:3]), dims=tuple(p[3:6]), yaw=p[6])

    def with_center(self, center) -> "Box3D":
        return Box3D(center=tuple(center), dims=self.dims, yaw=self.yaw)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R x + t``. Maps points from one camera frame into another."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err >= _ORTHO_TOL or np.linalg.det(R) <= 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (err {err:.3g})")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_yaw(cls, phi: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by ``phi`` about the camera y-axis, then translation."""
        return cls(rotation_y(phi), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_y_rotation(self, tol: float = 1e-12) -> bool:
        R = self.rotation
        return bool(
            abs(R[1, 1] - 1.0) < tol
            and max(abs(R[0, 1]), abs(R[1, 0]), abs(R[1, 2]), abs(R[2, 1])) < tol
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def rotation_y(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(T_a: RigidTransform, T_b: RigidTransform) -> RigidTransform:
    """``compose(T_a, T_b)`` applies ``T_b`` first, then ``T_a``."""
    R = _orthonormalize(T_a.rotation @ T_b.rotation)
    t = T_a.rotation @ T_b.translation + T_a.translation
    return RigidTransform(R, t)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = _orthonormalize(T.rotation.T)
    return RigidTransform(Rt, -(T.rotation.T @ T.translation))


def heading_vector(yaw: float) -> np.ndarray:
    """Unit heading ``(x, z)`` for a yaw angle."""
    return np.array([math.cos(yaw), math.sin(yaw)])


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners of ``box`` as an ``(8, 3)`` array (see module docs for order)."""
    return corners_from_params(box.params)


def transform_point(T: RigidTransform, Q) -> np.ndarray:
    return apply_rigid(T.rotation, T.translation, np.asarray(Q, dtype=float))


def transform_box(T: RigidTransform, box: Box3D) -> Box3D:
    """Move ``box`` into the frame of ``T``.

    For rotations about y the corners of the result equal the transformed
    corners. Other rotations keep the box upright: the new yaw is the XZ
    projection of the rotated heading.
    """
    p = transform_params(T.rotation, T.translation, box.params)
    if not np.all(np.isfinite(p)):
        raise DegenerateHeading("transformed heading has no XZ component")
    return Box3D.from_params(p)


def project_point(K: CameraIntrinsics, Q, z_eps: float = Z_EPS) -> PixelPoint:
    Q = np.asarray(Q, dtype=float)
    if not Q[2] > z_eps:
        raise NonPositiveDepth(f"point depth {Q[2]:.6g} <= {z_eps:g}")
    u, v = project_xyz(K.f_x, K.f_y, K.o_x, K.o_y, Q[0], Q[1], Q[2])
    return PixelPoint(float(u), float(v))


def project_box_to_aabb(K: CameraIntrinsics, box: Box3D, z_eps: float = Z_EPS) -> Box2D:
    """Tight axis-aligned hull of the 8 projected corners (never clipped)."""
    C = box_corners(box)
    if not np.all(C[:, 2] > z_eps):
        raise NonPositiveDepth(f"box corner depth {C[:, 2].min():.6g} <= {z_eps:g}")
    u, v = project_xyz(K.f_x, K.f_y, K.o_x, K.o_y, C[:, 0], C[:, 1], C[:, 2])
    return Box2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def clip_box2d(b: Box2D, K: CameraIntrinsics) -> Box2D:
    """Clip to the image when ``K`` carries a size (last pixel ``W - 1``, as in KITTI labels).

    Each coordinate is clamped separately, so a box entirely outside the
    image collapses onto the border instead of turning inside out.
    """
    if K.image_width <= 0 or K.image_height <= 0:
        return b
    w, h = K.image_width - 1.0, K.image_height - 1.0

    def c(x, hi):
        return min(max(x, 0.0), hi)

    return Box2D(c(b.u_min, w), c(b.v_min, h), c(b.u_max, w), c(b.v_max, h))


# ---------------------------------------------------------------------------
# Elementwise kernels shared with the batched objective. ``p`` has shape
# (..., 7) = (x, y, z, l, w, h, yaw). Only elementwise arithmetic is used so
# results do not depend on the batch shape.


def corners_from_params(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    x, y, z, l, w, h, yaw = (p[..., i, None] for i in range(7))
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw, hh = 0.5 * l, 0.5 * w, 0.5 * h
    X = x + SIGN_L * hl * c - SIGN_W * hw * s
    Y = y + SIGN_H * hh
    Z = z + SIGN_L * hl * s + SIGN_W * hw * c
    Y = np.broadcast_to(Y, X.shape)
    return np.stack([X, Y, Z], axis=-1)


def corners_jacobian(p) -> np.ndarray:
    """d corners / d params, shape ``(..., 8, 3, 7)``."""
    p = np.asarray(p, dtype=float)
    l, w, yaw = p[..., 3, None], p[..., 4, None], p[..., 6, None]
    c, s = np.cos(yaw), np.sin(yaw)
    shape = p.shape[:-1] + (8, 3, 7)
    J = np.zeros(shape)
    J[..., 0, 0] = 1.0
    J[..., 1, 1] = 1.0
    J[..., 2, 2] = 1.0
    J[..., 0, 3] = 0.5 * SIGN_L * c
    J[..., 2, 3] = 0.5 * SIGN_L * s
    J[..., 0, 4] = -0.5 * SIGN_W * s
    J[..., 2, 4] = 0.5 * SIGN_W * c
    J[..., 1, 5] = 0.5 * SIGN_H
    J[..., 0, 6] = -0.5 * SIGN_L * l * s - 0.5 * SIGN_W * w * c
    J[..., 2, 6] = 0.5 * SIGN_L * l * c - 0.5 * SIGN_W * w * s
    return J


def apply_rigid(R, t, Q) -> np.ndarray:
    """``R @ Q + t`` over the last axis of ``Q``, written out elementwise."""
    Q = np.asarray(Q, dtype=float)
    x, y, z = Q[..., 0], Q[..., 1], Q[..., 2]
    out = [R[i][0] * x + R[i][1] * y + R[i][2] * z + t[i] for i in range(3)]
    return np.stack(out, axis=-1)


def transform_params(R, t, p) -> np.ndarray:
    """Box parameters after ``x -> R x + t``; yaw is NaN for a degenerate heading."""
    p = np.asarray(p, dtype=float)
    center = apply_rigid(R, t, p[..., 0:3])
    c, s = np.cos(p[..., 6]), np.sin(p[..., 6])
    hx = R[0][0] * c + R[0][2] * s
    hz = R[2][0] * c + R[2][2] * s
    degenerate = np.hypot(hx, hz) < _HEADING_EPS
    yaw = np.where(degenerate, np.nan, np.arctan2(hz, hx))
    return np.concatenate([center, p[..., 3:6], yaw[..., None]], axis=-1)


def transform_params_jacobian(R, p) -> np.ndarray:
    """d transform_params / d p, shape ``(..., 7, 7)``."""
    p = np.asarray(p, dtype=float)
    J = np.zeros(p.shape[:-1] + (7, 7))
    J[..., 0:3, 0:3] = np.asarray(R)
    J[..., 3, 3] = J[..., 4, 4] = J[..., 5, 5] = 1.0
    c, s = np.cos(p[..., 6]), np.sin(p[..., 6])
    hx = R[0][0] * c + R[0][2] * s
    hz = R[2][0] * c + R[2][2] * s
    dhx = -R[0][0] * s + R[0][2] * c
    dhz = -R[2][0] * s + R[2][2] * c
    J[..., 6, 6] = (hx * dhz - hz * dhx) / (hx * hx + hz * hz)
    return J


def project_xyz(f_x, f_y, o_x, o_y, X, Y, Z):
    return f_x * X / Z + o_x, f_y * Y / Z + o_y
