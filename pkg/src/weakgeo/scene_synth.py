"""Deterministic synthetic two-view scenes with exact 2D labels.

Boxes stand on a flat ground plane ``y = camera_height`` (camera frame, y
down). View 2 is a second camera displaced by ``baseline`` along x (and
optionally turned by ``view2_yaw`` about y), like a stereo pair. Labels are
the projected AABBs of the ground-truth boxes and direction labels are the
projections of two points on the bottom heading line (rear to front).

Randomness: each target draws from its own PCG64 stream seeded with
``SeedSequence(seed, spawn_key=(target_index,))``, so adding targets never
changes earlier ones. Every target consumes the same fixed sequence of
draws whatever the noise settings.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonPositiveDepth, UnprojectableTarget
from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    PixelPoint,
    RigidTransform,
    box_corners,
    heading_vector,
    project_box_to_aabb,
    project_point,
    rotation_y,
    transform_box,
)
from .labels import DirectionLabel2D, TargetLabel, target_from_dict, target_to_dict
from .losses import TargetObservation, ViewObservation

# KITTI P2 intrinsics (calib fixture 000001.txt), image 1242x375.
KITTI_INTRINSICS = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
KITTI_BASELINE = 0.54
SCHEMA_VERSION = 1
MAX_RESAMPLES = 100
MIN_CORNER_DEPTH = 0.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_targets: int = 1
    depth_range: tuple[float, float] = (5.0, 40.0)
    lateral_range: tuple[float, float] = (-8.0, 8.0)
    dims_ranges: tuple = ((3.2, 4.8), (1.5, 1.9), (1.4, 1.7))  # l, w, h
    baseline: float = KITTI_BASELINE
    view2_yaw: float = 0.0
    pixel_noise_sigma: float = 0.0
    direction_noise_sigma: float = 0.0
    moving_fraction: float = 0.0
    camera_height: float = 1.65
    intrinsics: CameraIntrinsics = KITTI_INTRINSICS
    keep_in_image: bool = True

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.n_targets < 0:
            raise ValueError("n_targets must be >= 0")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must satisfy 0 < min <= max")
        if not self.lateral_range[0] <= self.lateral_range[1]:
            raise ValueError("lateral_range is empty")
        for lo, hi in self.dims_ranges:
            if not 0 < lo <= hi:
                raise ValueError("dims ranges must be positive and non-empty")
        if not 0.0 <= self.moving_fraction <= 1.0:
            raise ValueError("moving_fraction must lie in [0, 1]")
        if self.pixel_noise_sigma < 0 or self.direction_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.camera_height <= 0:
            raise ValueError("camera_height must be positive")


@dataclass
class SceneBundle:
    intrinsics: tuple[CameraIntrinsics, CameraIntrinsics]
    T_12: RigidTransform
    gt_boxes: list[Box3D]  # view-1 frame, view-1 instant
    gt_boxes_view2: list[Box3D]  # view-2 frame, view-2 instant (moved targets differ)
    labels: tuple[list[TargetLabel], list[TargetLabel]]
    spec: SceneSpec | None = field(default=None, compare=False)

    def observations(self) -> list[TargetObservation]:
        K1, K2 = self.intrinsics
        out = []
        for l1, l2 in zip(*self.labels):
            out.append(
                TargetObservation(
                    view1=ViewObservation(K1, l1.box2d, l1.direction),
                    view2=ViewObservation(K2, l2.box2d, l2.direction),
                    T_12=self.T_12,
                    consistent=l1.consistent and l2.consistent,
                    track_id=l1.track_id,
                )
            )
        return out

    @property
    def track_ids(self):
        return [t.track_id for t in self.labels[0]]


def direction_label_for(K, box: Box3D, rng_noise=(0.0, 0.0, 0.0, 0.0), sigma=0.0) -> DirectionLabel2D:
    """Direction label from the rear and front bottom-center points of ``box``.

    ``rng_noise`` holds four standard normals scaled by ``sigma`` pixels.
    """
    x, y, z = box.center
    hx, hz = heading_vector(box.yaw)
    half = 0.5 * box.dims[0]
    y_ground = y + 0.5 * box.dims[2]
    rear = project_point(K, (x - half * hx, y_ground, z - half * hz))
    front = project_point(K, (x + half * hx, y_ground, z + half * hz))
    return DirectionLabel2D(
        PixelPoint(rear.u + sigma * rng_noise[0], rear.v + sigma * rng_noise[1]),
        PixelPoint(front.u + sigma * rng_noise[2], front.v + sigma * rng_noise[3]),
    )


def _noisy_box(b: Box2D, noise, sigma) -> Box2D:
    u0, v0, u1, v1 = (c + sigma * n for c, n in zip(b.as_tuple(), noise))
    return Box2D(min(u0, u1), min(v0, v1), max(u0, u1), max(v0, v1))


def _in_image(K: CameraIntrinsics, b: Box2D) -> bool:
    if K.image_width <= 0 or K.image_height <= 0:
        return True
    uc, vc = 0.5 * (b.u_min + b.u_max), 0.5 * (b.v_min + b.v_max)
    return 0 <= uc <= K.image_width and 0 <= vc <= K.image_height


def stereo_transform(baseline: float, view2_yaw: float = 0.0) -> RigidTransform:
    """``T_12`` for a second camera at ``(baseline, 0, 0)`` turned by ``view2_yaw`` about y."""
    Rc = rotation_y(view2_yaw)
    c2 = np.array([baseline, 0.0, 0.0])
    return RigidTransform(Rc.T, -Rc.T @ c2)


def generate(spec: SceneSpec) -> SceneBundle:
    """Sample a scene. Pure function of ``spec``."""
    K = spec.intrinsics
    T = stereo_transform(spec.baseline, spec.view2_yaw)
    gt1, gt2, labels1, labels2 = [], [], [], []
    for i in range(spec.n_targets):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(i,))))
        for _attempt in range(MAX_RESAMPLES):
            sample = _sample_target(spec, K, T, rng, track_id=i)
            if sample is not None:
                break
        else:
            raise UnprojectableTarget(f"target {i}: no valid placement in {MAX_RESAMPLES} draws")
        b1, b2, t1, t2 = sample
        gt1.append(b1)
        gt2.append(b2)
        labels1.append(t1)
        labels2.append(t2)
    return SceneBundle((K, K), T, gt1, gt2, (labels1, labels2), spec)


def _sample_target(spec, K, T, rng, track_id):
    z = rng.uniform(*spec.depth_range)
    x = rng.uniform(*spec.lateral_range)
    dims = [rng.uniform(lo, hi) for lo, hi in spec.dims_ranges]
    yaw = rng.uniform(-math.pi, math.pi)
    moving = rng.uniform() < spec.moving_fraction
    shift = rng.uniform(0.5, 2.0)
    noise = rng.standard_normal(16)

    h = dims[2]
    box1 = Box3D((x, spec.camera_height - 0.5 * h, z), dims, yaw)
    world2 = box1
    if moving:
        hx, hz = heading_vector(yaw)
        world2 = box1.with_center((x + shift * hx, box1.center[1], z + shift * hz))
    box2 = transform_box(T, world2)
    try:
        for b in (box1, box2):
            corners_min = _min_corner_depth(b)
            if corners_min <= MIN_CORNER_DEPTH:
                return None
        aabb1 = project_box_to_aabb(K, box1)
        aabb2 = project_box_to_aabb(K, box2)
        if spec.keep_in_image and not (_in_image(K, aabb1) and _in_image(K, aabb2)):
            return None
        sp, sd = spec.pixel_noise_sigma, spec.direction_noise_sigma
        lab1 = TargetLabel(_noisy_box(aabb1, noise[0:4], sp), direction_label_for(K, box1, noise[4:8], sd),
                           track_id, not moving)
        lab2 = TargetLabel(_noisy_box(aabb2, noise[8:12], sp), direction_label_for(K, box2, noise[12:16], sd),
                           track_id, not moving)
    except (NonPositiveDepth, ValueError):
        return None
    return box1, box2, lab1, lab2


def _min_corner_depth(box: Box3D) -> float:
    return float(box_corners(box)[:, 2].min())


# ---------------------------------------------------------------------------
# JSON


def _box3d_to_dict(b: Box3D) -> dict:
    return {"center": list(b.center), "dims": list(b.dims), "yaw": b.yaw}


def _box3d_from_dict(d: dict) -> Box3D:
    return Box3D(tuple(d["center"]), tuple(d["dims"]), d["yaw"])


def _intrinsics_to_dict(K: CameraIntrinsics) -> dict:
    return asdict(K)


def scene_to_dict(scene: SceneBundle) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "intrinsics": [_intrinsics_to_dict(K) for K in scene.intrinsics],
        "T_12": {
            "rotation": scene.T_12.rotation.tolist(),
            "translation": scene.T_12.translation.tolist(),
        },
        "gt_boxes": [_box3d_to_dict(b) for b in scene.gt_boxes],
        "gt_boxes_view2": [_box3d_to_dict(b) for b in scene.gt_boxes_view2],
        "views": [
            {"camera_id": cam, "targets": [target_to_dict(t, precision=None) for t in labels]}
            for cam, labels in enumerate(scene.labels, start=1)
        ],
    }


def scene_from_dict(d: dict) -> SceneBundle:
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
    Ks = tuple(CameraIntrinsics(**k) for k in d["intrinsics"])
    T = RigidTransform(np.array(d["T_12"]["rotation"]), np.array(d["T_12"]["translation"]))
    views = d["views"]
    labels = tuple([target_from_dict(t) for t in v["targets"]] for v in views)
    return SceneBundle(
        Ks, T,
        [_box3d_from_dict(b) for b in d["gt_boxes"]],
        [_box3d_from_dict(b) for b in d.get("gt_boxes_view2", d["gt_boxes"])],
        labels,
    )


def dumps_scene(scene: SceneBundle) -> str:
    return json.dumps(scene_to_dict(scene), indent=1) + "\n"


def loads_scene(text: str) -> SceneBundle:
    return scene_from_dict(json.loads(text))
