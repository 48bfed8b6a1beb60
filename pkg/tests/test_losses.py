import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from weakgeo.errors import ZeroLengthDirection
from weakgeo.geometry import Box2D, Box3D, CameraIntrinsics, RigidTransform, project_box_to_aabb, transform_box
from weakgeo.losses import (
    LossBreakdown,
    LossWeights,
    TargetObservation,
    ViewObservation,
    e_con,
    e_proj,
    e_rot,
    giou_2d,
    giou_and_grad,
    giou_report,
    scene_loss,
    smooth_l1,
    total_loss,
)
from weakgeo.metrics import aabb_iou
from weakgeo.scene_synth import SceneSpec, generate

coord = st.floats(-100, 100, allow_nan=False)


@st.composite
def boxes2d(draw, allow_empty=True):
    u0, v0 = draw(coord), draw(coord)
    sizes = st.floats(0.01, 50)
    if allow_empty:
        sizes = st.one_of(st.just(0.0), sizes)
    return Box2D(u0, v0, u0 + draw(sizes), v0 + draw(sizes))


def raster_giou(a, b, n=600):
    """Pixel-count GIoU over the enclosing hull (independent of the closed form)."""
    u0, v0 = min(a.u_min, b.u_min), min(a.v_min, b.v_min)
    u1, v1 = max(a.u_max, b.u_max), max(a.v_max, b.v_max)
    us = u0 + (np.arange(n) + 0.5) * (u1 - u0) / n
    vs = v0 + (np.arange(n) + 0.5) * (v1 - v0) / n
    U, V = np.meshgrid(us, vs)
    ina = (U >= a.u_min) & (U <= a.u_max) & (V >= a.v_min) & (V <= a.v_max)
    inb = (U >= b.u_min) & (U <= b.u_max) & (V >= b.v_min) & (V <= b.v_max)
    inter, union, hull = (ina & inb).sum(), (ina | inb).sum(), n * n
    return inter / union - (hull - union) / hull


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_l1, w.gamma, w.w_proj, w.w_con, w.w_rot) == (0.05, 8.0, 1.0, 1.0, 1.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(gamma=-1)

    def test_json_keys(self):
        w = LossWeights.from_dict({"gamma_px": 4, "w_rot": 0.5})
        assert w.gamma == 4 and w.w_rot == 0.5
        assert LossWeights.from_dict(w.to_dict()) == w
        with pytest.raises(ValueError):
            LossWeights.from_dict({"gamma": 4})

    def test_breakdown_total(self):
        w = LossWeights(w_proj=2, w_con=3, w_rot=5)
        b = LossBreakdown.combine(0.1, 0.2, 0.3, w)
        assert abs(b.total - (0.2 + 0.6 + 1.5)) < 1e-12


class TestGiou:
    def test_identical(self):
        b = Box2D(0, 0, 3, 2)
        assert giou_2d(b, b) == 1.0

    def test_disjoint_unit_squares(self):
        a, b = Box2D(0, 0, 1, 1), Box2D(2, 0, 3, 1)
        assert giou_2d(a, b) == pytest.approx(-1 / 3, abs=1e-15)
        assert raster_giou(a, b) == pytest.approx(-1 / 3, abs=2e-3)

    def test_nested_equals_iou(self):
        a, b = Box2D(1, 1, 2, 2), Box2D(0, 0, 4, 4)
        assert giou_2d(a, b) == pytest.approx(aabb_iou(a, b), abs=1e-15) == pytest.approx(1 / 16)

    def test_degenerate_coincident(self):
        p = Box2D(5, 5, 5, 5)
        assert giou_2d(p, p) == 1.0
        assert giou_report(p, p) == ["DegenerateBoxes"]
        assert giou_report(p, Box2D(5, 5, 6, 6)) == []

    @given(boxes2d(False), boxes2d(False))
    def test_matches_raster(self, a, b):
        assume(min(a.u_max - a.u_min, a.v_max - a.v_min, b.u_max - b.u_min, b.v_max - b.v_min) > 1.0)
        assert abs(giou_2d(a, b) - raster_giou(a, b)) < 2e-2

    @given(boxes2d(), boxes2d())
    def test_range_symmetry_bound(self, a, b):
        g = giou_2d(a, b)
        if a.area > 0 or b.area > 0:
            assert -1 < g <= 1
        else:
            assert -1 <= g <= 1  # two separated points: empty union, full hull penalty
        assert g == giou_2d(b, a)
        assert g <= aabb_iou(a, b) + 1e-15

    @given(boxes2d(False), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_hull_equals_union_gives_iou(self, a, du0, dv0, du1, dv1):
        outer = Box2D(a.u_min - du0, a.v_min - dv0, a.u_max + du1, a.v_max + dv1)
        assert giou_2d(a, outer) == pytest.approx(aabb_iou(a, outer), abs=1e-12)

    def test_gradient_zero_at_match(self):
        b = np.array([10.0, 20.0, 50.0, 80.0])
        g, grad = giou_and_grad(b, b)
        assert g == 1.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_batched(self):
        a = np.array([[0, 0, 1, 1], [0, 0, 1, 1.0]])
        b = np.array([[0, 0, 1, 1], [2, 0, 3, 1.0]])
        g, _ = giou_and_grad(a, b)
        np.testing.assert_allclose(g, [1, -1 / 3])


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(3.0, 3.0, 8.0) == 0.0

    def test_knee_continuity(self):
        g = 8.0
        quad = 0.5 * g * g / g
        lin = g - 0.5 * g
        assert abs(quad - lin) <= 1e-12
        assert smooth_l1(g, 0.0, g) == pytest.approx(0.5 * g, abs=1e-12)
        eps = 1e-9
        assert abs(smooth_l1(g + eps, 0, g) - smooth_l1(g - eps, 0, g)) < 1e-8

    def test_twice_margin(self):
        assert smooth_l1(16.0, 0.0, 8.0) == pytest.approx(12.0)

    def test_gamma_zero(self):
        assert smooth_l1(-2.5, 1.0, 0.0) == 3.5

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 20))
    def test_monotone_in_abs_diff(self, d1, d2, g):
        a, b = sorted((abs(d1), abs(d2)))
        assert smooth_l1(a, 0, g) <= smooth_l1(b, 0, g)
        assert smooth_l1(d1, 0, g) == smooth_l1(-d1, 0, g)


K = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854)
BOX = Box3D((1.0, 0.9, 15.0), (4.0, 1.7, 1.5), 0.4)


class TestEProj:
    def test_perfect(self):
        assert e_proj(K, BOX, project_box_to_aabb(K, BOX), LossWeights()) == 0.0

    def test_half_margin_shift(self):
        w = LossWeights(lambda_l1=1.0, gamma=8.0)
        b = project_box_to_aabb(K, BOX)
        s = w.gamma / 2
        lab = Box2D(b.u_min + s, b.v_min, b.u_max + s, b.v_max)
        width = b.u_max - b.u_min
        iou = (width - s) / (width + s)  # hull = union, so GIoU = IoU
        sl1 = 2 * (0.5 * s * s / w.gamma) / 4
        assert e_proj(K, BOX, lab, w) == pytest.approx((1 - iou) + sl1, rel=1e-12)

    def test_lambda_zero(self):
        lab = Box2D(500, 100, 700, 200)
        w = LossWeights(lambda_l1=0.0)
        assert e_proj(K, BOX, lab, w) == pytest.approx(1 - giou_2d(project_box_to_aabb(K, BOX), lab), abs=1e-15)


class TestECon:
    def test_identity(self):
        assert e_con(BOX, BOX, RigidTransform.identity()) == 0.0

    def test_translation_compensated(self):
        d = 0.54
        b2 = BOX.with_center((BOX.center[0], BOX.center[1], BOX.center[2] - d))
        assert e_con(BOX, b2, RigidTransform.from_translation((0, 0, -d))) == pytest.approx(0, abs=1e-14)

    @given(st.floats(-2, 2))
    def test_center_offset(self, delta):
        T = RigidTransform.from_yaw(0.2, (0.5, 0, 0.1))
        moved = transform_box(T, BOX)
        off = moved.with_center((moved.center[0] + delta, *moved.center[1:]))
        # only the 8 x coordinates move: mean over 24 is |delta| / 3
        assert e_con(BOX, off, T) == pytest.approx(abs(delta) / 3, abs=1e-12)
        c = moved.center
        diag = moved.with_center((c[0] + delta, c[1] - delta, c[2] + delta))
        assert e_con(BOX, diag, T) == pytest.approx(abs(delta), abs=1e-12)

    def test_nonnegative_and_sym_zero(self):
        T = RigidTransform.from_yaw(0.1)
        assert e_con(BOX, Box3D((0, 0, 5), (1, 1, 1), 0), T) > 0


class TestERot:
    def test_anchors(self):
        assert e_rot((1, 0), (2, 0)) == 0.0
        assert e_rot((1, 0), (-3, 0)) == 2.0
        assert e_rot((0, 1), (5, 0)) == 1.0

    def test_zero_vector(self):
        with pytest.raises(ZeroLengthDirection):
            e_rot((0, 0), (1, 0))

    @given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(1e-3, 1e3))
    def test_range_and_scale(self, a, b, c):
        n, m = np.array([math.cos(a), math.sin(a)]), np.array([math.cos(b), math.sin(b)])
        v = e_rot(n, m)
        assert 0 <= v <= 2
        assert e_rot(c * n, m) == pytest.approx(v, abs=1e-12)


def scene(seed, **kw):
    return generate(SceneSpec(seed=seed, n_targets=3, **kw))


class TestTotalLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_zero_at_truth(self, seed):
        sc = scene(seed)
        for obs, gt, gt2 in zip(sc.observations(), sc.gt_boxes, sc.gt_boxes_view2):
            assert total_loss(obs, LossWeights(), gt).total < 1e-9
            assert total_loss(obs, LossWeights(), gt, gt2).total < 1e-9

    def test_inconsistent_skips_con(self):
        sc = scene(1, moving_fraction=1.0)
        for obs, gt in zip(sc.observations(), sc.gt_boxes):
            assert not obs.consistent
            bad = Box3D((0, 0, 30), (1, 1, 1), 0.0)
            assert total_loss(obs, LossWeights(), gt, bad).con == 0.0

    def test_moving_targets_fit_with_own_view2_box(self):
        sc = scene(2, moving_fraction=1.0)
        for obs, gt, gt2 in zip(sc.observations(), sc.gt_boxes, sc.gt_boxes_view2):
            assert total_loss(obs, LossWeights(), gt, gt2).total < 1e-9

    def test_zero_weights(self):
        sc = scene(3)
        w = LossWeights(w_proj=0, w_con=0, w_rot=0)
        obs = sc.observations()[0]
        assert total_loss(obs, w, Box3D((0, 0, 30), (1, 1, 1), 0.0)).total == 0.0

    def test_views_summed(self):
        sc = scene(4)
        obs = sc.observations()[0]
        off = Box3D.from_params(sc.gt_boxes[0].params + np.array([0.3, 0.1, 0.5, 0.2, 0, 0, 0.1]))
        two = total_loss(obs, LossWeights(), off)
        one = total_loss(obs.single_view(), LossWeights(), off)
        other = total_loss(obs, LossWeights(), off).proj - one.proj
        assert two.proj == pytest.approx(one.proj + other)
        assert two.proj > one.proj

    def test_scene_loss_mean(self):
        sc = scene(5)
        obs = sc.observations()
        boxes = [Box3D.from_params(b.params + 0.1) for b in sc.gt_boxes]
        parts = [total_loss(o, LossWeights(), b).total for o, b in zip(obs, boxes)]
        assert scene_loss(obs, boxes, LossWeights()).total == pytest.approx(np.mean(parts))

    @given(st.integers(0, 10_000), st.tuples(*[st.floats(-0.5, 0.5)] * 7))
    def test_nonnegative(self, seed, delta):
        sc = generate(SceneSpec(seed=seed))
        obs = sc.observations()[0]
        box = Box3D.from_params(sc.gt_boxes[0].params + np.array(delta))
        parts = total_loss(obs, LossWeights(), box)
        assert min(parts.proj, parts.con, parts.rot, parts.total) >= 0

    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-1, 1), st.floats(0, 10))
    def test_con_translation_equivariance(self, seed, dx, dy, dz):
        sc = generate(SceneSpec(seed=seed))
        gt = sc.gt_boxes[0]
        shifted = gt.with_center((gt.center[0] + dx, gt.center[1] + dy, gt.center[2] + dz))
        T = sc.T_12
        assert e_con(shifted, transform_box(T, shifted), T) == pytest.approx(0, abs=1e-12)

    def test_single_view_observation(self):
        sc = scene(6)
        obs = sc.observations()[0].single_view()
        assert obs.view2 is None
        t = total_loss(obs, LossWeights(), sc.gt_boxes[0])
        assert t.con == 0.0 and t.total < 1e-9

    def test_box_label_optional(self):
        obs = TargetObservation(ViewObservation(K, None))
        assert not obs.has_labels
        assert total_loss(obs, LossWeights(), BOX).total == 0.0
