import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakgeo.errors import UnprojectableTarget
from weakgeo.geometry import CameraIntrinsics, heading_vector, project_box_to_aabb, transform_box
from weakgeo.kitti_io import fixture_text, intrinsics_of, parse_calib
from weakgeo.labels import recover_direction
from weakgeo.losses import LossWeights, total_loss
from weakgeo.scene_synth import (
    KITTI_INTRINSICS,
    SceneSpec,
    dumps_scene,
    generate,
    loads_scene,
    stereo_transform,
)


def angle_between(a, b):
    return abs(math.atan2(a[0] * b[1] - a[1] * b[0], a @ b))


class TestSpec:
    @pytest.mark.parametrize("kw", [
        {"seed": -1}, {"n_targets": -1}, {"depth_range": (0.0, 5.0)}, {"depth_range": (9.0, 5.0)},
        {"lateral_range": (1.0, -1.0)}, {"dims_ranges": ((1, 2), (2, 1), (1, 2))}, {"moving_fraction": 1.5},
        {"pixel_noise_sigma": -1.0}, {"camera_height": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)

    def test_intrinsics_match_calib_fixture(self):
        P2 = parse_calib(fixture_text("calib", "000003")).P2
        K = intrinsics_of(P2, 1242, 375)
        assert K == KITTI_INTRINSICS


class TestGenerate:
    def test_deterministic(self):
        spec = SceneSpec(seed=123, n_targets=6, pixel_noise_sigma=1.0, direction_noise_sigma=1.0,
                         moving_fraction=0.5)
        assert dumps_scene(generate(spec)) == dumps_scene(generate(spec))

    def test_streams_independent_of_target_count(self):
        a = generate(SceneSpec(seed=5, n_targets=2))
        b = generate(SceneSpec(seed=5, n_targets=7))
        assert a.gt_boxes == b.gt_boxes[:2]

    def test_empty_scene(self):
        sc = generate(SceneSpec(n_targets=0))
        assert sc.gt_boxes == [] and sc.observations() == []

    def test_ground_plane(self):
        sc = generate(SceneSpec(seed=1, n_targets=10))
        bottoms = [b.center[1] + 0.5 * b.dims[2] for b in sc.gt_boxes]
        np.testing.assert_allclose(bottoms, 1.65, atol=1e-12)

    @given(st.integers(0, 2**32), st.floats(0.3, 2.0), st.floats(-0.2, 0.2))
    @settings(max_examples=40)
    def test_label_fidelity(self, seed, baseline, yaw):
        sc = generate(SceneSpec(seed=seed, n_targets=2, baseline=baseline, view2_yaw=yaw))
        K1, K2 = sc.intrinsics
        for b1, b2, l1, l2 in zip(sc.gt_boxes, sc.gt_boxes_view2, *sc.labels):
            assert project_box_to_aabb(K1, b1) == l1.box2d
            assert project_box_to_aabb(K2, b2) == l2.box2d
            assert transform_box(sc.T_12, b1).params == pytest.approx(b2.params, abs=1e-12)
            assert angle_between(recover_direction(K1, l1.direction), heading_vector(b1.yaw)) < 1e-9
            assert angle_between(recover_direction(K2, l2.direction), heading_vector(b2.yaw)) < 1e-9
            assert l1.track_id == l2.track_id

    def test_zero_loss_at_truth(self):
        for seed in range(20):
            sc = generate(SceneSpec(seed=seed, n_targets=3))
            for obs, gt in zip(sc.observations(), sc.gt_boxes):
                assert total_loss(obs, LossWeights(), gt).total < 1e-9

    def test_all_moving(self):
        sc = generate(SceneSpec(seed=8, n_targets=5, moving_fraction=1.0))
        for obs, l1, l2, b1, b2 in zip(sc.observations(), *sc.labels, sc.gt_boxes, sc.gt_boxes_view2):
            assert not obs.consistent and not l1.consistent and not l2.consistent
            moved = np.linalg.norm(np.subtract(transform_box(sc.T_12, b1).center, b2.center))
            assert moved > 0.05
            assert total_loss(obs, LossWeights(), b1).con == 0.0

    def test_noise_applied(self):
        clean = generate(SceneSpec(seed=3))
        noisy = generate(SceneSpec(seed=3, pixel_noise_sigma=1.0))
        assert clean.gt_boxes == noisy.gt_boxes
        d = noisy.labels[0][0].box2d.as_array() - clean.labels[0][0].box2d.as_array()
        assert 0 < np.abs(d).max() < 10

    def test_unprojectable(self):
        tiny = CameraIntrinsics(721.0, 721.0, 609.0, 172.0, 10, 10)
        with pytest.raises(UnprojectableTarget):
            generate(SceneSpec(intrinsics=tiny, lateral_range=(30.0, 40.0), depth_range=(5.0, 6.0)))

    def test_stereo_transform(self):
        T = stereo_transform(0.54)
        np.testing.assert_allclose(T.translation, (-0.54, 0, 0))
        np.testing.assert_array_equal(T.rotation, np.eye(3))


class TestJson:
    def test_round_trip_exact(self):
        sc = generate(SceneSpec(seed=4, n_targets=3, pixel_noise_sigma=0.7, view2_yaw=0.05, moving_fraction=0.5))
        back = loads_scene(dumps_scene(sc))
        assert back.gt_boxes == sc.gt_boxes and back.gt_boxes_view2 == sc.gt_boxes_view2
        assert back.labels == sc.labels and back.intrinsics == sc.intrinsics
        assert back.T_12 == sc.T_12
        assert dumps_scene(back) == dumps_scene(sc)

    def test_schema_field(self):
        import json

        doc = json.loads(dumps_scene(generate(SceneSpec())))
        assert doc["schema"] == 1
        assert list(doc["views"][0]["targets"][0]) == ["track_id", "box2d", "direction", "consistent"]
        doc["schema"] = 2
        with pytest.raises(ValueError):
            loads_scene(json.dumps(doc))
