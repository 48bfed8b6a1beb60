"""Recovering full 3D boxes from 2D boxes and direction labels in two views.

Generates a handful of synthetic stereo scenes, fits each target from its
labels alone, and reports how far the fitted box lands from ground truth.
The second half repeats the exercise with one pixel of label noise.

Run: python demos/two_view_recovery.py
"""

import math

from weakgeo.fitter import fit
from weakgeo.metrics import summarize
from weakgeo.scene_synth import SceneSpec, generate


def recover(spec_kwargs, seeds):
    gt, fitted = [], []
    for seed in seeds:
        scene = generate(SceneSpec(seed=seed, **spec_kwargs))
        for obs, truth in zip(scene.observations(), scene.gt_boxes):
            gt.append(truth)
            fitted.append(fit(obs))
    return summarize(gt, fitted)


def show(title, report):
    print(f"\n{title} ({len(report.targets)} targets)")
    print(f"  median centre error  {report.median['center_err']:.3f} m")
    print(f"  median yaw error     {math.degrees(report.median['yaw_err']):.3f} deg")
    print(f"  median BEV IoU       {report.median['bev_iou']:.3f}")
    print(f"  within 0.3 m         {report.fraction['center_err']:.0%}")


show("noise-free labels", recover({"n_targets": 2}, range(10)))
show("1 px label noise at 20 m",
     recover({"depth_range": (20.0, 20.0), "pixel_noise_sigma": 1.0, "direction_noise_sigma": 1.0},
             range(100, 120)))

# A moving target breaks the rigid link between views; the fitter then uses view 1 only.
scene = generate(SceneSpec(seed=3, n_targets=3, moving_fraction=1.0))
for obs, truth in zip(scene.observations(), scene.gt_boxes):
    r = fit(obs)
    print(f"\nmoving target {obs.track_id}: consistent={obs.consistent}, "
          f"fitted depth {r.box.center[2]:.2f} m vs true {truth.center[2]:.2f} m "
          f"(depth is unobservable from one view)")
