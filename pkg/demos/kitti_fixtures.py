"""Reading real KITTI annotations and checking the coordinate conventions.

The two bundled frames carry a calibration file and a label file. Each
labelled object is turned into a box in the left colour camera frame,
projected through that camera, and compared with the 2D box stored in the
label. Direction labels are then rendered from the 3D boxes and turned
back into headings.

Run: python demos/kitti_fixtures.py
"""

import math

from weakgeo.geometry import heading_vector, project_box_to_aabb
from weakgeo.kitti_io import (
    FIXTURE_FRAMES,
    camera_offset,
    fixture_text,
    intrinsics_of,
    kitti_to_box3d,
    parse_calib,
    parse_labels,
    stereo_baseline,
)
from weakgeo.labels import recover_direction
from weakgeo.metrics import aabb_iou
from weakgeo.scene_synth import direction_label_for

for frame in FIXTURE_FRAMES:
    calib = parse_calib(fixture_text("calib", frame))
    K = intrinsics_of(calib.P2)
    T = stereo_baseline(calib.P2, calib.P3)
    print(f"frame {frame}: f = {K.f_x:.4f} px, right camera offset {T.translation[0]:+.4f} m")
    for lab in parse_labels(fixture_text("label_2", frame)):
        if lab.is_dont_care:
            print(f"  {lab.type:<10} (ignored region)")
            continue
        box = kitti_to_box3d(lab, camera_offset(calib.P2))
        iou = aabb_iou(project_box_to_aabb(K, box), lab.box2d)
        heading = recover_direction(K, direction_label_for(K, box))
        err = math.degrees(math.acos(min(1.0, float(heading @ heading_vector(box.yaw)))))
        print(f"  {lab.type:<10} depth {box.center[2]:6.2f} m  projected-vs-stored IoU {iou:.3f}  "
              f"heading recovered to {err:.1e} deg")
