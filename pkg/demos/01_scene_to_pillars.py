"""From a synthetic KITTI-style frame to pillars in the bird's-eye and range views.

Run:  python3 demos/01_scene_to_pillars.py
"""

import numpy as np

from mvaf import geometry as geo
from mvaf import kitti_io as K
from mvaf import model as M
from mvaf import voxelizer as vox

frame = K.synthetic_frame("000000", seed=3, n_cars=4)
pts = frame.cloud.points
print(f"frame {frame.frame_id}: {len(pts)} points, image {frame.image.data.shape[1]}x{frame.image.data.shape[0]}")

# Labels arrive in the camera frame; everything downstream uses LiDAR boxes.
boxes = M.frame_boxes(frame)
inside = geo.points_in_boxes(pts, boxes)
for i, (lab, box) in enumerate(zip([lb for lb in frame.labels if lb.type == "Car"], boxes)):
    print(f"  car {i}: x={box[0]:5.1f} y={box[1]:5.1f} yaw={box[6]:+.2f}  points={inside[:, i].sum():4d}"
          f"  occluded={lab.occluded}")

# The two point-cloud views at full resolution.
for spec in (vox.bev_spec(), vox.rv_spec()):
    keep, kept = vox.crop_points(pts, spec)
    assign = vox.assign_pillars(kept, spec)
    counts = assign.counts()
    print(f"{spec.kind.upper()} grid {spec.dims[0]}x{spec.dims[1]}: {len(kept)} points kept, "
          f"{assign.n_pillars} non-empty pillars ({assign.n_pillars / np.prod(spec.dims):.2%} of cells), "
          f"max {counts.max()} points in one pillar")

# How many points the camera sees.
coords, valid = geo.project_points(pts[:, :3], geo.camera_mapping(frame.calib.M_CV, (384, 128), 1))
print(f"camera: {valid.sum()} of {len(pts)} points project into the image")
