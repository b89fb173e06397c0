"""One forward pass through an untrained detector, looking at what each stage produces.

Each view gets its own sigmoid gate computed from all three views' features.
They are not normalized against each other, so an untrained model already
spreads them over (0, 1).  The foreground probabilities are what the
weighting module multiplies into every point feature.

Run:  python3 demos/02_fusion_gates.py
"""

import numpy as np

from mvaf import config as C
from mvaf import kitti_io as K
from mvaf import model as M

cfg = C.toy_preset()
frames = [K.synthetic_frame(f"{i:06d}", seed=i, n_cars=4, image_size=cfg.model.image_size) for i in range(2)]
batch = M.make_batch(frames, cfg)
model = M.build_model(cfg)
n_params = sum(p.data.size for _, p in model.named_parameters())
print(f"toy detector: {n_params} parameters, {len(batch.points)} points in a batch of {batch.size}")

out = model(batch)
for view in ("cv", "bev", "rv"):
    feats = getattr(out.point_views, view).data
    gate = out.fused.gates[view].data
    print(f"  {view.upper():3s} point features |f| mean {np.linalg.norm(feats, axis=1).mean():.3f}; "
          f"gate mean {gate.mean():.3f} range [{gate.min():.3f}, {gate.max():.3f}]")

targets = M.batch_targets(model, batch)
fg = targets.point_foreground
p = out.apw.cls.data[:, 0]
print(f"foreground points: {fg.sum()} of {len(fg)}; predicted P(fg) mean {p[fg].mean():.3f} on cars, "
      f"{p[~fg].mean():.3f} elsewhere (untrained)")

parts = {k: v.item() for k, v in M.loss_parts(model, out, targets).items()}
print("loss parts at initialization: " + ", ".join(f"{k}={v:.3f}" for k, v in parts.items()))
