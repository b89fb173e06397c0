"""Train the toy detector on two frames and watch it learn them.

About two minutes on one core.  The full learning check (ten frames, 500
steps) is `mvaf synth && mvaf train --deterministic`.

Run:  python3 demos/03_overfit_two_frames.py
"""

from mvaf import config as C
from mvaf import eval_harness as E
from mvaf import kitti_io as K
from mvaf import training as T

# a short run needs running norm statistics that forget the initialization quickly
cfg = C.apply_overrides(C.toy_preset(), {"train": {"steps": 200}, "model": {"norm_momentum": 0.9}})
frames = [K.synthetic_frame(f"{i:06d}", seed=i, n_cars=3, image_size=cfg.model.image_size) for i in range(2)]


def show(rec):
    if rec.step == 1 or rec.step % 25 == 0:
        parts = " ".join(f"{k}={v:.3f}" for k, v in rec.parts.items())
        print(f"step {rec.step:4d}  lr={rec.lr:.1e}  total={rec.total:8.3f}  {parts}")


state = T.train(cfg, frames, log=show)
print(f"loss reduction: {T.loss_reduction(state.history):.1%}")

res = E.evaluate_model(state.model, frames, cfg)
print(res.summary())
# The difficulty rows stay at 0: in a 128-pixel-tall image no car reaches the
# 25-pixel box height every stratum requires, so they hold no ground truth.
n_tall = sum(E.difficulty_of(lb) is not None for f in frames for lb in f.labels if lb.type == "Car")
print(f"cars inside any difficulty stratum: {n_tall}")
