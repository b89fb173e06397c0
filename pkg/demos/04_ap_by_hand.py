"""Average precision over 40 recall positions, on problems small enough to do by hand.

Run:  python3 demos/04_ap_by_hand.py
"""

import numpy as np

from mvaf import eval_harness as E


def car(x, y=0.0):
    return np.array([x, y, -1.0, 4.0, 1.7, 1.5, 0.0])


miss = car(60, 30)
gt = [E.FrameGT([car(10), car(20)])]

cases = {
    "both found, nothing else": [car(10), car(20)],
    "hit, miss, hit": [car(10), miss, car(20)],
    "miss first, then both": [miss, car(10), car(20)],
    "one found": [car(10)],
}
for name, boxes in cases.items():
    scores = np.linspace(0.9, 0.5, len(boxes))
    r = E.ap_40([E.FrameDets(boxes, scores)], gt)
    steps = np.flatnonzero(np.diff(np.r_[r.precision, 0]))  # where the envelope drops
    envelope = ", ".join(f"P={r.precision[i]:.3f} up to R={(i + 1) / 40:.3f}" for i in steps)
    print(f"{name:26s} AP={r.ap:.4f}   [{envelope}]")

# Ignore behaviour: a gt outside the queried difficulty absorbs its match silently.
gt_mixed = [E.FrameGT([car(10), car(20)], care=[True, False])]
r = E.ap_40([E.FrameDets([car(20), car(10)], [0.9, 0.8])], gt_mixed)
print(f"{'match on an ignored gt':26s} AP={r.ap:.4f}   (n_gt={r.n_gt})")
