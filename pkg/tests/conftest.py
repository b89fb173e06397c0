import math

import pytest

from mvaf import config as C
from mvaf import kitti_io as K

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_config(**model_overrides) -> C.RunConfig:
    """A few-thousand-parameter detector on a 12.8 m x 25.6 m patch."""
    return C.from_dict({
        "grid": {"x_range": [4.0, 29.6], "y_range": [-6.4, 6.4], "bev_cell": 0.8,
                 "phi_range": [-math.pi / 4, math.pi / 4], "rv_phi_cell": math.pi / 64, "rv_z_cell": 0.5},
        "model": {"point_width": 4, "common_width": 4, "raw_width": 3, "apf_hidden": 5, "apw_hidden": 6,
                  "image_size": [64, 32],
                  "bev_net": {"channels": [4, 4, 4], "layers": [1, 1, 1], "upsample_channels": 2},
                  "rv_net": {"channels": [4, 4, 4], "layers": [1, 1, 1], "upsample_channels": 2},
                  "cv_net": {"channels": [3, 3, 3, 3], "layers": [1, 1, 1, 1], "upsample_channels": 2},
                  "fusion_net": {"channels": [4, 4, 4], "layers": [1, 1, 1], "upsample_channels": 2},
                  **model_overrides},
        "train": {"steps": 4, "log_every": 1, "checkpoint_every": 2},
        "data": {"synth_frames": 2, "synth_cars": 2},
    })


def tiny_frames(cfg: C.RunConfig, n: int = 2, seed: int = 0):
    return [K.synthetic_frame(f"{i:06d}", seed + i, 2, image_size=cfg.model.image_size, n_ground=400)
            for i in range(n)]


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
