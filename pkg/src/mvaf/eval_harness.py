"""KITTI-style evaluation (AP over 40 recall positions), ablations and feature dumps."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .config import dump_config

DIFFICULTIES = ("easy", "moderate", "hard")
# (min bbox height px, max occlusion, max truncation)
DIFFICULTY_LIMITS = {"easy": (40.0, 0, 0.15), "moderate": (25.0, 1, 0.30), "hard": (25.0, 2, 0.50)}
RECALL_POSITIONS = np.arange(1, 41) / 40.0


def difficulty_of(label) -> str | None:
    """Easiest stratum the label qualifies for, or None."""
    height = label.bbox[3] - label.bbox[1]
    for name in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[name]
        if height >= min_h and label.occluded <= max_occ and label.truncated <= max_trunc:
            return name
    return None


def qualifies(label, difficulty: str | None) -> bool:
    """KITTI strata are cumulative: a moderate query also counts easy objects."""
    if difficulty is None:
        return True
    d = difficulty_of(label)
    return d is not None and DIFFICULTIES.index(d) <= DIFFICULTIES.index(difficulty)


# -- problem description -------------------------------------------------------------------------
@dataclass
class FrameGT:
    """Ground truth of one frame: boxes plus which of them count as targets.

    Boxes with ``care[i]`` False (wrong difficulty) may be matched but are
    neither TP nor FN.  ``dontcare`` are 2D image boxes (l, t, r, b);
    detections mostly inside one are ignored rather than counted as FP.
    """

    boxes: np.ndarray  # (G, 7)
    care: np.ndarray | None = None  # (G,) bool
    dontcare: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.care = np.ones(len(self.boxes), dtype=bool) if self.care is None else np.asarray(self.care, dtype=bool)
        self.dontcare = np.asarray(self.dontcare, dtype=np.float64).reshape(-1, 4)


@dataclass
class FrameDets:
    boxes: np.ndarray  # (K, 7)
    scores: np.ndarray  # (K,)
    image_boxes: np.ndarray | None = None  # (K, 4), needed only with DontCare regions

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)


@dataclass
class APResult:
    ap: float
    precision: np.ndarray  # interpolated precision at the 40 recall positions
    n_gt: int


def _iou_2d_over_det(det_box: np.ndarray, region: np.ndarray) -> float:
    w = min(det_box[2], region[2]) - max(det_box[0], region[0])
    h = min(det_box[3], region[3]) - max(det_box[1], region[1])
    area = (det_box[2] - det_box[0]) * (det_box[3] - det_box[1])
    return max(w, 0.0) * max(h, 0.0) / area if area > 0 else 0.0


def ap_40(dets: Sequence[FrameDets], gts: Sequence[FrameGT], iou_fn: Callable = geo.iou_3d,
          iou_thr: float = 0.7) -> APResult:
    """Greedy score-ordered matching over all frames, then AP over 40 recall points.

    Each detection, highest score first, takes the best still-unmatched
    gt with IoU >= ``iou_thr``.  Matching a don't-care gt, or lying inside a
    DontCare region, makes it neither TP nor FP.  Detections sharing a score
    are one operating point.  Precision is interpolated (max to the right)
    and averaged at recall 1/40 ... 1.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection frames for {len(gts)} gt frames")
    n_gt = int(sum(g.care.sum() for g in gts))
    if n_gt == 0:
        return APResult(0.0, np.zeros(40), 0)
    order = []
    for f, d in enumerate(dets):
        for k in range(len(d.scores)):
            order.append((-d.scores[k], f, tuple(d.boxes[k]), k))
    order.sort()  # deterministic, independent of input order
    used = [np.zeros(len(g.boxes), dtype=bool) for g in gts]
    ious = [iou_fn_matrix(d.boxes, g.boxes, iou_fn) for d, g in zip(dets, gts)]
    outcome = []  # (score, +1 tp / 0 fp)
    for neg_score, f, _, k in order:
        g = gts[f]
        row = ious[f][k] if len(g.boxes) else np.zeros(0)
        cand = np.flatnonzero((row >= iou_thr) & ~used[f])
        if len(cand):
            # prefer gts that count, then the highest overlap
            best = max(cand, key=lambda j: (g.care[j], row[j], -j))
            used[f][best] = True
            if g.care[best]:
                outcome.append((-neg_score, 1))
            continue
        d = dets[f]
        if d.image_boxes is not None and any(_iou_2d_over_det(d.image_boxes[k], r) > 0.5 for r in g.dontcare):
            continue
        outcome.append((-neg_score, 0))
    recall, precision = _pr_points(outcome, n_gt)
    interp = np.zeros(40)
    for i, r in enumerate(RECALL_POSITIONS):
        ok = recall >= r - 1e-12
        interp[i] = precision[ok].max() if ok.any() else 0.0
    return APResult(float(interp.mean()), interp, n_gt)


def iou_fn_matrix(a: np.ndarray, b: np.ndarray, iou_fn: Callable) -> np.ndarray:
    mode = {geo.iou_3d: "3d", geo.rotated_iou_bev: "bev"}.get(iou_fn)
    if mode is not None:
        return geo.iou_matrix(a, b, mode)
    return np.array([[iou_fn(x, y) for y in b] for x in a]).reshape(len(a), len(b))


def _pr_points(outcome: list[tuple[float, int]], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) at each distinct score, high to low."""
    if not outcome:
        return np.zeros(0), np.zeros(0)
    scores = np.array([s for s, _ in outcome])
    tp = np.cumsum([t for _, t in outcome])
    seen = np.arange(1, len(outcome) + 1)
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))  # end of each score block
    return tp[last] / n_gt, tp[last] / seen[last]


# -- full evaluation -----------------------------------------------------------------------------------
@dataclass
class EvalResult:
    """AP per difficulty for 3D and BEV IoU, plus an all-objects row at a looser threshold."""

    ap_3d: dict[str, float]
    ap_bev: dict[str, float]
    precision_3d: dict[str, np.ndarray]
    iou_thr: float = 0.7
    ap_loose: dict[str, float] = field(default_factory=dict)  # difficulty-free, keyed "3d"/"bev"
    loose_thr: float = 0.5

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [(f"3d@{self.iou_thr}", *(self.ap_3d[d] for d in DIFFICULTIES)),
               (f"bev@{self.iou_thr}", *(self.ap_bev[d] for d in DIFFICULTIES))]
        return out

    def summary(self) -> str:
        lines = [f"{name:<10s} easy {e:.4f}  moderate {m:.4f}  hard {h:.4f}" for name, e, m, h in self.rows()]
        for k, v in self.ap_loose.items():
            lines.append(f"{k}@{self.loose_thr} all objects {v:.4f}")
        return "\n".join(lines)


def frame_ground_truth(frame, difficulty: str | None) -> FrameGT:
    from .model import frame_boxes

    cars = [lb for lb in frame.labels if lb.type == "Car"]
    boxes = frame_boxes(frame)
    care = np.array([qualifies(lb, difficulty) for lb in cars], dtype=bool)
    dontcare = np.array([lb.bbox for lb in frame.labels if lb.ignorable]).reshape(-1, 4)
    return FrameGT(boxes, care, dontcare)


def frame_detections(dets, calib, image_size) -> FrameDets:
    w, h = image_size
    img = np.zeros((len(dets.boxes), 4))
    for i, box in enumerate(dets.boxes):
        proj = geo.image_bbox(box, calib.M_CV, (w, h))
        if proj is not None:
            img[i] = proj[0]
    return FrameDets(dets.boxes, dets.scores, img)


def evaluate_detections(frames, detections, image_size, iou_thr: float = 0.7, loose_thr: float = 0.5) -> EvalResult:
    fdets = [frame_detections(d, f.calib, image_size) for f, d in zip(frames, detections)]
    ap3, apb, prec = {}, {}, {}
    for diff in DIFFICULTIES:
        gts = [frame_ground_truth(f, diff) for f in frames]
        r3 = ap_40(fdets, gts, geo.iou_3d, iou_thr)
        ap3[diff], prec[diff] = r3.ap, r3.precision
        apb[diff] = ap_40(fdets, gts, geo.rotated_iou_bev, iou_thr).ap
    gts = [frame_ground_truth(f, None) for f in frames]
    loose = {"3d": ap_40(fdets, gts, geo.iou_3d, loose_thr).ap,
             "bev": ap_40(fdets, gts, geo.rotated_iou_bev, loose_thr).ap}
    return EvalResult(ap3, apb, prec, iou_thr, loose, loose_thr)


def run_inference(model, frames, cfg, batch_size: int | None = None):
    from .model import make_batch, predict

    bs = batch_size or cfg.train.batch_size
    out = []
    for i in range(0, len(frames), bs):
        out.extend(predict(model, make_batch(frames[i : i + bs], cfg)))
    return out


def evaluate_model(model, frames, cfg, iou_thr: float = 0.7, loose_thr: float = 0.5) -> EvalResult:
    return evaluate_detections(frames, run_inference(model, frames, cfg), cfg.model.image_size, iou_thr, loose_thr)


# -- ablation ------------------------------------------------------------------------------------------
# model overrides per variant; APW rows mirror the four component combinations
ABLATION_VARIANTS = {
    "ES": {"fusion": "es"},
    "SC": {"fusion": "sc"},
    "APF": {"fusion": "apf"},
    "APW-none": {"fusion": "apf", "apw_cls": False, "apw_ctr": False, "apw_weight": False},
    "APW-cls": {"fusion": "apf", "apw_cls": True, "apw_ctr": False, "apw_weight": False},
    "APW-cls-ctr": {"fusion": "apf", "apw_cls": True, "apw_ctr": True, "apw_weight": False},
    "APW-full": {"fusion": "apf", "apw_cls": True, "apw_ctr": True, "apw_weight": True},
}
FUSION_ROWS = ("ES", "SC", "APF")
APW_ROWS = ("APW-none", "APW-cls", "APW-cls-ctr", "APW-full")
CSV_FIELDS = ("variant", "status", "final_loss", "loss_reduction", "ap3d_easy", "ap3d_moderate", "ap3d_hard",
              "ap_bev_moderate", "ap3d_all_loose", "ap_bev_all_loose", "error")


@dataclass
class AblationRow:
    variant: str
    status: str  # "ok" or "failed"
    final_loss: float = math.nan
    loss_reduction: float = math.nan
    result: EvalResult | None = None
    error: str = ""

    def as_dict(self) -> dict[str, str]:
        r = self.result
        vals = {
            "variant": self.variant, "status": self.status,
            "final_loss": self.final_loss, "loss_reduction": self.loss_reduction,
            "ap3d_easy": r.ap_3d["easy"] if r else math.nan,
            "ap3d_moderate": r.ap_3d["moderate"] if r else math.nan,
            "ap3d_hard": r.ap_3d["hard"] if r else math.nan,
            "ap_bev_moderate": r.ap_bev["moderate"] if r else math.nan,
            "ap3d_all_loose": r.ap_loose["3d"] if r else math.nan,
            "ap_bev_all_loose": r.ap_loose["bev"] if r else math.nan,
            "error": self.error,
        }
        return {k: (f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in vals.items()}


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row.as_dict())
        return buf.getvalue()

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)


def variant_config(cfg, variant: str):
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {sorted(ABLATION_VARIANTS)}")
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **ABLATION_VARIANTS[variant]))


def run_ablation(cfg, variants: Sequence[str], frames, out_dir: str | Path | None = None,
                 log: Callable[[str], None] | None = None, trained: dict | None = None) -> AblationReport:
    """Train and evaluate every variant from the same seed.

    A variant that fails (bad config, non-finite loss) becomes a ``failed``
    row and the run moves on.  ``trained`` may map variant names to
    already-trained ``TrainState`` objects, which are evaluated as they are;
    variants with identical configs share one training run.
    """
    from .training import loss_reduction, train

    rows = []
    done = dict(trained or {})
    by_config: dict[str, object] = {}  # variants that resolve to one config train once
    for name in variants:
        try:
            vcfg = variant_config(cfg, name)
            key = dump_config(vcfg)
            state = done.get(name) or by_config.get(key)
            if state is None:
                if log:
                    log(f"[ablate] {name}: training {vcfg.train.steps} steps")
                sub = Path(out_dir) / name if out_dir is not None else None
                state = train(vcfg, frames, out_dir=sub)
            by_config[key] = state
            result = evaluate_model(state.model, frames, vcfg)
            rows.append(AblationRow(name, "ok", state.history[-1].total, loss_reduction(state.history), result))
        except (ArithmeticError, ValueError) as exc:
            rows.append(AblationRow(name, "failed", error=f"{type(exc).__name__}: {exc}"))
        if log:
            log(f"[ablate] {name}: {rows[-1].status}")
    report = AblationReport(rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(report.to_csv())
    return report


# -- visualization dumps ---------------------------------------------------------------------------------
def feature_image(values: np.ndarray, cells: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Max over points per BEV cell of a per-point scalar; empty cells are 0."""
    img = np.zeros(dims)
    np.maximum.at(img, (cells[:, 0], cells[:, 1]), values)
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Scale to 0..255 by the image maximum; a flat image stays uniform."""
    vmax = float(img.max())
    if vmax <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * img / vmax).astype(np.uint8)


def visualization_maps(model, frame, cfg) -> dict[str, np.ndarray]:
    """Per-view point-feature norms before/after the fusion module and the
    foreground weights, each as a BEV-grid float image."""
    from .model import make_batch

    model.eval()
    batch = make_batch([frame], cfg)
    out = model(batch)
    cells = out.bev_cells[:, 1:]
    dims = model.bev_spec.dims
    c = cfg.model.common_width
    maps = {}
    for i, view in enumerate(("cv", "bev", "rv")):
        before = np.linalg.norm(getattr(out.point_views, view).data, axis=1)
        maps[f"{view}_before_fusion"] = feature_image(before, cells, dims)
        if cfg.model.fusion == "apf":
            after = np.linalg.norm(out.fused.fusion.data[:, i * c : (i + 1) * c], axis=1)
            maps[f"{view}_after_fusion"] = feature_image(after, cells, dims)
    enriched = out.fused.enriched.data
    maps["before_weighting"] = feature_image(np.linalg.norm(enriched, axis=1), cells, dims)
    if out.apw is not None:
        maps["after_weighting"] = feature_image(np.linalg.norm(out.point_features.data, axis=1), cells, dims)
        maps["foreground_weight"] = feature_image(out.apw.cls.data[:, 0], cells, dims)
    return maps


def dump_visualizations(model, frame, cfg, out_dir) -> list[Path]:
    from .kitti_io import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in visualization_maps(model, frame, cfg).items():
        p = out / f"{frame.frame_id}_{name}.pgm"
        write_pgm(p, to_gray(img))
        paths.append(p)
    return paths
