"""Anchor head supervision: anchors, box coding, targets, losses, decoding, NMS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff.tensor import take_rows
from .voxelizer import VoxelGridSpec

ANCHOR_SIZE = (1.6, 3.9, 1.56)  # w, l, h
ANCHOR_BOTTOM_Z = -1.78


# -- anchors ---------------------------------------------------------------------------------
@dataclass
class AnchorGrid:
    """Anchors as (rows * cols * A, 7) boxes in row-major (row, col, anchor) order."""

    boxes: np.ndarray
    dims: tuple[int, int]
    n_per_cell: int

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(spec: VoxelGridSpec, stride: int, size=ANCHOR_SIZE, bottom_z: float = ANCHOR_BOTTOM_Z,
                     yaws=(0.0, math.pi / 2)) -> AnchorGrid:
    """One anchor per yaw centered in every head cell of a BEV grid."""
    rows, cols = spec.dims[0] // stride, spec.dims[1] // stride
    step_r, step_c = spec.cell[0] * stride, spec.cell[1] * stride
    ys = spec.row_range[0] + (np.arange(rows) + 0.5) * step_r
    xs = spec.col_range[0] + (np.arange(cols) + 0.5) * step_c
    w, l, h = size
    yy, xx, aa = np.meshgrid(ys, xs, np.asarray(yaws, dtype=np.float64), indexing="ij")
    boxes = np.stack([
        xx, yy, np.full_like(xx, bottom_z + h / 2),
        np.full_like(xx, l), np.full_like(xx, w), np.full_like(xx, h), aa,
    ], axis=-1).reshape(-1, 7)
    return AnchorGrid(boxes, (rows, cols), len(yaws))


# -- box coding ------------------------------------------------------------------------------
def _check_sizes(*arrays):
    for a in arrays:
        if np.any(a[..., 3:6] <= 0):
            raise ValueError("box sizes must be positive")


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(N, 7) residuals: diagonal-normalized planar offsets, height-normalized z, log sizes, yaw difference."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    _check_sizes(gt, anchors)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.column_stack([
        (gt[:, 0] - anchors[:, 0]) / diag,
        (gt[:, 1] - anchors[:, 1]) / diag,
        (gt[:, 2] - anchors[:, 2]) / anchors[:, 5],
        np.log(gt[:, 3] / anchors[:, 3]),
        np.log(gt[:, 4] / anchors[:, 4]),
        np.log(gt[:, 5] / anchors[:, 5]),
        geo.normalize_angle(gt[:, 6] - anchors[:, 6]),
    ])


def decode_boxes(enc: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    enc = np.asarray(enc, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    _check_sizes(anchors)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.column_stack([
        enc[:, 0] * diag + anchors[:, 0],
        enc[:, 1] * diag + anchors[:, 1],
        enc[:, 2] * anchors[:, 5] + anchors[:, 2],
        np.exp(enc[:, 3]) * anchors[:, 3],
        np.exp(enc[:, 4]) * anchors[:, 4],
        np.exp(enc[:, 5]) * anchors[:, 5],
        geo.normalize_angle(enc[:, 6] + anchors[:, 6]),
    ])


def encode_box(gt, anchor) -> np.ndarray:
    return encode_boxes(geo._as_box_array(gt), geo._as_box_array(anchor))[0]


def decode_box(enc, anchor) -> geo.Box3D:
    return geo.Box3D.from_array(decode_boxes(enc, geo._as_box_array(anchor))[0])


def direction_bin(yaw_diff: np.ndarray) -> np.ndarray:
    """1 where the (normalized) yaw difference lies in [0, pi), i.e. its sine is non-negative."""
    return (geo.normalize_angle(yaw_diff) >= 0).astype(np.int64)


def wrap_half_turn(a: np.ndarray) -> np.ndarray:
    """Angles modulo pi, into [-pi/2, pi/2)."""
    return (np.asarray(a) + math.pi / 2) % math.pi - math.pi / 2


# -- targets ----------------------------------------------------------------------------------
@dataclass
class TargetAssignment:
    labels: np.ndarray  # (M,) 1 positive, 0 negative, -1 ignore
    matched_gt: np.ndarray  # (M,) gt index, -1 when unmatched
    box_targets: np.ndarray  # (M, 7) residuals, yaw taken modulo pi; rows valid on positives
    dir_targets: np.ndarray  # (M,) direction bin
    point_foreground: np.ndarray | None = None  # (N,) bool
    point_centers: np.ndarray | None = None  # (N, 3) offsets to the owning box center

    @property
    def positives(self) -> np.ndarray:
        return self.labels == 1

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.labels == 1))


def point_targets(points: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Foreground flags and center offsets; a point in several boxes uses the first."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    inside = geo.points_in_boxes(pts, gt_boxes)
    fg = inside.any(axis=1)
    owner = np.argmax(inside, axis=1)
    centers = np.zeros((len(pts), 3))
    if len(gt_boxes):
        centers[fg] = gt_boxes[owner[fg], :3] - pts[fg]
    return fg, centers


def assign_targets(anchors: AnchorGrid | np.ndarray, gt_boxes: np.ndarray, pos_thr: float = 0.6,
                   neg_thr: float = 0.45, points: np.ndarray | None = None) -> TargetAssignment:
    boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    m = len(boxes)
    labels = np.zeros(m, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    if len(gt_boxes):
        iou = geo.iou_matrix(boxes, gt_boxes, "bev")
        best_gt = np.argmax(iou, axis=1)
        best_iou = iou[np.arange(m), best_gt]
        labels[best_iou >= neg_thr] = -1
        pos = best_iou >= pos_thr
        # every gt keeps its best anchor, even below the threshold
        forced = np.argmax(iou, axis=0)
        has = iou[forced, np.arange(len(gt_boxes))] > 0
        pos[forced[has]] = True
        best_gt[forced[has]] = np.arange(len(gt_boxes))[has]
        labels[pos] = 1
        matched[pos] = best_gt[pos]
    box_t = np.zeros((m, 7))
    dir_t = np.zeros(m, dtype=np.int64)
    idx = np.flatnonzero(labels == 1)
    if len(idx):
        enc = encode_boxes(gt_boxes[matched[idx]], boxes[idx])
        dir_t[idx] = direction_bin(enc[:, 6])
        enc[:, 6] = wrap_half_turn(enc[:, 6])
        box_t[idx] = enc
    fg = centers = None
    if points is not None:
        fg, centers = point_targets(points, gt_boxes)
    return TargetAssignment(labels, matched, box_t, dir_t, fg, centers)


# -- losses -------------------------------------------------------------------------------------
@dataclass(frozen=True)
class LossWeights:
    loc: float = 2.0
    cls: float = 1.0
    dir: float = 0.2
    fore: float = 1.0
    ctr: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def focal_loss(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               mask: np.ndarray | None = None, normalizer: float | None = None) -> Tensor:
    """Sum of focal terms over ``mask`` (default all) divided by
    ``normalizer`` (default the positive count, at least 1)."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    w = np.ones(p.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(p.shape)
    norm = max(float(np.sum(y * w)), 1.0) if normalizer is None else max(normalizer, 1.0)
    return F.weighted_sum(F.focal_terms(p, y, alpha, gamma), w / norm)


def focal_loss_logits(z: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
                      mask: np.ndarray | None = None, normalizer: float | None = None) -> Tensor:
    """``focal_loss`` on ``sigmoid(z)``, evaluated stably from the logits."""
    y = np.asarray(y, dtype=np.float64).reshape(z.shape)
    w = np.ones(z.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(z.shape)
    norm = max(float(np.sum(y * w)), 1.0) if normalizer is None else max(normalizer, 1.0)
    return F.weighted_sum(F.sigmoid_focal_terms(z, y, alpha, gamma), w / norm)


def smooth_l1(residual: Tensor | np.ndarray, delta: float = 1.0) -> Tensor:
    r = residual if isinstance(residual, Tensor) else Tensor(np.asarray(residual, dtype=np.float64))
    return F.smooth_l1(r, delta).sum()


def box_regression_loss(pred: Tensor, targets: np.ndarray, positives: np.ndarray, delta: float = 1.0) -> Tensor:
    """Smooth-L1 over the seven residuals of positive anchors, per positive."""
    idx = np.flatnonzero(positives)
    if len(idx) == 0:
        return (pred * 0.0).sum()
    rows = take_rows(pred, idx)
    return F.smooth_l1(rows - Tensor(targets[idx]), delta).sum() / float(len(idx))


def direction_loss(logits: Tensor, target_bins: np.ndarray, positives: np.ndarray) -> Tensor:
    idx = np.flatnonzero(positives)
    if len(idx) == 0:
        return (logits * 0.0).sum()
    return F.cross_entropy_terms(take_rows(logits, idx), np.asarray(target_bins)[idx]).sum() / float(len(idx))


def center_loss(ctr: Tensor, targets: np.ndarray, foreground: np.ndarray, delta: float = 1.0) -> Tensor:
    """Smooth-L1 on foreground rows only, averaged over those rows; 0 without any."""
    idx = np.flatnonzero(foreground)
    if len(idx) == 0:
        return (ctr * 0.0).sum()
    return F.smooth_l1(take_rows(ctr, idx) - Tensor(np.asarray(targets)[idx]), delta).sum() / float(len(idx))


LOSS_TERMS = ("loc", "cls", "dir", "fore", "ctr")


class NumericError(FloatingPointError):
    """A loss term became NaN or infinite."""


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the present terms; missing terms count as zero."""
    total = None
    for name in LOSS_TERMS:
        if name not in parts:
            continue
        value = parts[name]
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite ({v})")
        term = value * getattr(weights, name)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# -- decoding and NMS ------------------------------------------------------------------------------
@dataclass
class Detections:
    boxes: np.ndarray  # (K, 7)
    scores: np.ndarray  # (K,)

    def __len__(self) -> int:
        return len(self.scores)


def nms_bev(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.5, max_out: int | None = None) -> np.ndarray:
    """Greedy rotated-BEV NMS; equal scores resolve to the lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    order = np.argsort(-np.asarray(scores), kind="stable")
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        if max_out is not None and len(keep) >= max_out:
            break
        alive[i] = False
        near = np.flatnonzero(alive & (np.hypot(*(boxes[:, :2] - boxes[i, :2]).T) < radius + radius[i]))
        for j in near:
            if geo.rotated_iou_bev(boxes[i], boxes[j]) > iou_thr:
                alive[j] = False
    return np.asarray(keep, dtype=np.int64)


def decode_predictions(cls_logits: np.ndarray, box_deltas: np.ndarray, dir_logits: np.ndarray,
                       anchors: AnchorGrid | np.ndarray, score_thr: float = 0.05, nms_thr: float = 0.5,
                       pre_nms: int = 1000, max_out: int = 100) -> Detections:
    boxes_a = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors)
    scores = F._sigmoid(np.asarray(cls_logits, dtype=np.float64).reshape(-1))
    cand = np.flatnonzero(scores >= score_thr)
    if len(cand) > pre_nms:
        cand = cand[np.argsort(-scores[cand], kind="stable")[:pre_nms]]
        cand.sort()
    if len(cand) == 0:
        return Detections(np.zeros((0, 7)), np.zeros(0))
    deltas = np.asarray(box_deltas, dtype=np.float64).reshape(-1, 7)[cand]
    deltas[:, 3:6] = np.clip(deltas[:, 3:6], -4.0, 4.0)
    boxes = decode_boxes(deltas, boxes_a[cand])
    bins = np.argmax(np.asarray(dir_logits).reshape(-1, 2)[cand], axis=1)
    flip = bins != direction_bin(deltas[:, 6])
    boxes[flip, 6] = geo.normalize_angle(boxes[flip, 6] + math.pi)
    keep = nms_bev(boxes, scores[cand], nms_thr, max_out)
    return Detections(boxes[keep], scores[cand][keep])


def detections_to_labels(dets: Detections, calib, image_size: tuple[int, int]):
    """KITTI result rows (label columns plus score)."""
    from .kitti_io import Label

    out = []
    for box, score in zip(dets.boxes, dets.scores):
        loc, dims, ry = geo.lidar_box_to_camera(box, calib)
        proj = geo.image_bbox(box, calib.M_CV, image_size)
        bbox = tuple(float(v) for v in proj[0]) if proj is not None else (0.0, 0.0, 0.0, 0.0)
        alpha = float(geo.normalize_angle(ry - math.atan2(loc[0], loc[2])))
        out.append(Label("Car", 0.0, 0, alpha, bbox, dims, tuple(float(v) for v in loc), ry, float(score)))
    return out
