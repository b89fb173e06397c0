"""The end-to-end detector: three view streams, pointwise fusion, re-voxelized head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detection as det
from . import geometry as geo
from . import voxelizer as vox
from .autodiff import Tensor, concat
from .autodiff.nn import Conv2d, Linear, Module, Norm
from .backbones import BackboneConfig, BlockConfig, ConfigError, build_backbone, forward_view, image_tensor
from .config import NetConfig, RunConfig
from .fusion import (APW, APF, APWOutputs, FusedPointFeatures, MultiViewPointFeatures, RawEncoder, ViewProjections,
                     apf_forward, apw_forward, bilinear_gather, enrich_with_raw, fusion_variant_es, fusion_variant_sc)

# per-point encoder inputs: 4 normalized coordinates plus 2 offsets to the pillar center
POINT_FEATURES = 6


def grid_specs(cfg: RunConfig) -> tuple[vox.VoxelGridSpec, vox.VoxelGridSpec]:
    g = cfg.grid
    bev = vox.bev_spec(g.x_range, g.y_range, g.z_range, g.bev_cell)
    rv = vox.rv_spec(g.phi_range, g.z_range, g.rv_phi_cell, g.rv_z_cell)
    return bev, rv


def _net(net: NetConfig, in_channels: int, role: str, norm: str, target_stride: int = 2, first: int = 0) -> BackboneConfig:
    blocks = tuple(BlockConfig(n, c) for n, c in zip(net.layers, net.channels))
    return BackboneConfig(in_channels, blocks, net.upsample_channels, target_stride, first, norm, role=role)


# -- batches ---------------------------------------------------------------------------------
@dataclass
class SceneBatch:
    """Cropped points of several frames with their targets' raw material.

    ``points`` are in the (possibly augmented) LiDAR frame; ``camera_points``
    are the same points before augmentation, which is what the image saw.
    """

    points: np.ndarray  # (N, 4)
    batch: np.ndarray  # (N,)
    camera_points: np.ndarray  # (N, 3)
    images: np.ndarray  # (B, H, W, 3)
    cv_matrices: np.ndarray  # (B, 3, 4)
    gt_boxes: list[np.ndarray]  # per frame (G, 7)
    frame_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.gt_boxes)


def frame_boxes(frame) -> np.ndarray:
    cars = [geo.camera_label_to_lidar_box(lb, frame.calib).to_array() for lb in frame.labels if lb.type == "Car"]
    return np.asarray(cars, dtype=np.float64).reshape(-1, 7)


def make_batch(frames, cfg: RunConfig, rng: np.random.Generator | None = None) -> SceneBatch:
    """Crop every frame to the BEV and RV grids; augment when ``rng`` is given
    and the config enables it."""
    bev, rv = grid_specs(cfg)
    w, h = cfg.model.image_size
    pts, bidx, cam, imgs, mats, boxes = [], [], [], [], [], []
    t = cfg.train
    for b, frame in enumerate(frames):
        if frame.image.data.shape[:2] != (h, w):
            raise ConfigError(f"frame {frame.frame_id}: image {frame.image.data.shape[1::-1]} "
                              f"does not match model.image_size {(w, h)}")
        raw = frame.cloud.points.astype(np.float64)
        gt = frame_boxes(frame)
        moved = raw
        if rng is not None and t.augment:
            params = geo.sample_augmentation(rng, t.rotation_range, t.scale_range, t.flip_prob)
            moved, gt = geo.augment_scene(raw, gt, params)
        keep, _ = vox.crop_points(moved, bev)
        keep = keep[vox.crop_points(moved[keep], rv)[0]]
        pts.append(moved[keep])
        cam.append(raw[keep, :3])
        bidx.append(np.full(len(keep), b, dtype=np.int64))
        imgs.append(frame.image.data)
        mats.append(frame.calib.M_CV)
        boxes.append(gt)
    return SceneBatch(np.concatenate(pts), np.concatenate(bidx), np.concatenate(cam), np.stack(imgs),
                      np.stack(mats), boxes, [f.frame_id for f in frames])


# -- model ------------------------------------------------------------------------------------------
@dataclass
class ForwardOutputs:
    cls_logits: Tensor  # (B, M) one logit per anchor
    box_deltas: Tensor  # (B, M, 7)
    dir_logits: Tensor  # (B, M, 2)
    point_views: MultiViewPointFeatures
    fused: FusedPointFeatures
    apw: APWOutputs | None
    point_features: Tensor  # what gets re-voxelized
    bev_cells: np.ndarray  # (N, 3) batch, row, col of every point


def _scaled(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (values - lo) / (hi - lo) - 0.5


class MultiViewDetector(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        m = cfg.model
        self.cfg = cfg
        self.bev_spec, self.rv_spec = grid_specs(cfg)
        self.anchors = det.generate_anchors(self.bev_spec, 2, cfg.head.anchor_size, cfg.head.anchor_bottom_z,
                                            cfg.head.anchor_yaws)

        self.bev_points = RawEncoder(m.point_width, rng, m.norm, POINT_FEATURES)
        self.rv_points = RawEncoder(m.point_width, rng, m.norm, POINT_FEATURES)
        self.bev_net = build_backbone(_net(m.bev_net, m.point_width, "bev", m.norm), rng)
        self.rv_net = build_backbone(_net(m.rv_net, m.point_width, "rv", m.norm), rng)
        self.cv_net = build_backbone(_net(m.cv_net, 3, "cv", m.norm, 4, 1), rng)
        # gather stage: every view to the common width C
        self.to_common_cv = Linear(self.cv_net.config.out_channels, m.common_width, rng)
        self.to_common_bev = Linear(self.bev_net.config.out_channels, m.common_width, rng)
        self.to_common_rv = Linear(self.rv_net.config.out_channels, m.common_width, rng)

        if m.fusion == "apf":
            self.fuse = APF(m.common_width, rng, m.apf_hidden)
            fused_width = 3 * m.common_width
        else:
            self.fuse = ViewProjections(m.common_width, m.common_width, rng)
            fused_width = m.common_width * (3 if m.fusion == "sc" else 1)
        self.raw = RawEncoder(m.raw_width, rng, m.norm)
        enriched_width = fused_width + m.raw_width
        self.apw = None
        if m.apw_cls or m.apw_ctr:
            self.apw = APW(enriched_width if m.apw_after_enrichment else fused_width, rng, m.apw_hidden)
        self.fusion_net = build_backbone(_net(m.fusion_net, enriched_width, "fusion", m.norm), rng)

        a = len(cfg.head.anchor_yaws)
        c = self.fusion_net.config.out_channels
        self.head_cls = Conv2d(c, a, 1, rng, padding=0)
        self.head_box = Conv2d(c, 7 * a, 1, rng, padding=0)
        self.head_dir = Conv2d(c, 2 * a, 1, rng, padding=0)
        for conv in (self.head_box, self.head_cls):
            conv.weight.data *= 0.1

    # -- streams
    def _encode_view(self, spec: vox.VoxelGridSpec, encoder: RawEncoder, batch: SceneBatch) -> tuple[Tensor, vox.PillarAssignment]:
        pts = batch.points
        assign = vox.assign_pillars(pts, spec, batch.batch)
        coords = spec.grid_coords(pts)
        cells = assign.occupied_cells[assign.point_pillar]
        r0, c0 = spec.origin
        centers = np.stack([r0 + (cells[:, 1] + 0.5) * spec.cell[0], c0 + (cells[:, 2] + 0.5) * spec.cell[1]], axis=1)
        offsets = (coords - centers) / np.asarray(spec.cell)
        g = self.cfg.grid
        if spec.kind == "bev":
            base = np.stack([_scaled(pts[:, 0], *g.x_range), _scaled(pts[:, 1], *g.y_range),
                             _scaled(pts[:, 2], *g.z_range), pts[:, 3]], axis=1)
        else:
            cyl = geo.cylindrical(pts)
            base = np.stack([cyl[:, 0] / g.x_range[1], _scaled(cyl[:, 1], *g.phi_range),
                             _scaled(cyl[:, 2], *g.z_range), pts[:, 3]], axis=1)
        feats = encoder(Tensor(np.concatenate([base, offsets], axis=1)))
        pillars = vox.pillar_max_pool(feats, assign)
        return vox.scatter_to_pseudo_image(pillars, assign, batch.size), assign

    def _gather_grid(self, fmap, spec: vox.VoxelGridSpec, batch: SceneBatch, points: np.ndarray) -> Tensor:
        coords, valid = geo.project_points(points, spec.mapping(fmap.stride))
        rows, cols = fmap.dims
        coords = np.stack([np.clip(coords[:, 0] - 0.5, 0, rows - 1), np.clip(coords[:, 1] - 0.5, 0, cols - 1)], axis=1)
        return bilinear_gather(fmap, coords, valid, batch.batch)

    # Node (i, j) of a strided map summarizes the block centered at
    # (i + 0.5, j + 0.5) in map units, hence the half-cell shifts.
    def _gather_camera(self, fmap, batch: SceneBatch) -> Tensor:
        w, h = self.cfg.model.image_size
        coords = np.zeros((len(batch.points), 2))
        valid = np.zeros(len(batch.points), dtype=bool)
        for b in range(batch.size):
            idx = np.flatnonzero(batch.batch == b)
            mapping = geo.camera_mapping(batch.cv_matrices[b], (w, h), fmap.stride)
            c, v = geo.project_points(batch.camera_points[idx], mapping)
            coords[idx] = c - 0.5
            valid[idx] = v
        rows, cols = fmap.dims
        coords = np.stack([np.clip(coords[:, 0], 0, rows - 1), np.clip(coords[:, 1], 0, cols - 1)], axis=1)
        return bilinear_gather(fmap, coords, valid, batch.batch)

    def point_views(self, batch: SceneBatch) -> MultiViewPointFeatures:
        bev_img, _ = self._encode_view(self.bev_spec, self.bev_points, batch)
        rv_img, _ = self._encode_view(self.rv_spec, self.rv_points, batch)
        bev_map = forward_view(self.bev_net, bev_img)
        rv_map = forward_view(self.rv_net, rv_img)
        cv_map = forward_view(self.cv_net, image_tensor(batch.images))
        return MultiViewPointFeatures(
            self.to_common_cv(self._gather_camera(cv_map, batch)),
            self.to_common_bev(self._gather_grid(bev_map, self.bev_spec, batch, batch.points)),
            self.to_common_rv(self._gather_grid(rv_map, self.rv_spec, batch, batch.points)),
        )

    def fuse_points(self, mv: MultiViewPointFeatures, batch: SceneBatch) -> tuple[FusedPointFeatures, APWOutputs | None, Tensor]:
        m = self.cfg.model
        if m.fusion == "apf":
            fused = apf_forward(mv, self.fuse)
        elif m.fusion == "es":
            fused = fusion_variant_es(mv, self.fuse)
        else:
            fused = fusion_variant_sc(mv, self.fuse)
        g = self.cfg.grid
        pts = batch.points
        raw = np.stack([_scaled(pts[:, 0], *g.x_range), _scaled(pts[:, 1], *g.y_range),
                        _scaled(pts[:, 2], *g.z_range), pts[:, 3]], axis=1)
        apw = None
        if self.apw is not None and not m.apw_after_enrichment:
            apw = apw_forward(fused.fusion, self.apw, m.apw_weight)
            fused = FusedPointFeatures(fused.extended, apw.weighted, fused.gates)
        fused = enrich_with_raw(fused, raw, self.raw)
        out = fused.enriched
        if self.apw is not None and m.apw_after_enrichment:
            apw = apw_forward(out, self.apw, m.apw_weight)
            out = apw.weighted
        return fused, apw, out

    def forward(self, batch: SceneBatch) -> ForwardOutputs:
        mv = self.point_views(batch)
        fused, apw, feats = self.fuse_points(mv, batch)
        assign = vox.assign_pillars(batch.points, self.bev_spec, batch.batch)
        image = vox.scatter_to_pseudo_image(vox.pillar_max_pool(feats, assign), assign, batch.size)
        fmap = forward_view(self.fusion_net, image).features
        return ForwardOutputs(*self._heads(fmap), mv, fused, apw, feats,
                              assign.occupied_cells[assign.point_pillar])

    def _heads(self, fmap: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        b, _, h, w = fmap.shape
        a = len(self.cfg.head.anchor_yaws)
        if (h, w) != self.anchors.dims:
            raise ConfigError(f"head map {h}x{w} does not match the anchor grid {self.anchors.dims}")
        cls = self.head_cls(fmap).transpose(0, 2, 3, 1).reshape(b, h * w * a)
        box = self.head_box(fmap).reshape(b, a, 7, h, w).transpose(0, 3, 4, 1, 2).reshape(b, h * w * a, 7)
        dirs = self.head_dir(fmap).reshape(b, a, 2, h, w).transpose(0, 3, 4, 1, 2).reshape(b, h * w * a, 2)
        return cls, box, dirs


def build_model(cfg: RunConfig, seed: int | None = None) -> MultiViewDetector:
    seed = cfg.train.seed if seed is None else seed
    model = MultiViewDetector(cfg, np.random.default_rng([seed, 0x5EED]))
    for mod in model.modules():
        if isinstance(mod, Norm):
            mod.momentum = cfg.model.norm_momentum
    return model


# -- losses ---------------------------------------------------------------------------------------
@dataclass
class BatchTargets:
    anchors: list[det.TargetAssignment]
    point_foreground: np.ndarray
    point_centers: np.ndarray


def batch_targets(model: MultiViewDetector, batch: SceneBatch) -> BatchTargets:
    h = model.cfg.head
    per_frame = []
    fg = np.zeros(len(batch.points), dtype=bool)
    centers = np.zeros((len(batch.points), 3))
    for b, gt in enumerate(batch.gt_boxes):
        per_frame.append(det.assign_targets(model.anchors, gt, h.pos_iou, h.neg_iou))
        idx = np.flatnonzero(batch.batch == b)
        fg[idx], centers[idx] = det.point_targets(batch.points[idx], gt)
    return BatchTargets(per_frame, fg, centers)


def loss_parts(model: MultiViewDetector, out: ForwardOutputs, targets: BatchTargets) -> dict[str, Tensor]:
    lc = model.cfg.loss
    m = model.cfg.model
    labels = np.concatenate([t.labels for t in targets.anchors])
    pos = labels == 1
    box_t = np.concatenate([t.box_targets for t in targets.anchors])
    dir_t = np.concatenate([t.dir_targets for t in targets.anchors])
    b, n = out.cls_logits.shape
    parts = {
        "cls": det.focal_loss_logits(out.cls_logits.reshape(b * n), pos.astype(np.float64), lc.focal_alpha,
                                     lc.focal_gamma, mask=labels >= 0, normalizer=float(pos.sum())),
        "loc": det.box_regression_loss(out.box_deltas.reshape(b * n, 7), box_t, pos),
        "dir": det.direction_loss(out.dir_logits.reshape(b * n, 2), dir_t, pos),
    }
    if out.apw is not None and m.apw_cls:
        fg = targets.point_foreground
        parts["fore"] = det.focal_loss_logits(out.apw.cls_logit.reshape(len(fg)), fg.astype(np.float64),
                                              lc.focal_alpha, lc.focal_gamma, normalizer=float(fg.sum()))
    if out.apw is not None and m.apw_ctr:
        parts["ctr"] = det.center_loss(out.apw.ctr, targets.point_centers, targets.point_foreground)
    return parts


def loss_weights(cfg: RunConfig) -> det.LossWeights:
    lc = cfg.loss
    return det.LossWeights(lc.loc, lc.cls, lc.dir, lc.fore, lc.ctr)


def compute_loss(model: MultiViewDetector, batch: SceneBatch) -> tuple[Tensor, dict[str, float], ForwardOutputs]:
    out = model(batch)
    parts = loss_parts(model, out, batch_targets(model, batch))
    total = det.total_loss(parts, loss_weights(model.cfg))
    return total, {k: v.item() for k, v in parts.items()}, out


# -- inference --------------------------------------------------------------------------------------
def predict(model: MultiViewDetector, batch: SceneBatch) -> list[det.Detections]:
    h = model.cfg.head
    was_training = model.training
    model.eval()
    try:
        out = model(batch)
    finally:
        model.train(was_training)
    return [
        det.decode_predictions(out.cls_logits.data[b], out.box_deltas.data[b], out.dir_logits.data[b], model.anchors,
                               h.score_threshold, h.nms_iou, max_out=h.max_detections)
        for b in range(batch.size)
    ]


def state_arrays(model: Module) -> dict[str, np.ndarray]:
    out = {f"param/{k}": p.data for k, p in model.named_parameters()}
    out.update({f"buffer/{k}": v for k, v in model.named_buffers()})
    return out


def load_state_arrays(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
    missing = sorted(expected - set(arrays))
    extra = sorted(k for k in arrays if k.startswith(("param/", "buffer/")) and k not in expected)
    if missing or extra:
        raise ConfigError(f"checkpoint does not fit the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, p in params.items():
        v = arrays[f"param/{k}"]
        if v.shape != p.shape:
            raise ConfigError(f"checkpoint {k} has shape {v.shape}, model {p.shape}")
        p.data[...] = v
    for k, buf in buffers.items():
        buf[...] = arrays[f"buffer/{k}"]
