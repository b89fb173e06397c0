"""Pointwise multi-view fusion: gather, attention gates, enrichment, foreground weighting."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ShapeError, Tensor, concat
from .autodiff import functional as F
from .autodiff.nn import Linear, Module, Norm
from .backbones import ViewFeatureMap

VIEWS = ("cv", "bev", "rv")


def bilinear_gather(feature_map: ViewFeatureMap | Tensor, coords: np.ndarray, valid: np.ndarray | None = None,
                    batch: np.ndarray | None = None) -> Tensor:
    """Sample a (B, C, H, W) map at continuous (row, col) feature coordinates.

    Node (i, j) holds the value at coordinate (i, j).  Rows whose point is
    invalid or outside ``[0, H-1] x [0, W-1]`` come back as zeros.
    """
    fmap = feature_map.features if isinstance(feature_map, ViewFeatureMap) else feature_map
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(coords)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    batch = np.zeros(n, dtype=np.int64) if batch is None else np.asarray(batch, dtype=np.int64)
    return F.bilinear_sample(fmap, batch, coords, valid)


@dataclass
class MultiViewPointFeatures:
    cv: Tensor
    bev: Tensor
    rv: Tensor

    def __post_init__(self):
        shapes = {v: getattr(self, v).shape for v in VIEWS}
        if len({s for s in shapes.values()}) != 1 or len(self.cv.shape) != 2:
            raise ShapeError(f"view features must share one (N, C) shape, got {shapes}")

    @property
    def width(self) -> int:
        return self.cv.shape[1]

    def extended(self) -> Tensor:
        return concat([self.cv, self.bev, self.rv], axis=1)


@dataclass
class FusedPointFeatures:
    extended: Tensor  # (N, 3C) concatenated views
    fusion: Tensor  # (N, 3C) gated (or variant-fused) features
    gates: dict[str, Tensor] | None = None
    raw_mapped: Tensor | None = None
    enriched: Tensor | None = None


@dataclass
class APWOutputs:
    cls: Tensor  # (N, 1) foreground probability
    ctr: Tensor  # (N, 3) center offsets
    weighted: Tensor
    cls_logit: Tensor | None = None


class MLP2(Module):
    """linear -> ReLU -> linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class APF(Module):
    """One gate MLP per view, each fed the full concatenated features."""

    def __init__(self, width: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or (3 * width) // 2
        self.width = width
        self.gate_cv = MLP2(3 * width, hidden, width, rng)
        self.gate_bev = MLP2(3 * width, hidden, width, rng)
        self.gate_rv = MLP2(3 * width, hidden, width, rng)


def apf_forward(mv: MultiViewPointFeatures, params: APF) -> FusedPointFeatures:
    if mv.width != params.width:
        raise ShapeError(f"apf: features of width {mv.width}, module built for ({params.width})")
    ext = mv.extended()
    gates = {v: F.sigmoid(getattr(params, f"gate_{v}")(ext)) for v in VIEWS}
    attended = [getattr(mv, v) * gates[v] for v in VIEWS]
    return FusedPointFeatures(ext, concat(attended, axis=1), gates)


class ViewProjections(Module):
    """Per-view linear maps to a common width, for the gate-free variants."""

    def __init__(self, width: int, out_width: int, rng: np.random.Generator):
        self.width = width
        self.proj_cv = Linear(width, out_width, rng)
        self.proj_bev = Linear(width, out_width, rng)
        self.proj_rv = Linear(width, out_width, rng)

    def project(self, mv: MultiViewPointFeatures) -> list[Tensor]:
        if mv.width != self.width:
            raise ShapeError(f"projection: features of width {mv.width}, module built for ({self.width})")
        return [getattr(self, f"proj_{v}")(getattr(mv, v)) for v in VIEWS]


def fusion_variant_es(mv: MultiViewPointFeatures, params: ViewProjections) -> FusedPointFeatures:
    a, b, c = params.project(mv)
    return FusedPointFeatures(mv.extended(), a + b + c)


def fusion_variant_sc(mv: MultiViewPointFeatures, params: ViewProjections) -> FusedPointFeatures:
    return FusedPointFeatures(mv.extended(), concat(params.project(mv), axis=1))


class RawEncoder(Module):
    """(x, y, z, intensity) -> linear -> norm -> ReLU."""

    def __init__(self, width: int, rng: np.random.Generator, norm: str = "batch", in_features: int = 4):
        # batch norm removes any bias, so the linear layer carries none then
        self.fc = Linear(in_features, width, rng, bias=norm != "batch")
        self.norm = Norm(width, norm)

    def forward(self, raw: Tensor) -> Tensor:
        return F.relu(self.norm(self.fc(raw)))


def enrich_with_raw(fused: FusedPointFeatures, points, params: RawEncoder) -> FusedPointFeatures:
    raw = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
    if raw.shape[0] != fused.fusion.shape[0]:
        raise ShapeError(f"enrich: {raw.shape} raw points for fused features {fused.fusion.shape}")
    mapped = params(raw)
    return replace(fused, raw_mapped=mapped, enriched=concat([fused.fusion, mapped], axis=1))


class APW(Module):
    def __init__(self, d_in: int, rng: np.random.Generator, hidden: int = 64):
        self.d_in = d_in
        self.mid = Linear(d_in, hidden, rng)
        self.cls = Linear(hidden, 1, rng)
        self.ctr = Linear(hidden, 3, rng)


def apw_forward(enriched: Tensor, params: APW, weight: bool = True) -> APWOutputs:
    """Foreground probability and center offsets per point; with ``weight``
    the features are scaled rowwise by that probability."""
    if enriched.shape[1] != params.d_in:
        raise ShapeError(f"apw: features {enriched.shape}, module expects (N, {params.d_in})")
    trunk = F.relu(params.mid(enriched))
    logit = params.cls(trunk)
    cls = F.sigmoid(logit)
    ctr = params.ctr(trunk)
    return APWOutputs(cls, ctr, enriched * cls if weight else enriched, logit)
