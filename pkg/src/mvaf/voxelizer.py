"""Dynamic (padding-free) pillarization: crop, assign, max-pool, scatter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .geometry import ViewMapping, cylindrical


@dataclass(frozen=True)
class VoxelGridSpec:
    """A 2D pillar grid over two point coordinates.

    ``kind`` selects the coordinates: ``"bev"`` grids (y rows, x cols) and
    crops z; ``"rv"`` grids (z rows, phi cols) on the cylinder.  Ranges are
    ``(min, max)`` pairs; grid dims are ``range / cell`` rounded to the
    nearest integer, and the grid's far edge (``min + dims * cell``) is
    the effective crop bound.
    """

    kind: str
    row_range: tuple[float, float]
    col_range: tuple[float, float]
    cell: tuple[float, float]  # (row cell, col cell)
    extra_range: tuple[float, float] | None = None  # z for BEV

    def __post_init__(self):
        if self.kind not in ("bev", "rv"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if min(self.cell) <= 0:
            raise ValueError("cell sizes must be positive")
        for lo, hi in (self.row_range, self.col_range):
            if hi <= lo:
                raise ValueError("empty axis range")

    @property
    def dims(self) -> tuple[int, int]:
        return (
            int(round((self.row_range[1] - self.row_range[0]) / self.cell[0])),
            int(round((self.col_range[1] - self.col_range[0]) / self.cell[1])),
        )

    @property
    def origin(self) -> tuple[float, float]:
        return self.row_range[0], self.col_range[0]

    def upper(self) -> tuple[float, float]:
        rows, cols = self.dims
        return (
            min(self.row_range[1], self.row_range[0] + rows * self.cell[0]),
            min(self.col_range[1], self.col_range[0] + cols * self.cell[1]),
        )

    def grid_coords(self, points: np.ndarray) -> np.ndarray:
        """(N, 2) continuous (row-axis, col-axis) coordinates in world units."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "bev":
            return np.stack([points[:, 1], points[:, 0]], axis=1)
        cyl = cylindrical(points)
        return np.stack([cyl[:, 2], cyl[:, 1]], axis=1)

    def mapping(self, stride: int) -> ViewMapping:
        return ViewMapping("BEV" if self.kind == "bev" else "RV", stride, self.dims,
                           origin=self.origin, cell=self.cell)


def bev_spec(x_range=(0.0, 70.4), y_range=(-40.0, 40.0), z_range=(-1.0, 3.0), cell=0.2) -> VoxelGridSpec:
    return VoxelGridSpec("bev", tuple(y_range), tuple(x_range), (cell, cell), tuple(z_range))


def rv_spec(phi_range=(-math.pi / 2, math.pi / 2), z_range=(-1.0, 3.0), phi_cell=0.002454, z_cell=0.05) -> VoxelGridSpec:
    return VoxelGridSpec("rv", tuple(z_range), tuple(phi_range), (z_cell, phi_cell))


def crop_points(points: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Indices and rows of points inside the grid, half-open per axis, order kept."""
    points = np.asarray(points)
    coords = spec.grid_coords(points)
    (r0, c0), (r1, c1) = spec.origin, spec.upper()
    keep = (coords[:, 0] >= r0) & (coords[:, 0] < r1) & (coords[:, 1] >= c0) & (coords[:, 1] < c1)
    if spec.extra_range is not None:
        z = points[:, 2]
        keep &= (z >= spec.extra_range[0]) & (z < spec.extra_range[1])
    idx = np.flatnonzero(keep)
    return idx, points[idx]


@dataclass
class PillarAssignment:
    """Per-point pillar ids plus the occupied pillars' cells.

    ``point_pillar[i]`` indexes ``occupied``; ``occupied_cells`` rows are
    (batch, row, col).  Ids are ordered by flat cell index.
    """

    point_pillar: np.ndarray
    occupied_cells: np.ndarray
    dims: tuple[int, int]
    batch_size: int = 1

    @property
    def n_pillars(self) -> int:
        return len(self.occupied_cells)

    def counts(self) -> np.ndarray:
        return np.bincount(self.point_pillar, minlength=self.n_pillars)

    def groups(self) -> F.Groups:
        return F.Groups(self.point_pillar, self.n_pillars)


def assign_pillars(points: np.ndarray, spec: VoxelGridSpec, batch: np.ndarray | None = None) -> PillarAssignment:
    """Cell of every (already cropped) point: ``floor((coord - min) / cell)``."""
    coords = spec.grid_coords(points)
    rows_n, cols_n = spec.dims
    row = np.floor((coords[:, 0] - spec.origin[0]) / spec.cell[0]).astype(np.int64)
    col = np.floor((coords[:, 1] - spec.origin[1]) / spec.cell[1]).astype(np.int64)
    # float rounding at the far edge can land one past the last cell
    row = np.clip(row, 0, rows_n - 1)
    col = np.clip(col, 0, cols_n - 1)
    b = np.zeros(len(row), dtype=np.int64) if batch is None else np.asarray(batch, dtype=np.int64)
    flat = (b * rows_n + row) * cols_n + col
    uniq, inverse = np.unique(flat, return_inverse=True)
    cells = np.stack([uniq // (rows_n * cols_n), (uniq // cols_n) % rows_n, uniq % cols_n], axis=1)
    batch_size = int(b.max()) + 1 if len(b) else 1
    return PillarAssignment(inverse.reshape(-1).astype(np.int64), cells, (rows_n, cols_n), batch_size)


def pillar_max_pool(point_features: Tensor, assignment: PillarAssignment) -> Tensor:
    """(N, C) point features -> (P, C) channel-wise maxima per occupied pillar."""
    return F.grouped_max(point_features, assignment.groups())


def scatter_to_pseudo_image(pillar_features: Tensor, assignment: PillarAssignment,
                            batch_size: int | None = None) -> Tensor:
    """(P, C) pillar features -> (B, C, rows, cols) image, zero elsewhere."""
    cells = assignment.occupied_cells
    b = batch_size or assignment.batch_size
    return F.scatter_to_grid(pillar_features, cells[:, 0], cells[:, 1], cells[:, 2], (b, *assignment.dims))
