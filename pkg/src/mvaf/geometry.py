"""Frames, projections and oriented-box geometry.

Everything past ingestion lives in the LiDAR frame: x forward, y left,
z up.  Box yaw is a rotation about +z measured from +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a, dtype=np.float64) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # l, w, h
    yaw: float

    def __post_init__(self):
        size = tuple(float(v) for v in self.size)
        if len(size) != 3 or min(size) <= 0 or not all(math.isfinite(v) for v in size):
            raise ValueError(f"Box3D sizes must be positive, got {size}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(normalize_angle(self.yaw)))

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]), float(a[6]))

    def to_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """Stack boxes as rows of (x, y, z, l, w, h, yaw)."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.to_array() for b in boxes])


def _as_box_array(b) -> np.ndarray:
    return b.to_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)


# -- cylindrical coordinates ------------------------------------------------------
class CylindricalCoord(NamedTuple):
    rho: float
    phi: float
    z: float


def cylindrical(points: np.ndarray) -> np.ndarray:
    """(N, >=3) -> (N, 3) of (rho, phi, z); phi = atan2(y, x), 0 at the origin."""
    points = np.asarray(points, dtype=np.float64)
    rho = np.hypot(points[:, 0], points[:, 1])
    phi = np.arctan2(points[:, 1], points[:, 0])
    phi = np.where(phi >= math.pi, phi - TWO_PI, phi)
    return np.stack([rho, phi, points[:, 2]], axis=1)


def to_cylindrical(point) -> CylindricalCoord:
    rho, phi, z = cylindrical(np.asarray(point, dtype=np.float64)[None, :3])[0]
    return CylindricalCoord(float(rho), float(phi), float(z))


# -- view projections ------------------------------------------------------------------
@dataclass(frozen=True)
class ViewMapping:
    """Maps LiDAR points to continuous (row, col) feature-map coordinates.

    ``kind`` is ``"CV"``, ``"BEV"`` or ``"RV"``.  Camera mappings carry the
    3x4 LiDAR->pixel matrix and the image size; grid mappings carry the
    grid origin and cell size for (row, col) with rows along y (BEV) or
    z (RV) and cols along x (BEV) or phi (RV).  ``dims`` is the pseudo-image
    (or image) size in (rows, cols) before striding.
    """

    kind: str
    stride: int
    dims: tuple[int, int]
    matrix: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)
    cell: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("CV", "BEV", "RV"):
            raise ValueError(f"unknown view kind {self.kind!r}")
        if self.stride < 1 or min(self.cell) <= 0:
            raise ValueError("stride must be >= 1 and cell sizes > 0")
        if self.kind == "CV" and (self.matrix is None or np.shape(self.matrix) != (3, 4)):
            raise ValueError("camera mapping needs a 3x4 projection matrix")

    @property
    def feature_dims(self) -> tuple[int, int]:
        return self.dims[0] // self.stride, self.dims[1] // self.stride


def camera_mapping(matrix, image_size: tuple[int, int], stride: int) -> ViewMapping:
    """``image_size`` is (width, height) in pixels."""
    w, h = image_size
    return ViewMapping("CV", stride, (h, w), matrix=np.asarray(matrix, dtype=np.float64))


def project_points(points: np.ndarray, mapping: ViewMapping) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection: returns (N, 2) coords and an (N,) validity mask."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if mapping.kind == "CV":
        hom = np.concatenate([points[:, :3], np.ones((n, 1))], axis=1)
        p = hom @ mapping.matrix.T
        depth = p[:, 2]
        front = depth > 0
        safe = np.where(front, depth, 1.0)
        u, v = p[:, 0] / safe, p[:, 1] / safe
        h, w = mapping.dims
        valid = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        coords = np.stack([v, u], axis=1) / mapping.stride
        return coords, valid
    if mapping.kind == "BEV":
        a, b = points[:, 1], points[:, 0]
    else:
        a, b = points[:, 2], np.arctan2(points[:, 1], points[:, 0])
    rows = (a - mapping.origin[0]) / mapping.cell[0] / mapping.stride
    cols = (b - mapping.origin[1]) / mapping.cell[1] / mapping.stride
    fr, fc = mapping.dims[0] / mapping.stride, mapping.dims[1] / mapping.stride
    valid = (rows >= 0) & (rows < fr) & (cols >= 0) & (cols < fc)
    return np.stack([rows, cols], axis=1), valid


def project_to_view(point, mapping: ViewMapping) -> tuple[float, float] | None:
    coords, valid = project_points(np.asarray(point, dtype=np.float64)[None, :3], mapping)
    if not valid[0]:
        return None
    return float(coords[0, 0]), float(coords[0, 1])


# -- boxes and points --------------------------------------------------------------------
def points_in_box(points: np.ndarray, box) -> np.ndarray:
    """Boundary-inclusive membership of (N, >=3) points in one oriented box."""
    b = _as_box_array(box)
    d = np.asarray(points, dtype=np.float64)[:, :3] - b[:3]
    c, s = math.cos(b[6]), math.sin(b[6])
    local_x = c * d[:, 0] + s * d[:, 1]
    local_y = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(local_x) <= b[3] / 2) & (np.abs(local_y) <= b[4] / 2) & (np.abs(d[:, 2]) <= b[5] / 2)


def points_in_boxes(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(N, M) membership matrix."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(points), len(boxes)), dtype=bool)
    for j, b in enumerate(boxes):
        out[:, j] = points_in_box(points, b)
    return out


def point_in_box(point, box) -> bool:
    return bool(points_in_box(np.asarray(point, dtype=np.float64)[None, :3], box)[0])


def center_offset(point, box) -> np.ndarray:
    """Vector from ``point`` to the box center, LiDAR frame."""
    b = _as_box_array(box)
    return b[:3] - np.asarray(point, dtype=np.float64)[..., :3]


def bev_corners(box) -> np.ndarray:
    """(4, 2) footprint corners, counter-clockwise."""
    b = _as_box_array(box)
    hl, hw = b[3] / 2, b[4] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(b[6]), math.sin(b[6])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + b[:2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a, b) -> float:
    a, b = _as_box_array(a), _as_box_array(b)
    if a[3] * a[4] <= 0 or b[3] * b[4] <= 0:
        return 0.0
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


def _symmetric_pair(a, b):
    # Canonical operand order keeps iou(a, b) == iou(b, a) bit-exact.
    a, b = _as_box_array(a), _as_box_array(b)
    return (a, b) if tuple(a) <= tuple(b) else (b, a)


def rotated_iou_bev(a, b) -> float:
    """IoU of the yaw-rotated footprints; 0 for zero-area boxes."""
    a, b = _symmetric_pair(a, b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a, b) -> float:
    a, b = _symmetric_pair(a, b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    z_overlap = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if z_overlap <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray, mode: str = "bev") -> np.ndarray:
    """Pairwise IoU; pairs whose circumscribed circles miss are skipped."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    ra = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rb = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    dist = np.linalg.norm(boxes_a[:, None, :2] - boxes_b[None, :, :2], axis=2)
    fn = rotated_iou_bev if mode == "bev" else iou_3d
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None, :])):
        out[i, j] = fn(boxes_a[i], boxes_b[j])
    return out


# -- augmentation ----------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    rotation: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.rotation == 0.0 and self.scale == 1.0


def sample_augmentation(rng: np.random.Generator, rotation_range=(-math.pi / 4, math.pi / 4),
                        scale_range=(0.95, 1.05), flip_prob: float = 0.5) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < flip_prob),
        rotation=float(rng.uniform(*rotation_range)),
        scale=float(rng.uniform(*scale_range)),
    )


def augment_scene(points: np.ndarray, boxes: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Global flip (y -> -y), rotation about z, then uniform scaling.

    ``points`` is (N, >=3) with extra columns passed through; ``boxes`` is
    (M, 7).  Inputs are not modified.
    """
    pts = np.array(points, dtype=np.float64, copy=True)
    bxs = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 7)
    if params.flip:
        pts[:, 1] = -pts[:, 1]
        bxs[:, 1] = -bxs[:, 1]
        bxs[:, 6] = -bxs[:, 6]
    if params.rotation != 0.0:
        c, s = math.cos(params.rotation), math.sin(params.rotation)
        for arr in (pts, bxs):
            x, y = arr[:, 0].copy(), arr[:, 1].copy()
            arr[:, 0] = c * x - s * y
            arr[:, 1] = s * x + c * y
        bxs[:, 6] += params.rotation
    if params.scale != 1.0:
        pts[:, :3] *= params.scale
        bxs[:, :6] *= params.scale
    if params.flip or params.rotation != 0.0:
        bxs[:, 6] = normalize_angle(bxs[:, 6])
    return pts, bxs


def undo_augmentation(points: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Map augmented point coordinates back to the sensor frame."""
    pts = np.array(points, dtype=np.float64, copy=True)
    if params.scale != 1.0:
        pts[:, :3] /= params.scale
    if params.rotation != 0.0:
        c, s = math.cos(params.rotation), math.sin(params.rotation)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x + s * y
        pts[:, 1] = -s * x + c * y
    if params.flip:
        pts[:, 1] = -pts[:, 1]
    return pts


# -- camera <-> LiDAR boxes -------------------------------------------------------------------------
def _rigid_inverse(tr: np.ndarray) -> np.ndarray:
    rot, t = tr[:, :3], tr[:, 3]
    if abs(np.linalg.det(rot)) < 1e-9:
        raise ValueError("Tr_velo_to_cam is singular")
    inv_rot = np.linalg.inv(rot)
    return np.concatenate([inv_rot, (-inv_rot @ t)[:, None]], axis=1)


def lidar_to_rect(points: np.ndarray, calib) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    cam = pts @ calib.Tr_velo_to_cam[:, :3].T + calib.Tr_velo_to_cam[:, 3]
    return cam @ calib.R0_rect.T


def rect_to_lidar(points: np.ndarray, calib) -> np.ndarray:
    if abs(np.linalg.det(calib.R0_rect)) < 1e-9:
        raise ValueError("R0_rect is singular")
    cam = np.asarray(points, dtype=np.float64) @ np.linalg.inv(calib.R0_rect).T
    inv = _rigid_inverse(calib.Tr_velo_to_cam)
    return cam @ inv[:, :3].T + inv[:, 3]


def camera_label_to_lidar_box(label, calib) -> Box3D:
    """KITTI camera-frame label (bottom-center location) to a LiDAR box."""
    bottom = rect_to_lidar(np.asarray(label.location, dtype=np.float64)[None, :], calib)[0]
    h, w, l = label.dimensions
    center = bottom + np.array([0.0, 0.0, h / 2])
    return Box3D(tuple(center), (l, w, h), float(normalize_angle(-label.rotation_y - math.pi / 2)))


def lidar_box_to_camera(box, calib) -> tuple[np.ndarray, tuple[float, float, float], float]:
    """Inverse of ``camera_label_to_lidar_box``: (location, (h, w, l), rotation_y)."""
    b = _as_box_array(box)
    bottom = b[:3] - np.array([0.0, 0.0, b[5] / 2])
    loc = lidar_to_rect(bottom[None, :], calib)[0]
    return loc, (float(b[5]), float(b[4]), float(b[3])), float(normalize_angle(-b[6] - math.pi / 2))


def box_corners_3d(box) -> np.ndarray:
    """(8, 3) corners: footprint at the bottom face then the top face."""
    b = _as_box_array(box)
    foot = bev_corners(b)
    lo = np.column_stack([foot, np.full(4, b[2] - b[5] / 2)])
    hi = np.column_stack([foot, np.full(4, b[2] + b[5] / 2)])
    return np.concatenate([lo, hi])


def image_bbox(box, matrix: np.ndarray, image_size: tuple[int, int]) -> tuple[np.ndarray, float] | None:
    """Projected 2D bbox (left, top, right, bottom) clipped to the image,
    plus the fraction of the unclipped box area lying outside it.

    Returns None when any corner is behind the camera or the box misses
    the image entirely.
    """
    corners = box_corners_3d(box)
    hom = np.concatenate([corners, np.ones((8, 1))], axis=1) @ np.asarray(matrix).T
    if np.any(hom[:, 2] <= 0.1):
        return None
    u, v = hom[:, 0] / hom[:, 2], hom[:, 1] / hom[:, 2]
    raw = np.array([u.min(), v.min(), u.max(), v.max()])
    w, h = image_size
    clipped = np.array([max(raw[0], 0), max(raw[1], 0), min(raw[2], w - 1), min(raw[3], h - 1)])
    if clipped[2] <= clipped[0] or clipped[3] <= clipped[1]:
        return None
    raw_area = (raw[2] - raw[0]) * (raw[3] - raw[1])
    area = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1])
    return clipped, float(1.0 - area / raw_area) if raw_area > 0 else 0.0
