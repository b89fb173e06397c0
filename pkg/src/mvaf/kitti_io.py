"""KITTI-format readers/writers and a synthetic scene generator.

On-disk formats:

* velodyne ``.bin``: little-endian float32 quadruples (x, y, z, intensity)
* calib ``.txt``: ``KEY: v1 v2 ...`` lines; ``P2``, ``R0_rect`` and
  ``Tr_velo_to_cam`` are required
* labels ``.txt``: 15 whitespace-separated KITTI columns (a 16th column,
  the score, is accepted for detection files)
* images: binary P6 PPM with maxval 255
* split files: one frame id per line
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo


class KittiFormatError(ValueError):
    """Malformed KITTI-format input."""


# -- point clouds --------------------------------------------------------------
@dataclass
class PointCloud:
    """(N, 4) float32 array of x, y, z (m) and intensity in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise KittiFormatError("point cloud contains non-finite values")
        pts = pts.copy()
        np.clip(pts[:, 3], 0.0, 1.0, out=pts[:, 3])
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


def read_point_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise KittiFormatError(f"{path}: {len(raw)} bytes is not a multiple of 16")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 4))


def write_point_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


# -- calibration ------------------------------------------------------------------
@dataclass
class Calib:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def __post_init__(self):
        self.P2 = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        self.R0_rect = np.asarray(self.R0_rect, dtype=np.float64).reshape(3, 3)
        self.Tr_velo_to_cam = np.asarray(self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)

    @property
    def M_CV(self) -> np.ndarray:
        """3x4 LiDAR -> image-plane (homogeneous pixel) matrix."""
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        tr = np.eye(4)
        tr[:3, :] = self.Tr_velo_to_cam
        return self.P2 @ r0 @ tr


_CALIB_SIZES = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def read_calib(path) -> Calib:
    values: dict[str, list[float]] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise KittiFormatError(f"{path}: bad numbers for {key.strip()}") from exc
    for key, size in _CALIB_SIZES.items():
        if key not in values:
            raise KittiFormatError(f"{path}: missing key {key}:")
        if len(values[key]) < size:
            raise KittiFormatError(f"{path}: key {key} has {len(values[key])} values, need {size}")
    return Calib(*(np.array(values[k][:n]) for k, n in _CALIB_SIZES.items()))


def _fmt(values) -> str:
    return " ".join(f"{v:.12e}" for v in np.asarray(values).ravel())


def write_calib(path, calib: Calib) -> None:
    lines = [f"P{i}: {_fmt(calib.P2)}" for i in range(4)]
    lines.append(f"R0_rect: {_fmt(calib.R0_rect)}")
    lines.append(f"Tr_velo_to_cam: {_fmt(calib.Tr_velo_to_cam)}")
    lines.append(f"Tr_imu_to_velo: {_fmt(np.eye(4)[:3])}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- labels ------------------------------------------------------------------------
@dataclass
class Label:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom (px)
    dimensions: tuple[float, float, float]  # h, w, l (m)
    location: tuple[float, float, float]  # camera frame, bottom center (m)
    rotation_y: float
    score: float | None = None

    @property
    def ignorable(self) -> bool:
        return self.type == "DontCare"

    def __post_init__(self):
        if not self.ignorable and min(self.dimensions) <= 0:
            raise KittiFormatError(f"label {self.type} has non-positive dimensions {self.dimensions}")


def parse_label_line(line: str) -> Label:
    cols = line.split()
    if len(cols) not in (15, 16):
        raise KittiFormatError(f"label line has {len(cols)} columns, expected 15: {line!r}")
    try:
        v = [float(c) for c in cols[1:]]
    except ValueError as exc:
        raise KittiFormatError(f"bad number in label line {line!r}") from exc
    return Label(
        type=cols[0],
        truncated=v[0],
        occluded=int(v[1]),
        alpha=v[2],
        bbox=tuple(v[3:7]),
        dimensions=tuple(v[7:10]),
        location=tuple(v[10:13]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )


def read_labels(path) -> list[Label]:
    return [parse_label_line(line) for line in Path(path).read_text().splitlines() if line.strip()]


def format_label(label: Label) -> str:
    nums = [label.truncated, label.occluded, label.alpha, *label.bbox, *label.dimensions,
            *label.location, label.rotation_y]
    text = f"{label.type} " + " ".join(
        f"{int(n)}" if i == 1 else f"{n:.6f}" for i, n in enumerate(nums)
    )
    if label.score is not None:
        text += f" {label.score:.6f}"
    return text


def write_labels(path, labels: list[Label]) -> None:
    Path(path).write_text("".join(format_label(lb) + "\n" for lb in labels))


# -- images --------------------------------------------------------------------------
@dataclass
class Image:
    """(H, W, 3) float samples in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise KittiFormatError(f"image must be HxWx3, got {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise KittiFormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_image_ppm(path) -> Image:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise KittiFormatError(f"{path}: not a binary P6 PPM")
    (_, w, h, maxval), pos = _ppm_tokens(buf, 4)
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise KittiFormatError(f"{path}: maxval {maxval}, only 255 supported")
    size = width * height * 3
    if len(buf) < pos + size:
        raise KittiFormatError(f"{path}: raster shorter than {width}x{height}x3")
    raster = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos)
    return Image(raster.reshape(height, width, 3) / 255.0)


def write_image_ppm(path, image: Image) -> None:
    raster = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + raster.tobytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    """Grayscale binary P5 PGM from a uint8 (H, W) array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise KittiFormatError(f"{path}: not a binary P5 PGM")
    (_, w, h, _), pos = _ppm_tokens(buf, 4)
    return np.frombuffer(buf, dtype=np.uint8, count=int(w) * int(h), offset=pos).reshape(int(h), int(w))


# -- split files and dataset layout ---------------------------------------------------------
def read_split(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def write_split(path, ids: list[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))


SUBDIRS = {"velodyne": ".bin", "calib": ".txt", "label_2": ".txt", "image_2": ".ppm"}


def frame_paths(root, frame_id: str, split: str = "training") -> dict[str, Path]:
    base = Path(root) / split
    return {sub: base / sub / f"{frame_id}{ext}" for sub, ext in SUBDIRS.items()}


@dataclass
class Frame:
    frame_id: str
    cloud: PointCloud
    image: Image
    calib: Calib
    labels: list[Label] = field(default_factory=list)


def load_frame(root, frame_id: str, split: str = "training") -> Frame:
    p = frame_paths(root, frame_id, split)
    labels = read_labels(p["label_2"]) if p["label_2"].exists() else []
    return Frame(frame_id, read_point_cloud(p["velodyne"]), read_image_ppm(p["image_2"]), read_calib(p["calib"]), labels)


def save_frame(root, frame: Frame, split: str = "training") -> None:
    p = frame_paths(root, frame.frame_id, split)
    for path in p.values():
        os.makedirs(path.parent, exist_ok=True)
    write_point_cloud(p["velodyne"], frame.cloud)
    write_image_ppm(p["image_2"], frame.image)
    write_calib(p["calib"], frame.calib)
    write_labels(p["label_2"], frame.labels)


# -- synthetic scenes ---------------------------------------------------------------------------
GROUND_Z = -1.73
CAR_SIZE = (3.9, 1.6, 1.56)  # l, w, h
KITTI_IMAGE = (1242, 375)
KITTI_FOCAL = 721.5377


def synthetic_calib(image_size: tuple[int, int] = (384, 128)) -> Calib:
    """KITTI-like camera rig scaled to ``image_size`` (width, height)."""
    w, h = image_size
    f = KITTI_FOCAL * w / KITTI_IMAGE[0]
    p2 = np.array([[f, 0.0, 0.5 * w, 0.0], [0.0, f, 0.46 * h, 0.0], [0.0, 0.0, 1.0, 0.0]])
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return Calib(p2, np.eye(3), tr)


def _surface_points(rng: np.random.Generator, box: np.ndarray, n: int, with_bottom: bool = False) -> np.ndarray:
    """Uniform samples on the faces of an oriented box (inside, boundary-inclusive)."""
    l, w, h = box[3:6]
    faces = [("x", l / 2, w * h), ("x", -l / 2, w * h), ("y", w / 2, l * h), ("y", -w / 2, l * h), ("z", h / 2, l * w)]
    if with_bottom:
        faces.append(("z", -h / 2, l * w))
    areas = np.array([a for _, _, a in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    for k, (axis, value, _) in enumerate(faces):
        local[pick == k, "xyz".index(axis)] = value
    c, s = math.cos(box[6]), math.sin(box[6])
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box[1]
    world[:, 2] = local[:, 2] + box[2]
    return world


def _occlusion_level(mine: np.ndarray, nearer: list[np.ndarray]) -> int:
    if not nearer:
        return 0
    h = int(math.ceil(mine[3] - mine[1])) + 1
    w = int(math.ceil(mine[2] - mine[0])) + 1
    mask = np.zeros((h, w), dtype=bool)
    for other in nearer:
        l, t = max(other[0], mine[0]) - mine[0], max(other[1], mine[1]) - mine[1]
        r, b = min(other[2], mine[2]) - mine[0], min(other[3], mine[3]) - mine[1]
        if r > l and b > t:
            mask[int(t) : int(math.ceil(b)), int(l) : int(math.ceil(r))] = True
    frac = mask.mean()
    return 0 if frac < 0.05 else 1 if frac < 0.3 else 2 if frac < 0.6 else 3


def generate_synthetic_scene(seed: int, n_cars: int, *, n_clutter: int | None = None,
                             image_size: tuple[int, int] = (384, 128), n_ground: int = 2000):
    """Cuboid cars and clutter on a flat ground plane, seen by a KITTI-like rig.

    Returns ``(PointCloud, Image, Calib, labels)``.  Cars are placed inside
    the camera field of view within x in [6, 40] m; clutter (poles and
    walls, taller than any car) defaults to one object per car, so a scene
    without cars holds ground points only.  Pure function of the arguments.
    """
    if n_cars < 0:
        raise ValueError("n_cars must be >= 0")
    rng = np.random.default_rng(seed)
    n_clutter = n_cars if n_clutter is None else n_clutter
    calib = synthetic_calib(image_size)
    m_cv = calib.M_CV
    w_img, h_img = image_size
    half_fov = math.atan(0.5 * w_img / calib.P2[0, 0])

    cars: list[np.ndarray] = []
    attempts = 0
    while len(cars) < n_cars and attempts < 1000:
        attempts += 1
        x = rng.uniform(6.0, 40.0)
        y = rng.uniform(-0.75, 0.75) * x * math.tan(half_fov)
        l = CAR_SIZE[0] + rng.uniform(-0.3, 0.3)
        w = CAR_SIZE[1] + rng.uniform(-0.1, 0.1)
        h = CAR_SIZE[2] + rng.uniform(-0.08, 0.08)
        box = np.array([x, y, GROUND_Z + h / 2, l, w, h, rng.uniform(-math.pi, math.pi)])
        if any(np.hypot(*(box[:2] - c[:2])) < 5.5 for c in cars):
            continue
        proj = geo.image_bbox(box, m_cv, image_size)
        if proj is None or proj[1] > 0.2:
            continue
        cars.append(box)

    clutter: list[np.ndarray] = []
    attempts = 0
    while len(clutter) < n_clutter and attempts < 1000:
        attempts += 1
        x, y = rng.uniform(3.0, 68.0), rng.uniform(-38.0, 38.0)
        if rng.random() < 0.5:
            sx, sy, sz = 0.3, 0.3, rng.uniform(2.6, 4.0)
        else:
            sx, sy, sz = rng.uniform(4.0, 9.0), 0.3, rng.uniform(2.6, 3.5)
        box = np.array([x, y, GROUND_Z + sz / 2, sx, sy, sz, rng.uniform(-math.pi, math.pi)])
        reach = 0.5 * math.hypot(sx, sy) + 3.5
        if any(np.hypot(*(box[:2] - c[:2])) < reach for c in cars + clutter):
            continue
        clutter.append(box)

    chunks = []
    ground = np.column_stack([
        rng.uniform(0.0, 70.0, n_ground), rng.uniform(-40.0, 40.0, n_ground),
        GROUND_Z + rng.normal(0.0, 0.02, n_ground), rng.uniform(0.05, 0.3, n_ground),
    ])
    chunks.append(ground)
    for box in cars:
        dist = math.hypot(box[0], box[1])
        n = int(np.clip(6000.0 / dist, 120, 600))
        pts = _surface_points(rng, box, n)
        chunks.append(np.column_stack([pts, rng.uniform(0.3, 0.7, n)]))
    for box in clutter:
        n = int(np.clip(60.0 * box[3] * box[5] + 40, 60, 500))
        pts = _surface_points(rng, box, n)
        chunks.append(np.column_stack([pts, rng.uniform(0.05, 0.9, n)]))
    cloud = PointCloud(np.concatenate(chunks))

    # image: sky/road backdrop, objects painted far to near
    horizon = int(calib.P2[1, 2])
    img = np.empty((h_img, w_img, 3))
    rows = np.arange(h_img)[:, None]
    img[:] = np.where(rows[..., None] < horizon, [0.55, 0.7, 0.9], [0.35, 0.35, 0.37])
    img += rng.normal(0.0, 0.03, size=img.shape)
    painted = []
    for kind, box in [("car", b) for b in cars] + [("clutter", b) for b in clutter]:
        proj = geo.image_bbox(box, m_cv, image_size)
        if proj is not None:
            painted.append((math.hypot(box[0], box[1]), kind, box, proj[0]))
    painted.sort(key=lambda t: -t[0])
    for _, kind, box, bb in painted:
        color = rng.uniform(0.1, 0.9, 3) if kind == "car" else np.array([0.45, 0.4, 0.3])
        l, t, r, b = (int(round(v)) for v in bb)
        img[t : b + 1, l : r + 1] = color
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    labels = []
    for box in cars:
        bb, trunc = geo.image_bbox(box, m_cv, image_size)
        dist = math.hypot(box[0], box[1])
        nearer = [p[3] for p in painted if p[0] < dist - 1e-9]
        loc, dims, ry = geo.lidar_box_to_camera(box, calib)
        alpha = float(geo.normalize_angle(ry - math.atan2(loc[0], loc[2])))
        labels.append(Label("Car", round(trunc, 2), _occlusion_level(bb, nearer), alpha,
                            tuple(float(v) for v in bb), dims, tuple(float(v) for v in loc), ry))
    return cloud, Image(img), calib, labels


def synthetic_frame(frame_id: str, seed: int, n_cars: int, **kwargs) -> Frame:
    cloud, image, calib, labels = generate_synthetic_scene(seed, n_cars, **kwargs)
    return Frame(frame_id, cloud, image, calib, labels)
