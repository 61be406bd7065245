"""Equirectangular encoding of LiDAR sweeps and pixel-aligned condition rasters.

Column ``j`` covers azimuth ``[-pi + j*2pi/W, -pi + (j+1)*2pi/W)`` (x forward,
y left, so azimuth 0 lands on column W/2).  Row ``i`` covers elevation
``(elev_max - (i+1)*dphi, elev_max - i*dphi]`` with row 0 at the top.
Channel 0 holds the log-scaled range in [-1, 1], channel 1 the reflectance
in [0, 1].  Empty bins carry (-1, 0) and are cleared in ``valid_mask``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from seqlidar import l4dt
from seqlidar.errors import ConfigurationError, FormatError, RangeError, ValidationError

LINE_STEP = 0.1
# generated images: a pixel counts as a return when its range channel exceeds this
# (-0.9 decodes to ~0.25 m at d_max = 80 m; the synthetic sensor never sees closer)
VALID_THRESHOLD = -0.9


@dataclass(frozen=True)
class SensorConfig:
    H: int = 32
    W: int = 128
    elev_min: float = math.radians(-25.0)
    elev_max: float = math.radians(3.0)
    d_max: float = 80.0
    has_reflectance: bool = True

    def __post_init__(self):
        if self.H < 2 or self.W < 4 or self.W % 16:
            raise ConfigurationError(f"need H >= 2 and W >= 4 divisible by 16, got {self.H}x{self.W}")
        if not self.elev_min < self.elev_max:
            raise ConfigurationError("elev_min must be below elev_max")
        if not self.d_max > 0:
            raise ConfigurationError("d_max must be positive")

    @property
    def d_azimuth(self):
        return 2.0 * math.pi / self.W

    @property
    def d_elevation(self):
        return (self.elev_max - self.elev_min) / self.H

    def azimuth_centers(self):
        return -math.pi + (np.arange(self.W) + 0.5) * self.d_azimuth

    def elevation_centers(self):
        return self.elev_max - (np.arange(self.H) + 0.5) * self.d_elevation

    def ray_directions(self):
        """Unit vectors through every bin centre, shape [H, W, 3]."""
        phi = self.elevation_centers()[:, None]
        theta = self.azimuth_centers()[None, :]
        return np.stack(
            np.broadcast_arrays(np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)),
            axis=-1,
        )


@dataclass
class PointCloud:
    """Points as an [N, 4] float64 array of (x, y, z, reflectance)."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValidationError(f"points must be [N, 4], got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def reflectance(self):
        return self.points[:, 3]

    def ranges(self):
        return np.linalg.norm(self.xyz, axis=1)

    @staticmethod
    def concat(clouds):
        clouds = list(clouds)
        if not clouds:
            return PointCloud()
        return PointCloud(np.concatenate([c.points for c in clouds], axis=0))


@dataclass
class EquirectImage:
    channels: np.ndarray
    valid_mask: np.ndarray

    @classmethod
    def empty(cls, cfg):
        ch = np.zeros((2, cfg.H, cfg.W), dtype=np.float32)
        ch[0] = -1.0
        return cls(ch, np.zeros((cfg.H, cfg.W), dtype=bool))

    @classmethod
    def from_channels(cls, channels, threshold=VALID_THRESHOLD):
        """Wrap a generated [2, H, W] array, deriving the mask by range threshold."""
        ch = np.clip(np.asarray(channels, dtype=np.float32), -1.0, 1.0)
        mask = ch[0] > threshold
        ch = ch.copy()
        ch[0][~mask] = -1.0
        ch[1][~mask] = 0.0
        ch[1] = np.clip(ch[1], 0.0, 1.0)
        return cls(ch, mask)


@dataclass
class OrientedBox:
    """Upright 3D box: centre, length along the heading, width, height."""

    center: tuple
    l: float
    w: float
    h: float
    heading: float = 0.0
    category: str = "car"

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if min(self.l, self.w, self.h) <= 0:
            raise ValidationError(f"box extents must be positive, got {self.l}, {self.w}, {self.h}")

    def rotation(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self):
        """Eight corners, index bits (x, y, z) = (bit2, bit1, bit0) of the local sign pattern."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * (0.5 * np.array([self.l, self.w, self.h]))
        return local @ self.rotation().T + np.asarray(self.center)

    def edges(self):
        corners = self.corners()
        pairs = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]
        return [(corners[a], corners[b]) for a, b in pairs]

    def to_local(self, xyz):
        return (np.asarray(xyz) - np.asarray(self.center)) @ self.rotation()

    def contains(self, xyz, margin=0.0):
        local = np.abs(self.to_local(xyz))
        half = 0.5 * np.array([self.l, self.w, self.h]) + margin
        return np.all(local <= half, axis=-1)


# -- range scaling -------------------------------------------------------------------


def scale_range(d, d_max):
    """Map metres in [0, d_max] to [-1, 1] via ``2 log(d+1)/log(d_max+1) - 1``."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0) or np.any(d_arr > d_max) or np.any(np.isnan(d_arr)):
        raise RangeError(f"range must lie in [0, {d_max}]")
    out = 2.0 * np.log1p(d_arr) / math.log1p(d_max) - 1.0
    return float(out) if out.ndim == 0 else out


def unscale_range(v, d_max):
    """Inverse of :func:`scale_range`."""
    v_arr = np.asarray(v, dtype=np.float64)
    out = np.expm1(0.5 * (v_arr + 1.0) * math.log1p(d_max))
    return float(out) if out.ndim == 0 else out


# -- projection ----------------------------------------------------------------------


def bin_indices(xyz, cfg):
    """Pixel (row, col) and range for each point, plus a keep mask.

    Points are dropped when outside the elevation field of view, beyond
    ``d_max`` or at the sensor origin.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rng = np.linalg.norm(xyz, axis=1)
    keep = (rng > 0) & (rng <= cfg.d_max)
    safe = np.where(keep, rng, 1.0)
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    phi = np.arcsin(np.clip(xyz[:, 2] / safe, -1.0, 1.0))
    col = np.floor((theta + math.pi) / cfg.d_azimuth).astype(np.int64) % cfg.W
    row = np.floor((cfg.elev_max - phi) / cfg.d_elevation).astype(np.int64)
    keep &= (row >= 0) & (row < cfg.H)
    return row, col, rng, keep


def project(pc, cfg):
    """Rasterize a point cloud; the nearest point wins each bin."""
    img = EquirectImage.empty(cfg)
    if len(pc) == 0:
        return img
    row, col, rng, keep = bin_indices(pc.xyz, cfg)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return img
    order = idx[np.argsort(rng[idx], kind="stable")]
    flat = row[order] * cfg.W + col[order]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    r, c = row[win], col[win]
    img.channels[0, r, c] = scale_range(rng[win], cfg.d_max)
    img.channels[1, r, c] = np.clip(pc.reflectance[win], 0.0, 1.0)
    img.valid_mask[r, c] = True
    return img


def unproject(img, cfg):
    """One point per valid pixel, along the bin-centre ray at the decoded range."""
    r, c = np.nonzero(img.valid_mask)
    if r.size == 0:
        return PointCloud()
    d = unscale_range(img.channels[0, r, c].astype(np.float64), cfg.d_max)
    phi = cfg.elevation_centers()[r]
    theta = cfg.azimuth_centers()[c]
    xyz = np.stack(
        [d * np.cos(phi) * np.cos(theta), d * np.cos(phi) * np.sin(theta), d * np.sin(phi)], axis=1
    )
    refl = img.channels[1, r, c].astype(np.float64)
    return PointCloud(np.concatenate([xyz, refl[:, None]], axis=1))


# -- condition rasters ----------------------------------------------------------------


def sample_segment(a, b, step=LINE_STEP):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
    u = np.linspace(0.0, 1.0, n + 1)[:, None]
    return a + u * (b - a)


def sample_polyline(points, step=LINE_STEP):
    points = np.asarray(points, float)
    if len(points) < 2:
        return points.reshape(-1, 3)
    return np.concatenate([sample_segment(points[k], points[k + 1], step) for k in range(len(points) - 1)])


def _rasterize(samples, cfg):
    out = np.zeros((cfg.H, cfg.W), dtype=np.float32)
    if len(samples) == 0:
        return out
    row, col, _, keep = bin_indices(samples, cfg)
    out[row[keep], col[keep]] = 1.0
    return out


def box_wireframe_samples(box, step=LINE_STEP):
    return np.concatenate([sample_segment(a, b, step) for a, b in box.edges()])


def render_box_layer(boxes, cfg):
    """Binary [H, W] raster of 3D box wireframes."""
    samples = [box_wireframe_samples(b) for b in boxes]
    return _rasterize(np.concatenate(samples) if samples else np.zeros((0, 3)), cfg)


def render_layout_layer(layout, cfg):
    """Binary [H, W] raster of curb/lane polylines."""
    samples = [sample_polyline(p) for p in layout]
    return _rasterize(np.concatenate(samples) if samples else np.zeros((0, 3)), cfg)


def render_road_sketch(layout, boxes, cfg):
    """Two-channel sketch: channel 0 road polylines, channel 1 box wireframes."""
    for b in boxes:
        if min(b.l, b.w, b.h) <= 0:
            raise ValidationError("degenerate box in sketch")
    return np.stack([render_layout_layer(layout, cfg), render_box_layer(boxes, cfg)])


def render_object_prior(obj_points, cfg):
    """Project synthetic object points with the same rule as :func:`project`."""
    return project(obj_points, cfg).channels


# -- file formats ---------------------------------------------------------------------


def write_ply(path, pc):
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property double x",
        "property double y",
        "property double z",
        "property double reflectance",
        "end_header",
    ]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in pc.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    try:
        end = text.index("end_header")
    except ValueError:
        raise FormatError(f"{path}: missing end_header") from None
    count = 0
    for line in text[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    rows = [list(map(float, line.split())) for line in text[end + 1 : end + 1 + count]]
    if len(rows) != count:
        raise FormatError(f"{path}: expected {count} vertices, found {len(rows)}")
    return PointCloud(np.array(rows).reshape(-1, 4))


def save_cloud(path, pc):
    l4dt.save(path, pc.points.astype(np.float64))


def load_cloud(path):
    return PointCloud(l4dt.load(path))


def save_image(path, img, mask_path=None):
    l4dt.save(path, img.channels.astype(np.float32))
    if mask_path is not None:
        l4dt.save(mask_path, img.valid_mask.astype(np.float32))


def load_image(path, mask_path=None):
    ch = l4dt.load(path).astype(np.float32)
    if mask_path is not None and Path(mask_path).exists():
        return EquirectImage(ch, l4dt.load(mask_path) > 0.5)
    return EquirectImage.from_channels(ch)
