"""Point cloud <-> range image conversion for a spinning LiDAR.

A range image is an H x W grid indexed by (laser ring, azimuth bin). Row 0 is
the top laser (elevation = fov_up), azimuth decreases left to right starting
from +pi at column 0, so a counter-clockwise spin reads the image in ring-major
order. Invalid cells (no return) carry the sentinel value ``r_max``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

RANGE_IMAGE_MAGIC = b"GEMRIMG1"


@dataclass(frozen=True)
class SensorConfig:
    """Fixed sensor model: beam count, azimuth bins, vertical FOV, range gate."""

    n_lasers: int = 32
    n_azimuth: int = 1024
    fov_up: float = np.deg2rad(10.0)
    fov_down: float = np.deg2rad(-30.0)
    r_min: float = 1.0
    r_max: float = 70.0

    def __post_init__(self):
        if self.n_lasers < 2:
            raise ValueError(f"n_lasers must be >= 2, got {self.n_lasers}")
        if self.n_azimuth < 4:
            raise ValueError(f"n_azimuth must be >= 4, got {self.n_azimuth}")
        if not self.fov_down < self.fov_up:
            raise ValueError("fov_down must be strictly below fov_up")
        if not 0.0 < self.r_min < self.r_max:
            raise ValueError(
                f"need 0 < r_min < r_max, got r_min={self.r_min}, r_max={self.r_max}"
            )

    @property
    def fov(self) -> float:
        return self.fov_up - self.fov_down

    def cell_azimuth(self, col) -> np.ndarray:
        """Azimuth of the cell center(s) for column index array ``col``."""
        col = np.asarray(col, dtype=np.float64)
        return np.pi * (1.0 - 2.0 * (col + 0.5) / self.n_azimuth)

    def cell_elevation(self, row) -> np.ndarray:
        """Elevation of the cell center(s) for row index array ``row``."""
        row = np.asarray(row, dtype=np.float64)
        return self.fov_down + (1.0 - (row + 0.5) / self.n_lasers) * self.fov


@dataclass
class PointCloud:
    """Points in the sensor frame, (N, 3) float, optional intensity in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise ValueError("intensity length must match point count")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RangeImage:
    """(H, W) range grid in meters plus a validity mask; invalid cells hold r_max."""

    ranges: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.ranges.shape != self.valid.shape or self.ranges.ndim != 2:
            raise ValueError("ranges and valid must be matching 2-D grids")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ranges.shape


def project(cloud: PointCloud, cfg: SensorConfig) -> RangeImage:
    """Spherically project a point cloud onto the sensor's (ring, azimuth) grid.

    row = floor((1 - (elev - fov_down)/fov) * H) clamped to [0, H-1],
    col = floor((0.5 * (1 - atan2(y, x)/pi)) * W) mod W. When several points
    fall into one cell the nearest range wins (first LiDAR return). Points
    outside [r_min, r_max] are dropped; cells with no surviving point are
    invalid and store r_max.
    """
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        raise ValueError(f"non-finite coordinates at point indices {bad[:8].tolist()}")

    H, W = cfg.n_lasers, cfg.n_azimuth
    ranges = np.full((H, W), cfg.r_max, dtype=np.float32)
    valid = np.zeros((H, W), dtype=bool)
    if len(cloud) == 0:
        return RangeImage(ranges, valid)

    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    keep = (r >= cfg.r_min) & (r <= cfg.r_max)
    if not np.any(keep):
        return RangeImage(ranges, valid)
    x, y, z, r = x[keep], y[keep], z[keep], r[keep]

    elev = np.arctan2(z, np.sqrt(x * x + y * y))
    row = np.floor((1.0 - (elev - cfg.fov_down) / cfg.fov) * H).astype(np.int64)
    row = np.clip(row, 0, H - 1)
    col = np.floor((0.5 * (1.0 - np.arctan2(y, x) / np.pi)) * W).astype(np.int64)
    col = np.mod(col, W)

    # Nearest range wins: process in decreasing range so closer points overwrite.
    order = np.argsort(-r, kind="stable")
    ranges[row[order], col[order]] = r[order].astype(np.float32)
    valid[row[order], col[order]] = True
    return RangeImage(ranges, valid)


def unproject(img: RangeImage, cfg: SensorConfig) -> PointCloud:
    """Emit one point per valid cell at the cell-center ray and stored range.

    Points come out in ring-major order (row 0 all columns, then row 1, ...),
    matching the scan order used downstream.
    """
    H, W = img.shape
    if (H, W) != (cfg.n_lasers, cfg.n_azimuth):
        raise ValueError(f"image shape {(H, W)} does not match sensor config")
    rows, cols = np.nonzero(img.valid)
    r = img.ranges[rows, cols].astype(np.float64)
    az = cfg.cell_azimuth(cols)
    elev = cfg.cell_elevation(rows)
    cos_e = np.cos(elev)
    pts = np.stack(
        [r * cos_e * np.cos(az), r * cos_e * np.sin(az), r * np.sin(elev)], axis=1
    )
    return PointCloud(pts)


def ray_directions(cfg: SensorConfig) -> np.ndarray:
    """Unit cell-center ray directions, shape (H, W, 3)."""
    az = cfg.cell_azimuth(np.arange(cfg.n_azimuth))[None, :]
    elev = cfg.cell_elevation(np.arange(cfg.n_lasers))[:, None]
    cos_e = np.cos(elev)
    return np.stack(
        [
            cos_e * np.cos(az),
            cos_e * np.sin(az),
            np.broadcast_to(np.sin(elev), (cfg.n_lasers, cfg.n_azimuth)),
        ],
        axis=2,
    )


def save_point_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    """Write little-endian float32 (x, y, z, intensity) records (.bin)."""
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def load_point_cloud(path: str | os.PathLike) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValueError(f"{path}: size not a multiple of 4-float records")
    rec = raw.reshape(-1, 4)
    return PointCloud(rec[:, :3], rec[:, 3])


def save_range_image(path: str | os.PathLike, img: RangeImage) -> None:
    """Write the 16-byte (magic, H, W) header followed by float32 row-major data."""
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(RANGE_IMAGE_MAGIC)
        f.write(struct.pack("<II", H, W))
        f.write(img.ranges.astype("<f4").tobytes())


def load_range_image(path: str | os.PathLike, cfg: SensorConfig | None = None) -> RangeImage:
    """Read a range image file; cells at/above r_max are marked invalid.

    The file stores ranges only, so validity is reconstructed from the r_max
    sentinel (pass ``cfg`` to use its r_max; default is the per-file maximum).
    """
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != RANGE_IMAGE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        H, W = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * H * W), dtype="<f4").reshape(H, W)
    sentinel = cfg.r_max if cfg is not None else float(data.max())
    return RangeImage(data.copy(), data < sentinel)
