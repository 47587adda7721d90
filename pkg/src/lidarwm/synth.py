"""Procedural LiDAR world: ground plane plus axis-aligned boxes, rendered analytically.

Every sequence comes with ground-truth ego motion, BEV layouts, and a per-point
dynamic mask, so disentanglement and forecasting claims can be checked against
a known decomposition. All sampling is driven by ``numpy.random.SeedSequence``
children, so a seed fully determines the output and frames can be rendered in
parallel without shifting streams.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import (
    PointCloud,
    SensorConfig,
    load_point_cloud,
    ray_directions,
    save_point_cloud,
)

EGO_PROFILES = ("straight", "arc", "stop")

# hit-kind codes used by render_sweep
HIT_GROUND, HIT_STATIC, HIT_DYNAMIC = 0, 1, 2


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one procedurally generated sequence."""

    n_static_boxes: int = 12
    n_dynamic_boxes: int = 4
    box_size_range: tuple[float, float] = (1.5, 4.0)
    velocity_range: tuple[float, float] = (1.0, 3.0)
    ego_profile: str = "straight"
    frames: int = 12
    frame_dt: float = 0.5
    seed: int = 0
    ground_z: float = -2.0
    spawn_radius: tuple[float, float] = (6.0, 30.0)
    ego_speed_range: tuple[float, float] = (0.8, 2.2)
    bev_grid: int = 64
    bev_extent: float = 64.0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"frames must be >= 2, got {self.frames}")
        if self.ego_profile not in EGO_PROFILES:
            raise ValueError(f"ego_profile must be one of {EGO_PROFILES}")
        if self.velocity_range[0] > self.velocity_range[1]:
            raise ValueError("velocity_range must be (low, high)")
        if self.bev_grid < 16 or self.bev_extent <= 0:
            raise ValueError("bev_grid must be >= 16 and bev_extent > 0")


@dataclass
class Box:
    """Axis-aligned box; dynamic boxes translate at constant planar velocity."""

    center: np.ndarray          # (3,) at frame 0, world frame
    half: np.ndarray            # (3,) half extents
    velocity: np.ndarray        # (2,) world m/s; zeros for static boxes
    dynamic: bool

    def center_at(self, frame: int, dt: float) -> np.ndarray:
        c = self.center.copy()
        c[:2] += self.velocity * (frame * dt)
        return c


@dataclass
class Scene:
    ground_z: float
    boxes: list[Box]


@dataclass
class BEVLayout:
    """Ego-centered, world-axis-aligned occupancy grid: 0 free, 1 static, 2 dynamic."""

    grid: np.ndarray
    extent: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError("layout grid must be square")
        if self.grid.shape[0] < 16 or self.extent <= 0:
            raise ValueError("layout grid must be >= 16 cells and extent > 0")


@dataclass
class SceneFrame:
    cloud: PointCloud
    ego: np.ndarray             # (dx, dy, dyaw) SE(2) delta from previous frame
    layout: BEVLayout
    dynamic_mask: np.ndarray    # per-point bool: hit a moving box

    def __post_init__(self):
        if len(self.dynamic_mask) != len(self.cloud):
            raise ValueError("dynamic_mask length must equal point count")


def integrate_poses(deltas: np.ndarray) -> np.ndarray:
    """Accumulate per-frame SE(2) deltas (applied in the previous ego frame)."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 3)
    poses = np.zeros_like(deltas)
    x = y = yaw = 0.0
    for k, (dx, dy, dyaw) in enumerate(deltas):
        c, s = np.cos(yaw), np.sin(yaw)
        x += c * dx - s * dy
        y += s * dx + c * dy
        yaw += dyaw
        poses[k] = (x, y, yaw)
    return poses


def transform_to_world(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Map sensor-frame points to the world frame under an SE(2) pose (z kept)."""
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.asarray(points, dtype=np.float64).copy()
    px, py = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * px - s * py + x
    out[:, 1] = s * px + c * py + y
    return out


def _sample_ego_deltas(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    deltas = np.zeros((spec.frames, 3))
    if spec.ego_profile == "stop":
        return deltas
    v = rng.uniform(*spec.ego_speed_range)
    step = v * spec.frame_dt
    if spec.ego_profile == "straight":
        deltas[1:] = (step, 0.0, 0.0)
    else:  # arc: constant curvature, constant speed
        kappa = rng.uniform(0.02, 0.08) * rng.choice([-1.0, 1.0])
        deltas[1:] = (step, 0.0, kappa * step)
    return deltas


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box]:
    boxes = []
    n_total = spec.n_static_boxes + spec.n_dynamic_boxes
    for i in range(n_total):
        dynamic = i >= spec.n_static_boxes
        radius = rng.uniform(*spec.spawn_radius)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        size = rng.uniform(spec.box_size_range[0], spec.box_size_range[1], size=3)
        half = size / 2.0
        center = np.array(
            [radius * np.cos(theta), radius * np.sin(theta), spec.ground_z + half[2]]
        )
        if dynamic:
            speed = rng.uniform(*spec.velocity_range)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            vel = speed * np.array([np.cos(heading), np.sin(heading)])
        else:
            vel = np.zeros(2)
        boxes.append(Box(center, half, vel, dynamic))
    return boxes


def build_scene(spec: SceneSpec) -> tuple[Scene, np.ndarray]:
    """Sample the scene and ego trajectory for a spec (deterministic in seed)."""
    root = np.random.SeedSequence(spec.seed)
    box_rng = np.random.default_rng(root.spawn(1)[0])
    ego_rng = np.random.default_rng(root.spawn(1)[0])
    scene = Scene(spec.ground_z, _sample_boxes(spec, box_rng))
    deltas = _sample_ego_deltas(spec, ego_rng)
    return scene, deltas


def render_sweep(
    scene: Scene, pose: np.ndarray, cfg: SensorConfig, frame: int = 0, dt: float = 0.0
) -> tuple[PointCloud, np.ndarray]:
    """Cast one cell-center ray per (row, col) and keep the nearest hit in range.

    Returns the cloud in the sensor frame plus a per-point hit-kind array
    (HIT_GROUND / HIT_STATIC / HIT_DYNAMIC). Boxes are axis-aligned in the
    world frame, so the slab test is exact.
    """
    x0, y0, yaw = pose
    dirs = ray_directions(cfg).reshape(-1, 3)
    c, s = np.cos(yaw), np.sin(yaw)
    d = dirs.copy()
    d[:, 0] = c * dirs[:, 0] - s * dirs[:, 1]
    d[:, 1] = s * dirs[:, 0] + c * dirs[:, 1]
    origin = np.array([x0, y0, 0.0])

    n_rays = d.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_kind = np.full(n_rays, -1, dtype=np.int8)

    # ground plane z = ground_z
    dz = d[:, 2]
    with np.errstate(divide="ignore"):
        t_plane = (scene.ground_z - origin[2]) / dz
    hit = np.isfinite(t_plane) & (t_plane > 0)
    best_t[hit] = t_plane[hit]
    best_kind[hit] = HIT_GROUND

    for box in scene.boxes:
        center = box.center_at(frame, dt)
        lo = center - box.half
        hi = center + box.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None, :] - origin[None, :]) / d
            t2 = (hi[None, :] - origin[None, :]) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > 0) & np.isfinite(t_near)
        closer = hit & (t_near < best_t)
        best_t[closer] = t_near[closer]
        best_kind[closer] = HIT_DYNAMIC if box.dynamic else HIT_STATIC

    in_range = (best_kind >= 0) & (best_t >= cfg.r_min) & (best_t <= cfg.r_max)
    t = best_t[in_range]
    pts = dirs[in_range] * t[:, None]  # sensor frame: range along the local ray
    kind = best_kind[in_range]
    intensity = np.where(kind == HIT_GROUND, 0.2, 0.8)
    return PointCloud(pts, intensity), kind


def rasterize_bev(
    scene: Scene,
    pose: np.ndarray,
    extent: float,
    grid: int,
    frame: int = 0,
    dt: float = 0.0,
) -> BEVLayout:
    """Paint box footprints into an ego-centered, world-axis-aligned grid.

    Cell (i, j) covers world x = ego_x + (i - G/2 + 0.5) * res (same for y with
    j); a cell takes a box's class when its center lies inside the footprint.
    Dynamic boxes paint over static ones.
    """
    res = extent / grid
    idx = (np.arange(grid) - grid / 2 + 0.5) * res
    cx = pose[0] + idx[:, None]  # (G, 1) world x per row
    cy = pose[1] + idx[None, :]  # (1, G) world y per col
    out = np.zeros((grid, grid), dtype=np.uint8)
    for dynamic_pass in (False, True):
        for box in scene.boxes:
            if box.dynamic != dynamic_pass:
                continue
            center = box.center_at(frame, dt)
            inside = (
                (np.abs(cx - center[0]) <= box.half[0])
                & (np.abs(cy - center[1]) <= box.half[1])
            )
            out[inside] = 2 if box.dynamic else 1
    return BEVLayout(out, extent)


def generate_sequence(
    spec: SceneSpec, cfg: SensorConfig | None = None
) -> list[SceneFrame]:
    """Render the full sequence for a spec: clouds, ego deltas, layouts, masks."""
    cfg = cfg or SensorConfig()
    scene, deltas = build_scene(spec)
    poses = integrate_poses(deltas)
    frames = []
    for k in range(spec.frames):
        cloud, kind = render_sweep(scene, poses[k], cfg, frame=k, dt=spec.frame_dt)
        layout = rasterize_bev(
            scene, poses[k], spec.bev_extent, spec.bev_grid, frame=k, dt=spec.frame_dt
        )
        frames.append(SceneFrame(cloud, deltas[k], layout, kind == HIT_DYNAMIC))
    return frames


# ---------------------------------------------------------------------------
# sequence directory layout


def save_sequence(path: str | os.PathLike, spec: SceneSpec, frames: list[SceneFrame]) -> None:
    """Write manifest.json, frame_%04d.bin, ego.csv, layout_%04d.bin, dyn_%04d.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": asdict(spec), "frames": len(frames)}
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(path / "ego.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "dx", "dy", "dyaw"])
        for k, fr in enumerate(frames):
            writer.writerow([k] + [repr(float(v)) for v in fr.ego])
    for k, fr in enumerate(frames):
        save_point_cloud(path / f"frame_{k:04d}.bin", fr.cloud)
        (path / f"layout_{k:04d}.bin").write_bytes(fr.layout.grid.tobytes())
        (path / f"dyn_{k:04d}.bin").write_bytes(
            fr.dynamic_mask.astype(np.uint8).tobytes()
        )


def load_sequence(path: str | os.PathLike) -> tuple[SceneSpec, list[SceneFrame]]:
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    raw_spec = dict(manifest["spec"])
    for key in ("box_size_range", "velocity_range", "spawn_radius", "ego_speed_range"):
        raw_spec[key] = tuple(raw_spec[key])
    spec = SceneSpec(**raw_spec)
    n = manifest["frames"]
    deltas = np.zeros((n, 3))
    with open(path / "ego.csv", newline="") as f:
        reader = csv.reader(f)
        next(reader)  # header
        for row in reader:
            deltas[int(row[0])] = [float(v) for v in row[1:4]]
    frames = []
    for k in range(n):
        cloud = load_point_cloud(path / f"frame_{k:04d}.bin")
        grid = np.frombuffer(
            (path / f"layout_{k:04d}.bin").read_bytes(), dtype=np.uint8
        ).reshape(spec.bev_grid, spec.bev_grid)
        mask = np.frombuffer(
            (path / f"dyn_{k:04d}.bin").read_bytes(), dtype=np.uint8
        ).astype(bool)
        frames.append(
            SceneFrame(cloud, deltas[k], BEVLayout(grid.copy(), spec.bev_extent), mask)
        )
    return spec, frames


def generate_dataset(
    out_dir: str | os.PathLike,
    n_sequences: int,
    base_spec: SceneSpec,
    cfg: SensorConfig,
    seed: int,
    profiles: tuple[str, ...] = ("straight", "arc", "stop"),
    workers: int = 1,
) -> list[Path]:
    """Generate ``n_sequences`` sequence directories under ``out_dir``.

    Sequence i gets an independent seed-stream child and cycles through the
    ego profiles, so the dataset covers all motion primitives evenly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_sequences)
    jobs = []
    for i in range(n_sequences):
        seq_seed = int(children[i].generate_state(1)[0])
        spec = SceneSpec(
            **{
                **asdict(base_spec),
                "seed": seq_seed,
                "ego_profile": profiles[i % len(profiles)],
            }
        )
        jobs.append((out_dir / f"seq_{i:04d}", spec))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_render_job, [(str(p), s, cfg) for p, s in jobs]))
    else:
        for p, s in jobs:
            _render_job((str(p), s, cfg))

    manifest = {
        "n_sequences": n_sequences,
        "seed": seed,
        "sensor": asdict(cfg),
        "base_spec": asdict(base_spec),
        "profiles": list(profiles),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return [p for p, _ in jobs]


def _render_job(args) -> None:
    path, spec, cfg = args
    save_sequence(path, spec, generate_sequence(spec, cfg))


def list_sequences(dataset_dir: str | os.PathLike) -> list[Path]:
    return sorted(Path(dataset_dir).glob("seq_*"))
