"""Run configuration: JSON-compatible, strictly validated, defaults recorded.

Every experiment reads one nested config. Unknown keys are rejected with the
full key path, out-of-range values name the offending key, and parsing records
whether each leaf came from the file or from a default (the provenance map is
written to the run log). ``serialize`` and ``parse_config_dict`` round-trip.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass


class ConfigError(ValueError):
    pass


@dataclass
class SensorSection:
    n_lasers: int = 32
    n_azimuth: int = 1024
    fov_up_deg: float = 10.0
    fov_down_deg: float = -30.0
    r_min: float = 1.0
    r_max: float = 70.0

    def validate(self, path):
        _check(self.n_lasers >= 2, path, "n_lasers", "must be >= 2")
        _check(self.n_azimuth >= 4, path, "n_azimuth", "must be >= 4")
        _check(self.fov_down_deg < self.fov_up_deg, path, "fov_down_deg",
               "must be below fov_up_deg")
        _check(0 < self.r_min < self.r_max, path, "r_min",
               "needs 0 < r_min < r_max")


@dataclass
class WorldSection:
    n_sequences: int = 200
    frames: int = 12
    frame_dt: float = 0.5
    n_static_boxes: int = 12
    n_dynamic_boxes: int = 4
    box_size_min: float = 1.5
    box_size_max: float = 4.0
    velocity_min: float = 1.0
    velocity_max: float = 3.0
    ego_speed_min: float = 0.8
    ego_speed_max: float = 2.2
    spawn_min: float = 6.0
    spawn_max: float = 30.0
    ground_z: float = -2.0
    bev_grid: int = 64
    bev_extent: float = 64.0
    profiles: list[str] = field(default_factory=lambda: ["straight", "arc", "stop"])

    def validate(self, path):
        _check(self.n_sequences >= 1, path, "n_sequences", "must be >= 1")
        _check(self.frames >= 2, path, "frames", "must be >= 2")
        _check(self.frame_dt > 0, path, "frame_dt", "must be positive")
        _check(self.n_static_boxes >= 0, path, "n_static_boxes", "must be >= 0")
        _check(self.n_dynamic_boxes >= 0, path, "n_dynamic_boxes", "must be >= 0")
        _check(self.velocity_min <= self.velocity_max, path, "velocity_min",
               "must not exceed velocity_max")
        _check(self.bev_grid >= 16, path, "bev_grid", "must be >= 16")
        _check(self.bev_extent > 0, path, "bev_extent", "must be positive")
        for p in self.profiles:
            _check(p in ("straight", "arc", "stop"), path, "profiles",
                   f"unknown ego profile {p!r}")


@dataclass
class TokenizerSection:
    codebook_size: int = 512
    latent_channels: int = 64
    beta: float = 0.25
    down_v: int = 4
    down_h: int = 8
    base_channels: int = 24
    d_state: int = 4
    adv_weight: float = 0.1
    adv_warmup_frac: float = 0.5
    steps: int = 2000
    batch_size: int = 4
    lr: float = 4e-4
    crop_w: int = 0
    dead_code_interval: int = 1000

    def validate(self, path):
        _check(self.codebook_size >= 2, path, "codebook_size", "must be >= 2")
        _check(self.latent_channels >= 1, path, "latent_channels", "must be >= 1")
        _check(self.beta >= 0, path, "beta", "must be >= 0")
        for key in ("down_v", "down_h"):
            v = getattr(self, key)
            _check(v >= 1 and (v & (v - 1)) == 0, path, key,
                   "must be a power of two")
        _check(self.steps >= 0, path, "steps", "must be >= 0")
        _check(self.batch_size >= 1, path, "batch_size", "must be >= 1")
        _check(self.lr > 0, path, "lr", "must be positive")
        _check(0 <= self.adv_warmup_frac <= 1, path, "adv_warmup_frac",
               "must be in [0, 1]")


@dataclass
class SeparatorSection:
    window: int = 5
    feature_channels: int = 64

    def validate(self, path):
        _check(self.window >= 1, path, "window", "must be >= 1")
        _check(self.feature_channels >= 1, path, "feature_channels", "must be >= 1")


@dataclass
class TriPathSection:
    blocks: int = 4
    offset_scale: float = 1.0
    d_state: int = 8
    enable_de: bool = True
    enable_se: bool = True
    enable_ddm: bool = True
    enable_sdm: bool = True
    enable_aga: bool = True

    def validate(self, path):
        _check(self.blocks >= 1, path, "blocks", "must be >= 1")
        _check(self.offset_scale >= 0, path, "offset_scale", "must be >= 0")


@dataclass
class DiffusionSection:
    total_steps: int = 1000
    schedule: str = "cosine"
    sample_steps: int = 50
    cond_dim: int = 64
    agn_groups: int = 8
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    use_layout: bool = False
    snap_latents: bool = True
    x0_clip: float = 4.0
    rollout_steps: int = 0   # 0: one sampling round (tau_f frames)

    def validate(self, path):
        _check(self.total_steps >= 1, path, "total_steps", "must be >= 1")
        _check(self.schedule in ("cosine", "linear"), path, "schedule",
               "must be 'cosine' or 'linear'")
        _check(1 <= self.sample_steps <= self.total_steps, path, "sample_steps",
               "must be in [1, total_steps]")
        _check(self.steps >= 0, path, "steps", "must be >= 0")
        _check(self.agn_groups >= 1, path, "agn_groups", "must be >= 1")
        _check(self.rollout_steps >= 0, path, "rollout_steps", "must be >= 0")


@dataclass
class PlannerSection:
    enabled: bool = True
    hidden: int = 64
    loss_weight: float = 1.0

    def validate(self, path):
        _check(self.hidden >= 1, path, "hidden", "must be >= 1")
        _check(self.loss_weight >= 0, path, "loss_weight", "must be >= 0")


@dataclass
class HorizonSection:
    past: int = 3
    future: int = 5

    def validate(self, path):
        _check(self.past >= 1, path, "past", "must be >= 1")
        _check(self.future >= 1, path, "future", "must be >= 1")


@dataclass
class HorizonsSection:
    short: HorizonSection = field(default_factory=HorizonSection)
    long: HorizonSection = field(default_factory=lambda: HorizonSection(6, 10))

    def validate(self, path):
        self.short.validate(path + ("short",))
        self.long.validate(path + ("long",))


@dataclass
class PathsSection:
    dataset: str | None = None
    tokenizer_checkpoint: str | None = None
    wm_checkpoint: str | None = None

    def validate(self, path):
        pass


@dataclass
class RunConfig:
    sensor: SensorSection = field(default_factory=SensorSection)
    world: WorldSection = field(default_factory=WorldSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    separator: SeparatorSection = field(default_factory=SeparatorSection)
    tri_path: TriPathSection = field(default_factory=TriPathSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    horizons: HorizonsSection = field(default_factory=HorizonsSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                value.validate((f.name,))
        _check(self.seed >= 0, (), "seed", "must be >= 0")

    def horizon(self, name: str) -> HorizonSection:
        if name not in ("short", "long"):
            raise ConfigError(f"unknown horizon {name!r}; use 'short' or 'long'")
        return getattr(self.horizons, name)


def _check(ok: bool, path: tuple, key: str, msg: str):
    if not ok:
        full = ".".join(path + (key,))
        raise ConfigError(f"config value out of range: {full} {msg}")


_SCALAR_COERCIONS = {
    (int, float): float,  # ints are fine where floats are expected
}


def _fill_dataclass(cls, data: dict, path: tuple, provenance: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object at {'.'.join(path) or '<root>'}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        full = ".".join(path + (key,))
        raise ConfigError(f"unknown config key: {full}")
    kwargs = {}
    for name, f in known.items():
        full_path = path + (name,)
        default = f.default_factory() if callable(getattr(f, "default_factory", None)) and f.default_factory is not None and f.default_factory().__class__ else None  # noqa: E501 (resolved below)
        if name in data:
            raw = data[name]
            target = f.type
            if is_dataclass(_section_type(f)):
                kwargs[name] = _fill_dataclass(_section_type(f), raw, full_path,
                                               provenance)
            else:
                kwargs[name] = _coerce_scalar(raw, f, full_path)
                provenance[".".join(full_path)] = "file"
        else:
            if is_dataclass(_section_type(f)):
                kwargs[name] = _fill_dataclass(_section_type(f), {}, full_path,
                                               provenance)
            else:
                provenance[".".join(full_path)] = "default"
    return cls(**kwargs)


def _section_type(f):
    # dataclass fields carry the class for nested sections, a string otherwise
    t = f.type
    if isinstance(t, str):
        return None
    return t if is_dataclass(t) else None


def _coerce_scalar(raw, f, full_path):
    default = f.default if f.default is not f.default_factory else None
    type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    full = ".".join(full_path)
    if "bool" in str(type_name):
        if not isinstance(raw, bool):
            raise ConfigError(f"config value for {full} must be a boolean")
        return raw
    if "int" in str(type_name) and "point" not in str(type_name):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"config value for {full} must be an integer")
        return raw
    if "float" in str(type_name):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"config value for {full} must be a number")
        return float(raw)
    if "list" in str(type_name):
        if not isinstance(raw, list):
            raise ConfigError(f"config value for {full} must be a list")
        return list(raw)
    # str | None fields
    if raw is not None and not isinstance(raw, str):
        raise ConfigError(f"config value for {full} must be a string or null")
    return raw


def parse_config_dict(data: dict) -> tuple[RunConfig, dict]:
    """Build a validated RunConfig from a JSON-compatible dict.

    Returns (config, provenance) where provenance maps each scalar key path to
    "file" or "default".
    """
    provenance: dict[str, str] = {}
    cfg = _fill_dataclass(RunConfig, data, (), provenance)
    cfg.validate()
    return cfg, provenance


def parse_config(path: str | os.PathLike) -> tuple[RunConfig, dict]:
    """Parse a config file; missing file and bad JSON get distinct diagnostics."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_config_dict(data)


def serialize(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=1, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True).encode()
    ).hexdigest()
