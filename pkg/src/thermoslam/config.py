"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # tracking
    levels: int = 4
    nu: float = 5.0
    max_iterations: int = 30
    min_valid_ratio: float = 0.3
    max_points: int = 1500
    # keyframes and local refinement
    kf_translation: float = 0.5
    kf_rotation_deg: float = 10.0
    kf_min_visible: float = 0.6
    window_size: int = 5
    refine: bool = True
    # loop closure
    loop_closure: bool = True
    t_recent: float = 30.0
    eta_min: float = 0.75
    rho_min: float = 0.4
    eps: float = 0.05
    loop_max_rounds: int = 50
    far_init_distance: float = 5.0
    odom_information: float = 100.0
    rescale_low: float = 0.0
    rescale_high: float = 30.0
    vocabulary_images: int = 30
    # radiometry; empty means "take it from calib.txt"
    raw_scale: float | None = None
    raw_offset: float | None = None
    # map export
    map_voxel: float = 0.05
    map_binary: bool = False
    map_all_frames: bool = False
    map_t_low: float = 0.0
    map_t_high: float = 30.0
    # data
    sync_tolerance_ms: float = 5.0
    # execution
    seed: int = 0
    deterministic: bool = False
    # testing aid: yaw error (deg) injected into every odometry step between keyframes
    drift_yaw_per_keyframe_deg: float = 0.0

    def dump(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {'' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(key: str, text: str):
    typ = _TYPES[key]
    if "None" in str(typ):
        if text == "" or text.lower() == "none":
            return None
        typ = "float"
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ}") from None


def parse_config(text: str, source: str = "<config>", base: PipelineConfig | None = None) -> PipelineConfig:
    values = asdict(base or PipelineConfig())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, val)
    cfg = PipelineConfig(**values)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def override(cfg: PipelineConfig, key: str, value: str) -> PipelineConfig:
    """Apply a single ``key=value`` override (command-line ``--set``)."""
    return parse_config(f"{key} = {value}", "--set", cfg)


def validate(cfg: PipelineConfig) -> None:
    checks = [
        (cfg.levels >= 1, "levels must be >= 1"),
        (cfg.nu > 0, "nu must be positive"),
        (cfg.max_iterations >= 1, "max_iterations must be >= 1"),
        (0 <= cfg.min_valid_ratio <= 1, "min_valid_ratio must lie in [0, 1]"),
        (cfg.window_size >= 1, "window_size must be >= 1"),
        (cfg.eps > 0, "eps must be positive"),
        (cfg.rescale_low < cfg.rescale_high, "rescale_low must be below rescale_high"),
        (cfg.map_t_low < cfg.map_t_high, "map_t_low must be below map_t_high"),
        (cfg.map_voxel >= 0, "map_voxel must be >= 0"),
        (cfg.sync_tolerance_ms >= 0, "sync_tolerance_ms must be >= 0"),
        (cfg.odom_information > 0, "odom_information must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
