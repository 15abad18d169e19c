"""Flat ``key=value`` run configuration shared by the CLI and the renderer."""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class RenderConfig:
    # image and camera
    width: int = 640
    height: int = 360
    vertical_fov_deg: float = 50.0
    near: float = 0.1
    far: float = 2000.0
    eye: Vec3 | None = None
    target: Vec3 | None = None
    # shading
    light_dir: Vec3 = (-0.4, -0.3, 0.85)
    sky_zenith: Vec3 = (0.35, 0.55, 0.85)
    sky_horizon: Vec3 = (0.78, 0.84, 0.9)
    # tracing
    hit_eps: float = 1e-3
    max_steps: int = 256
    # culling
    cull_frustum: bool = True
    cull_chunk: bool = True
    cull_occlusion: bool = True
    # build
    global_seed: int = 0
    class_map: str = "dales"
    templates: str = ""
    ground_as: str = "ground"
    low_veg_as_grass: bool = False
    low_veg_height: float = 0.5
    cell_size: float = 0.0
    chunk_factor: int = 8
    radius_max: float = 3.0
    # execution; 0 = one worker per CPU
    threads: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"resolution must be positive, got {self.width}x{self.height}")
        if not 0 < self.vertical_fov_deg < 180:
            raise ConfigError("vertical_fov_deg must lie in (0, 180)")
        if not 0 < self.near < self.far:
            raise ConfigError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.ground_as not in ("ground", "grass", "road"):
            raise ConfigError(f"ground_as must be ground, grass or road, got {self.ground_as!r}")
        if self.max_steps < 1 or self.hit_eps <= 0:
            raise ConfigError("max_steps must be >= 1 and hit_eps > 0")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")

    def without_culling(self) -> "RenderConfig":
        return replace(self, cull_frustum=False, cull_chunk=False, cull_occlusion=False)


def resolve_threads(requested: int = 0) -> int:
    """Worker count: ``POINTAMP_THREADS`` wins, then ``requested``, then CPU count."""
    env = os.environ.get("POINTAMP_THREADS", "").strip()
    if env:
        try:
            requested = int(env)
        except ValueError:
            raise ConfigError(f"POINTAMP_THREADS must be an integer, got {env!r}") from None
    if requested <= 0:
        requested = os.cpu_count() or 1
    return requested


def _field_types():
    hints = typing.get_type_hints(RenderConfig)
    return {f.name: hints[f.name] for f in fields(RenderConfig)}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(name: str, text: str):
    types = _field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    text = text.strip()
    optional = type(None) in typing.get_args(kind)
    if optional:
        if text == "":
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # 3-vector
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 3:
            raise ValueError(text)
        return tuple(parts)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def dump_config(cfg: RenderConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(RenderConfig))


def parse_config(text: str, base: RenderConfig | None = None) -> RenderConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    return replace(base or RenderConfig(), **values)


def load_config(path) -> RenderConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
