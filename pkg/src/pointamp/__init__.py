"""Sparse classified point clouds amplified into dense SDF geometry and sphere-traced on the CPU."""

from .config import RenderConfig
from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    ParseError,
    PointAmpError,
    TruncatedError,
    UnsupportedVersionError,
)
from .ingest import CanonicalClass, OrthoImage, RawPoint, map_class, parse_packed_binary, parse_xyzc
from .packets import Material, RenderPacket, build_packets, read_packets, write_packets
from .render import Camera, CullStats, FrameBuffers, Scene, render_frame
from .sdf import packet_sdf, scene_sdf, sd_capsule, sdf_gradient, smooth_min
from .spatial import Chunk, GridIndex, build_grid, knn_same_class

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "Camera", "CanonicalClass", "Chunk", "ConfigError", "CullStats",
    "FormatError", "FrameBuffers", "GridIndex", "Material", "OrthoImage", "ParseError",
    "PointAmpError", "RawPoint", "RenderConfig", "RenderPacket", "Scene", "TruncatedError",
    "UnsupportedVersionError", "build_grid", "build_packets", "knn_same_class", "map_class",
    "packet_sdf", "parse_packed_binary", "parse_xyzc", "read_packets", "render_frame",
    "scene_sdf", "sd_capsule", "sdf_gradient", "smooth_min", "write_packets",
]
