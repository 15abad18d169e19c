"""Point-cloud and ortho-image ingestion.

Two point formats are supported:

* ``.xyzc`` text, one record per line: ``x y z class [r g b]`` where
  ``r g b`` are unit-interval reals. ``#`` starts a comment line.
* ``.pamp`` binary: magic ``PAMP``, version byte, little-endian u64 count,
  then per record ``f64 x, f64 y, f64 z, u8 class, u8 flags`` and, when
  ``flags & 1``, three RGB bytes.

Vendor class codes are mapped onto :class:`CanonicalClass` through named
class maps, which are plain ``code -> class`` tables.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    ParseError,
    PointAmpError,
    TruncatedError,
    UnsupportedVersionError,
)
from .ppm import decode_ppm, quantize


class CanonicalClass(IntEnum):
    GROUND = 0
    GRASS = 1
    ROAD = 2
    VEGETATION = 3
    BUILDING = 4
    POLE = 5
    FENCE = 6
    VEHICLE = 7
    POWERLINE = 8
    UNKNOWN = 9

    @classmethod
    def parse(cls, name: str) -> "CanonicalClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


SURFACE_CLASSES = (CanonicalClass.GROUND, CanonicalClass.GRASS, CanonicalClass.ROAD)


@dataclass(frozen=True)
class RawPoint:
    x: float
    y: float
    z: float
    class_code: int
    rgb: tuple[float, float, float] | None = None
    intensity: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite coordinate ({self.x}, {self.y}, {self.z})")
        if not 0 <= self.class_code <= 255:
            raise ValueError(f"class code {self.class_code} outside 0-255")
        if self.rgb is not None and any(not 0.0 <= c <= 1.0 for c in self.rgb):
            raise ValueError(f"rgb {self.rgb} outside the unit interval")
        if self.intensity is not None and not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside the unit interval")

    @property
    def position(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


def positions(points) -> np.ndarray:
    """``(N, 3)`` float64 array of point positions."""
    if len(points) == 0:
        return np.zeros((0, 3))
    return np.array([(p.x, p.y, p.z) for p in points], dtype=np.float64)


# ---------------------------------------------------------------------------
# class maps

_C = CanonicalClass

# DALES labels: 0 unknown, 1 ground, 2 vegetation, 3 cars, 4 trucks,
# 5 power lines, 6 fences, 7 poles, 8 buildings.
DALES_MAP = {
    0: _C.UNKNOWN,
    1: _C.GROUND,
    2: _C.VEGETATION,
    3: _C.VEHICLE,
    4: _C.VEHICLE,
    5: _C.POWERLINE,
    6: _C.FENCE,
    7: _C.POLE,
    8: _C.BUILDING,
}

# ASPRS LAS 1.4 standard point classes
LAS14_MAP = {
    2: _C.GROUND,
    3: _C.GRASS,
    4: _C.VEGETATION,
    5: _C.VEGETATION,
    6: _C.BUILDING,
    9: _C.GROUND,
    11: _C.ROAD,
    13: _C.POWERLINE,
    14: _C.POWERLINE,
    15: _C.POLE,
    17: _C.ROAD,
}

CLASS_MAPS: dict[str, dict[int, CanonicalClass]] = {
    "dales": DALES_MAP,
    "las14": LAS14_MAP,
}


def register_class_map(name: str, table: dict[int, CanonicalClass | int]) -> None:
    """Add or replace a named class map. Unlisted codes map to UNKNOWN."""
    clean = {}
    for code, cls in table.items():
        if not 0 <= int(code) <= 255:
            raise ValueError(f"class code {code} outside 0-255")
        clean[int(code)] = CanonicalClass(int(cls))
    CLASS_MAPS[name] = clean


def map_class(class_code: int, scheme: str = "dales") -> CanonicalClass:
    try:
        table = CLASS_MAPS[scheme]
    except KeyError:
        raise PointAmpError(
            f"unregistered class map {scheme!r} (known: {', '.join(sorted(CLASS_MAPS))})"
        ) from None
    return table.get(int(class_code), CanonicalClass.UNKNOWN)


def class_lookup(scheme: str = "dales") -> np.ndarray:
    """256-entry array mapping u8 codes to canonical class values."""
    lut = np.full(256, int(CanonicalClass.UNKNOWN), dtype=np.int64)
    for code in range(256):
        lut[code] = int(map_class(code, scheme))
    return lut


def canonical_classes(
    points,
    scheme: str = "dales",
    ground_as: str = "ground",
    low_veg_as_grass: bool = False,
    low_veg_height: float = 0.5,
) -> np.ndarray:
    """Canonical class per point, after the optional ground/low-vegetation remaps.

    ``ground_as`` selects which surface template ground returns use
    (``ground``, ``grass`` or ``road``). With ``low_veg_as_grass``, vegetation
    whose height above the horizontally nearest ground return is below
    ``low_veg_height`` becomes GRASS.
    """
    codes = np.array([p.class_code for p in points], dtype=np.int64)
    classes = class_lookup(scheme)[codes] if len(codes) else np.zeros(0, dtype=np.int64)

    target = {"ground": _C.GROUND, "grass": _C.GRASS, "road": _C.ROAD}
    if ground_as not in target:
        raise ValueError(f"ground_as must be one of {sorted(target)}, got {ground_as!r}")

    is_ground = classes == _C.GROUND
    if low_veg_as_grass and is_ground.any():
        from scipy.spatial import cKDTree

        pos = positions(points)
        veg = np.flatnonzero(classes == _C.VEGETATION)
        if len(veg):
            tree = cKDTree(pos[is_ground, :2])
            _, nearest = tree.query(pos[veg, :2])
            ground_z = pos[is_ground, 2][nearest]
            low = (pos[veg, 2] - ground_z) < low_veg_height
            classes[veg[low]] = _C.GRASS

    classes[is_ground] = target[ground_as]
    return classes


# ---------------------------------------------------------------------------
# .xyzc text


def _as_bytes(stream) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    if isinstance(stream, str):
        return stream.encode("utf-8")
    return stream.read()


def parse_xyzc(stream, source: str | None = None) -> list[RawPoint]:
    """Parse ``.xyzc`` text into points, in file order."""
    try:
        text = _as_bytes(stream).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc})", source=source) from None

    points = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        fields = body.split()
        if len(fields) not in (4, 7):
            raise ParseError(
                f"expected 'x y z class [r g b]', got {len(fields)} fields", lineno, source
            )
        try:
            x, y, z = (float(f) for f in fields[:3])
        except ValueError:
            raise ParseError(f"bad coordinate in {body!r}", lineno, source) from None
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ParseError("non-finite coordinate", lineno, source)
        try:
            code = int(fields[3])
        except ValueError:
            raise ParseError(f"class code {fields[3]!r} is not an integer", lineno, source) from None
        if not 0 <= code <= 255:
            raise ParseError(f"class code {code} outside 0-255", lineno, source)
        rgb = None
        if len(fields) == 7:
            try:
                rgb = tuple(float(f) for f in fields[4:])
            except ValueError:
                raise ParseError(f"bad colour in {body!r}", lineno, source) from None
            if any(not 0.0 <= c <= 1.0 for c in rgb):
                raise ParseError("colour component outside [0, 1]", lineno, source)
        points.append(RawPoint(x, y, z, code, rgb))
    return points


def write_xyzc(points) -> bytes:
    """Serialize points as ``.xyzc`` text. ``repr`` keeps floats bit-exact."""
    out = io.StringIO()
    for p in points:
        out.write(f"{p.x!r} {p.y!r} {p.z!r} {p.class_code}")
        if p.rgb is not None:
            out.write(" %r %r %r" % tuple(p.rgb))
        out.write("\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# .pamp binary

PAMP_MAGIC = b"PAMP"
PAMP_VERSION = 1
_PAMP_HEADER = struct.Struct("<4sBQ")
_PAMP_RECORD = struct.Struct("<dddBB")
_RGB = struct.Struct("<BBB")


def parse_packed_binary(stream) -> list[RawPoint]:
    buf = _as_bytes(stream)
    if len(buf) < 4 or buf[:4] != PAMP_MAGIC:
        raise BadMagicError("missing PAMP magic")
    if len(buf) < _PAMP_HEADER.size:
        raise TruncatedError("PAMP header truncated")
    _, version, count = _PAMP_HEADER.unpack_from(buf, 0)
    if version != PAMP_VERSION:
        raise UnsupportedVersionError(f"unsupported PAMP version {version}")

    pos = _PAMP_HEADER.size
    points = []
    for i in range(count):
        if pos + _PAMP_RECORD.size > len(buf):
            raise TruncatedError(f"PAMP record {i} truncated")
        x, y, z, code, flags = _PAMP_RECORD.unpack_from(buf, pos)
        pos += _PAMP_RECORD.size
        rgb = None
        if flags & 1:
            if pos + 3 > len(buf):
                raise TruncatedError(f"PAMP record {i} colour truncated")
            rgb = tuple(c / 255.0 for c in _RGB.unpack_from(buf, pos))
            pos += 3
        try:
            points.append(RawPoint(x, y, z, code, rgb))
        except ValueError as exc:
            raise FormatError(f"PAMP record {i}: {exc}") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} PAMP records")
    return points


def write_packed_binary(points) -> bytes:
    """Serialize points as ``.pamp``. Colours are stored as bytes (half-up)."""
    parts = [_PAMP_HEADER.pack(PAMP_MAGIC, PAMP_VERSION, len(points))]
    for p in points:
        if p.rgb is None:
            parts.append(_PAMP_RECORD.pack(p.x, p.y, p.z, p.class_code, 0))
        else:
            parts.append(_PAMP_RECORD.pack(p.x, p.y, p.z, p.class_code, 1))
            parts.append(bytes(quantize(p.rgb)))
    return b"".join(parts)


def read_points(path, fmt: str | None = None) -> list[RawPoint]:
    """Read a point file, picking the format from ``fmt`` or the extension."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    data = path.read_bytes()
    if fmt == "xyzc":
        return parse_xyzc(data, source=str(path))
    if fmt == "pamp":
        return parse_packed_binary(data)
    raise PointAmpError(f"unknown point format {fmt!r} for {path}")


# ---------------------------------------------------------------------------
# ortho images


@dataclass(frozen=True)
class OrthoImage:
    """Georegistered RGB image.

    ``world_transform`` holds the six world-file numbers in ESRI order
    ``(A, D, B, E, C, F)``: world ``X = A*col + B*row + C`` and
    ``Y = D*col + E*row + F`` where integer ``(col, row)`` address pixel
    centres. Sampling uses the inverse of that map.
    """

    width: int
    height: int
    pixels: np.ndarray
    world_transform: tuple[float, float, float, float, float, float] = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(f"pixels shape {px.shape} != ({self.height}, {self.width}, 3)")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel components must lie in [0, 1]")
        a, d, b, e, _, _ = self.world_transform
        if a * e - b * d == 0.0:
            raise ValueError("world transform is not invertible")
        object.__setattr__(self, "pixels", px)

    def world_to_pixel(self, x: float, y: float) -> tuple[float, float]:
        a, d, b, e, c, f = self.world_transform
        det = a * e - b * d
        dx, dy = x - c, y - f
        return ((e * dx - b * dy) / det, (a * dy - d * dx) / det)


def sample_albedo(img: OrthoImage, x: float, y: float) -> tuple[float, float, float]:
    """Bilinear colour at world ``(x, y)``, clamped to the border pixels."""
    col, row = img.world_to_pixel(x, y)
    col = min(max(col, 0.0), img.width - 1.0)
    row = min(max(row, 0.0), img.height - 1.0)
    c0 = int(math.floor(col))
    r0 = int(math.floor(row))
    c1 = min(c0 + 1, img.width - 1)
    r1 = min(r0 + 1, img.height - 1)
    fc = col - c0
    fr = row - r0
    px = img.pixels
    top = px[r0, c0] * (1.0 - fc) + px[r0, c1] * fc
    bottom = px[r1, c0] * (1.0 - fc) + px[r1, c1] * fc
    rgb = np.clip(top * (1.0 - fr) + bottom * fr, 0.0, 1.0)
    return (float(rgb[0]), float(rgb[1]), float(rgb[2]))


def parse_world_file(text: str) -> tuple[float, ...]:
    values = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(values) != 6:
        raise ParseError(f"world file needs 6 numbers, found {len(values)}")
    try:
        return tuple(float(v) for v in values)
    except ValueError as exc:
        raise ParseError(f"bad world file value ({exc})") from None


def world_file_path(image_path) -> Path:
    return Path(image_path).with_suffix(".wld")


def load_ortho(image_path, world_path=None) -> OrthoImage:
    """Load a P6 ortho-image and its ``.wld`` sidecar."""
    image_path = Path(image_path)
    world_path = Path(world_path) if world_path is not None else world_file_path(image_path)
    if not world_path.exists():
        raise PointAmpError(f"missing world file {world_path} for ortho image {image_path}")
    rgb = decode_ppm(image_path.read_bytes())
    transform = parse_world_file(world_path.read_text(encoding="utf-8"))
    return OrthoImage(rgb.shape[1], rgb.shape[0], rgb / 255.0, transform)
