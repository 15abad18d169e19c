"""Render packets: the per-point descriptor built from a point and its neighbours."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedError, UnsupportedVersionError
from .ingest import CanonicalClass, OrthoImage, sample_albedo
from .ppm import quantize
from .sdf import _bounding_radius, template_table
from .spatial import Chunk, GridIndex, knn_same_class_batch

_C = CanonicalClass
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Material:
    diffuse: tuple[float, float, float]
    specular: float
    roughness: float

    def __post_init__(self):
        values = (*self.diffuse, self.specular, self.roughness)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError(f"material components must lie in [0, 1]: {values}")


# material_id == canonical class value
DEFAULT_MATERIALS: dict[CanonicalClass, Material] = {
    _C.GROUND: Material((0.45, 0.36, 0.25), 0.02, 0.9),
    _C.GRASS: Material((0.30, 0.52, 0.18), 0.03, 0.85),
    _C.ROAD: Material((0.26, 0.26, 0.28), 0.1, 0.4),
    _C.VEGETATION: Material((0.20, 0.45, 0.15), 0.05, 0.8),
    _C.BUILDING: Material((0.78, 0.76, 0.72), 0.2, 0.6),
    _C.POLE: Material((0.50, 0.50, 0.50), 0.3, 0.5),
    _C.FENCE: Material((0.55, 0.45, 0.35), 0.1, 0.7),
    _C.VEHICLE: Material((0.60, 0.12, 0.10), 0.5, 0.3),
    _C.POWERLINE: Material((0.15, 0.15, 0.15), 0.4, 0.4),
    _C.UNKNOWN: Material((0.50, 0.50, 0.50), 0.05, 0.8),
}

# albedo used when no ortho image is given; the material diffuse carries the colour
DEFAULT_ALBEDO = (1.0, 1.0, 1.0)


def material_table(materials=None) -> np.ndarray:
    """``(n_materials, 5)`` array: diffuse rgb, specular, roughness."""
    materials = {**DEFAULT_MATERIALS, **(materials or {})}
    out = np.zeros((len(CanonicalClass), 5))
    for cls in CanonicalClass:
        m = materials[cls]
        out[cls] = (*m.diffuse, m.specular, m.roughness)
    return out


@dataclass(frozen=True)
class RenderPacket:
    center: tuple[float, float, float]
    adjacency: tuple[tuple[float, float, float], ...]
    cls: CanonicalClass
    material_id: int
    albedo: tuple[float, float, float]
    bounding_radius: float
    seed: int


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def packet_seed(global_seed: int, center) -> int:
    """Per-packet seed from the global seed and the centre quantised to 1 mm."""
    h = splitmix64(int(global_seed) & _MASK64)
    for c in center:
        q = int(round(float(c) * 1000.0)) & _MASK64
        h = splitmix64(h ^ q)
    return h


def _f32_ceil(values: np.ndarray) -> np.ndarray:
    """Round to float32 without ever rounding down."""
    v32 = values.astype(np.float32)
    low = v32.astype(np.float64) < values
    v32[low] = np.nextafter(v32[low], np.float32(np.inf))
    return v32


def build_packets(
    points,
    index: GridIndex,
    ortho: OrthoImage | None = None,
    global_seed: int = 0,
    radius_max: float = 3.0,
    templates=None,
    n_jobs: int = 1,
    k: int = 8,
) -> list[RenderPacket]:
    """One packet per point, in point order.

    Adjacency is the same-class ``k``-NN (at most 8) within ``radius_max``, stored as
    float32 offsets; albedo is quantised to bytes and the bounding radius
    rounded up to float32 so packets survive the ``.pkt`` format unchanged.
    """
    n = len(points)
    if n != len(index):
        raise ValueError("index was built over a different point list")
    table = templates if isinstance(templates, np.ndarray) else template_table(templates)
    pos = index.pos
    classes = index.classes
    nbr, counts = knn_same_class_batch(index, np.arange(n), k, radius_max, n_jobs=n_jobs)

    offsets = np.zeros((n, k, 3), dtype=np.float32)
    valid = nbr >= 0
    gathered = pos[np.where(valid, nbr, 0)] - pos[:, None, :]
    offsets[valid] = gathered[valid].astype(np.float32)

    radii = np.empty(n)
    offs64 = offsets.astype(np.float64)
    for i in range(n):
        radii[i] = _bounding_radius(int(classes[i]), offs64[i], int(counts[i]), table)
    radii32 = _f32_ceil(radii)

    if ortho is not None:
        albedo = quantize([sample_albedo(ortho, x, y) for x, y in pos[:, :2]])
    else:
        albedo = np.tile(quantize(DEFAULT_ALBEDO), (n, 1))
    albedo_f = albedo / 255.0

    packets = []
    for i in range(n):
        center = (float(pos[i, 0]), float(pos[i, 1]), float(pos[i, 2]))
        m = int(counts[i])
        adjacency = tuple(tuple(float(v) for v in offsets[i, j]) for j in range(m))
        cls = CanonicalClass(int(classes[i]))
        packets.append(RenderPacket(
            center=center,
            adjacency=adjacency,
            cls=cls,
            material_id=int(cls),
            albedo=tuple(float(v) for v in albedo_f[i]),
            bounding_radius=float(radii32[i]),
            seed=packet_seed(global_seed, center),
        ))
    return packets


def build_chunks(index: GridIndex, packets) -> list[Chunk]:
    from .spatial import chunks

    return chunks(index, packets)


# ---------------------------------------------------------------------------
# .pkt container

PKT_MAGIC = b"PKT1"
PKT_VERSION = 1
_HEADER = struct.Struct("<4sBQQQdI")
_CENTER = struct.Struct("<dddB")
_OFFSET = struct.Struct("<fff")
_TAIL = struct.Struct("<BH3BfQ")
_CHUNK_HEAD = struct.Struct("<iiiddddddddddI")


@dataclass(frozen=True)
class PacketFileHeader:
    global_seed: int = 0
    cell_size: float = 0.0
    chunk_factor: int = 1


def write_packets(packets, chunks, header: PacketFileHeader | None = None) -> bytes:
    header = header or PacketFileHeader()
    parts = [_HEADER.pack(PKT_MAGIC, PKT_VERSION, len(packets), len(chunks),
                          header.global_seed & _MASK64, header.cell_size, header.chunk_factor)]
    for p in packets:
        if len(p.adjacency) > 8:
            raise ValueError("a packet holds at most 8 adjacency offsets")
        parts.append(_CENTER.pack(*p.center, len(p.adjacency)))
        for o in p.adjacency:
            parts.append(_OFFSET.pack(*o))
        rgb = quantize(p.albedo)
        parts.append(_TAIL.pack(int(p.cls), p.material_id, int(rgb[0]), int(rgb[1]), int(rgb[2]),
                                p.bounding_radius, p.seed & _MASK64))
    for c in chunks:
        parts.append(_CHUNK_HEAD.pack(*c.chunk_coord, *c.aabb_min, *c.aabb_max,
                                      *c.sphere_center, c.sphere_radius, len(c.packet_indices)))
        parts.append(np.asarray(c.packet_indices, dtype="<u4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, st: struct.Struct, what: str):
        if self.pos + st.size > len(self.buf):
            raise TruncatedError(f"packet file truncated in {what}")
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out

    def raw(self, nbytes: int, what: str) -> bytes:
        if self.pos + nbytes > len(self.buf):
            raise TruncatedError(f"packet file truncated in {what}")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out


def read_packets(stream) -> tuple[list[RenderPacket], list[Chunk], PacketFileHeader]:
    buf = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    buf = bytes(buf)
    if buf[:4] != PKT_MAGIC:
        raise BadMagicError("missing PKT1 magic")
    if len(buf) < 5:
        raise TruncatedError("packet file truncated in header")
    if buf[4] != PKT_VERSION:
        raise UnsupportedVersionError(f"unsupported packet file version {buf[4]}")
    r = _Reader(buf)
    _, _, n_packets, n_chunks, seed, cell_size, chunk_factor = r.take(_HEADER, "header")

    packets = []
    for i in range(n_packets):
        x, y, z, m = r.take(_CENTER, f"packet {i}")
        if m > 8:
            raise FormatError(f"packet {i} claims {m} adjacency entries (max 8)")
        adjacency = tuple(tuple(float(v) for v in r.take(_OFFSET, f"packet {i}")) for _ in range(m))
        cls, mat, cr, cg, cb, radius, pseed = r.take(_TAIL, f"packet {i}")
        try:
            cls = CanonicalClass(cls)
        except ValueError:
            raise FormatError(f"packet {i} has unknown class {cls}") from None
        packets.append(RenderPacket((x, y, z), adjacency, cls, mat,
                                    (cr / 255.0, cg / 255.0, cb / 255.0), float(radius), pseed))

    chunks = []
    for i in range(n_chunks):
        vals = r.take(_CHUNK_HEAD, f"chunk {i}")
        count = vals[-1]
        idx = np.frombuffer(r.raw(4 * count, f"chunk {i}"), dtype="<u4")
        if count and int(idx.max()) >= n_packets:
            raise FormatError(f"chunk {i} references a packet out of range")
        chunks.append(Chunk(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]),
                            tuple(int(v) for v in idx), tuple(vals[9:12]), vals[12]))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes in packet file")
    return packets, chunks, PacketFileHeader(seed, cell_size, chunk_factor)

