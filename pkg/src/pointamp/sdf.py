"""Signed distance primitives, seeded value noise and per-class packet templates.

The scalar kernels are numba-compiled so the renderer can call them per
ray step; the module-level wrappers give them a plain Python surface.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numba
import numpy as np

from .errors import ConfigError
from .ingest import CanonicalClass

# columns of the template parameter table
CAPSULE_RADIUS, AMPLITUDE, FREQUENCY, OCTAVES, TAPER, BLEND_K = range(6)

# template kinds
SURFACE, CAPSULE, BOX, BUMP = range(4)

_C = CanonicalClass
TEMPLATE_KIND = np.array(
    [
        SURFACE,  # GROUND
        SURFACE,  # GRASS
        SURFACE,  # ROAD
        CAPSULE,  # VEGETATION
        BOX,  # BUILDING
        CAPSULE,  # POLE
        CAPSULE,  # FENCE
        CAPSULE,  # VEHICLE
        CAPSULE,  # POWERLINE
        BUMP,  # UNKNOWN
    ],
    dtype=np.int64,
)

# returned by scene_sdf when no packet is a candidate
EMPTY_DISTANCE = 1e30

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class TemplateParams:
    """Shape parameters for one class template.

    ``taper`` is the height above ground (m) at which surface displacement
    fades to zero; 0 disables tapering.
    """

    capsule_radius: float
    noise_amplitude: float = 0.0
    noise_frequency: float = 1.0
    octaves: int = 1
    taper: float = 0.0
    blend_k: float = 0.1

    def __post_init__(self):
        if not self.capsule_radius > 0:
            raise ConfigError(f"capsule_radius must be > 0, got {self.capsule_radius}")
        if self.noise_amplitude < 0:
            raise ConfigError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")
        if int(self.octaves) != self.octaves or self.octaves < 1:
            raise ConfigError(f"octaves must be an integer >= 1, got {self.octaves}")
        if not 0.0 <= self.taper <= 1.0:
            raise ConfigError(f"taper must lie in [0, 1], got {self.taper}")
        if self.blend_k < 0:
            raise ConfigError(f"blend_k must be >= 0, got {self.blend_k}")
        if not self.noise_frequency > 0:
            raise ConfigError(f"noise_frequency must be > 0, got {self.noise_frequency}")


DEFAULT_TEMPLATES: dict[CanonicalClass, TemplateParams] = {
    _C.GROUND: TemplateParams(0.9, 0.03, 2.0, 2, 0.0, 0.3),
    _C.GRASS: TemplateParams(0.9, 0.15, 3.0, 3, 0.6, 0.3),
    _C.ROAD: TemplateParams(0.9, 0.0, 1.0, 1, 0.0, 0.3),
    _C.VEGETATION: TemplateParams(0.35, 0.25, 2.0, 3, 0.0, 0.5),
    _C.BUILDING: TemplateParams(0.5, 0.0, 1.0, 1, 0.0, 0.1),
    _C.POLE: TemplateParams(0.06, 0.0, 1.0, 1, 0.0, 0.05),
    _C.FENCE: TemplateParams(0.08, 0.0, 1.0, 1, 0.0, 0.05),
    _C.VEHICLE: TemplateParams(0.6, 0.0, 1.0, 1, 0.0, 0.3),
    _C.POWERLINE: TemplateParams(0.06, 0.0, 1.0, 1, 0.0, 0.05),
    _C.UNKNOWN: TemplateParams(0.2, 0.0, 1.0, 1, 0.0, 0.1),
}


def template_table(templates=None) -> np.ndarray:
    """``(n_classes, 6)`` float array in the kernel column layout."""
    templates = {**DEFAULT_TEMPLATES, **(templates or {})}
    table = np.zeros((len(CanonicalClass), 6))
    for cls in CanonicalClass:
        t = templates[cls]
        table[cls] = (t.capsule_radius, t.noise_amplitude, t.noise_frequency,
                      t.octaves, t.taper, t.blend_k)
    return table


def parse_templates(text: str, base=None) -> dict[CanonicalClass, TemplateParams]:
    """Parse ``<class>.<field>=value`` lines over ``base`` (defaults if None)."""
    out = dict(base or DEFAULT_TEMPLATES)
    names = {f.name for f in fields(TemplateParams)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"templates line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"templates line {lineno}: key {key!r} is not <class>.<field>")
        cname, fname = key.split(".", 1)
        try:
            cls = CanonicalClass.parse(cname)
        except ValueError as exc:
            raise ConfigError(f"templates line {lineno}: {exc}") from None
        if fname not in names:
            raise ConfigError(f"templates line {lineno}: unknown field {fname!r}")
        try:
            num = int(value) if fname == "octaves" else float(value)
        except ValueError:
            raise ConfigError(f"templates line {lineno}: bad number {value!r}") from None
        out[cls] = replace(out[cls], **{fname: num})
    return out


def dump_templates(templates) -> str:
    lines = []
    for cls in CanonicalClass:
        for key, value in asdict(templates[cls]).items():
            lines.append(f"{cls.name.lower()}.{key}={value!r}")
    return "\n".join(lines) + "\n"


def step_scale(table: np.ndarray, classes=None) -> float:
    """Sphere-tracing step factor compensating noise slope, minimised over classes."""
    rows = range(table.shape[0]) if classes is None else sorted(set(int(c) for c in classes))
    scale = 1.0
    for c in rows:
        scale = min(scale, 1.0 / (1.0 + table[c, AMPLITUDE] * table[c, FREQUENCY] * 3.0))
    return scale


# ---------------------------------------------------------------------------
# noise

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_PX = np.uint64(0x8CB92BA72F3D8DD7)
_PY = np.uint64(0xD6E8FEB86659FD93)
_PZ = np.uint64(0xA0761D6478BD642F)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True, nogil=True)
def mix64(z):
    """splitmix64 finaliser over a uint64."""
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True, nogil=True)
def _lattice(seed, ix, iy, iz):
    h = seed ^ (np.uint64(ix) * _PX) ^ (np.uint64(iy) * _PY) ^ (np.uint64(iz) * _PZ)
    h = mix64(h)
    return float(h >> _S11) * _INV53 * 2.0 - 1.0


@numba.njit(cache=True, nogil=True)
def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


@numba.njit(cache=True, nogil=True)
def _value_noise(seed, x, y, z):
    fx = math.floor(x)
    fy = math.floor(y)
    fz = math.floor(z)
    ix = np.int64(fx)
    iy = np.int64(fy)
    iz = np.int64(fz)
    u = _smooth(x - fx)
    v = _smooth(y - fy)
    w = _smooth(z - fz)
    c000 = _lattice(seed, ix, iy, iz)
    c100 = _lattice(seed, ix + 1, iy, iz)
    c010 = _lattice(seed, ix, iy + 1, iz)
    c110 = _lattice(seed, ix + 1, iy + 1, iz)
    c001 = _lattice(seed, ix, iy, iz + 1)
    c101 = _lattice(seed, ix + 1, iy, iz + 1)
    c011 = _lattice(seed, ix, iy + 1, iz + 1)
    c111 = _lattice(seed, ix + 1, iy + 1, iz + 1)
    x00 = c000 + u * (c100 - c000)
    x10 = c010 + u * (c110 - c010)
    x01 = c001 + u * (c101 - c001)
    x11 = c011 + u * (c111 - c011)
    y0 = x00 + v * (x10 - x00)
    y1 = x01 + v * (x11 - x01)
    return y0 + w * (y1 - y0)


@numba.njit(cache=True, nogil=True)
def _octave_seed(seed, o):
    return mix64(seed + np.uint64(o) * _GOLDEN)


@numba.njit(cache=True, nogil=True)
def _fbm(seed, x, y, z, frequency, octaves):
    total = 0.0
    norm = 0.0
    weight = 1.0
    freq = frequency
    for o in range(octaves):
        total += weight * _value_noise(_octave_seed(seed, o), x * freq, y * freq, z * freq)
        norm += weight
        weight *= 0.5
        freq *= 2.0
    v = total / norm
    # guard the last ulp so the documented range is exact
    return min(1.0, max(-1.0, v))


def lattice_value(seed: int, octave: int, ix: int, iy: int, iz: int) -> float:
    """The hashed lattice value used by octave ``octave`` of :func:`fbm_noise`."""
    # keep the seed uint64: a Python int would be typed int64 and promote to float
    s = np.uint64(_octave_seed(np.uint64(seed), np.int64(octave)))
    return float(_lattice(s, np.int64(ix), np.int64(iy), np.int64(iz)))


def fbm_noise(seed: int, p, frequency: float = 1.0, octaves: int = 1) -> float:
    """Seeded fractal value noise in [-1, 1]; octave ``o`` has weight ``2**-o``."""
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    return float(_fbm(np.uint64(seed), float(p[0]), float(p[1]), float(p[2]),
                      float(frequency), int(octaves)))


# ---------------------------------------------------------------------------
# primitives


@numba.njit(cache=True, nogil=True)
def _sd_capsule(px, py, pz, ax, ay, az, bx, by, bz, r):
    pax = px - ax
    pay = py - ay
    paz = pz - az
    bax = bx - ax
    bay = by - ay
    baz = bz - az
    bb = bax * bax + bay * bay + baz * baz
    h = 0.0
    if bb > 0.0:
        h = (pax * bax + pay * bay + paz * baz) / bb
        h = min(1.0, max(0.0, h))
    dx = pax - bax * h
    dy = pay - bay * h
    dz = paz - baz * h
    return math.sqrt(dx * dx + dy * dy + dz * dz) - r


@numba.njit(cache=True, nogil=True)
def _sd_box_segment(px, py, pz, ax, ay, az, bx, by, bz, r):
    """Exact distance to a box swept along a-b, cross-section 2r x 2r, ends padded by r."""
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length > 1e-12:
        ux, uy, uz = dx / length, dy / length, dz / length
        # v = u x up, falling back to u x x-axis for vertical segments
        vx, vy, vz = uy, -ux, 0.0
        vn = math.sqrt(vx * vx + vy * vy)
        if vn < 1e-9:
            vx, vy, vz = 0.0, uz, -uy
            vn = math.sqrt(vy * vy + vz * vz)
        vx /= vn
        vy /= vn
        vz /= vn
        wx = uy * vz - uz * vy
        wy = uz * vx - ux * vz
        wz = ux * vy - uy * vx
    else:
        ux, uy, uz = 1.0, 0.0, 0.0
        vx, vy, vz = 0.0, 1.0, 0.0
        wx, wy, wz = 0.0, 0.0, 1.0
    qx = px - 0.5 * (ax + bx)
    qy = py - 0.5 * (ay + by)
    qz = pz - 0.5 * (az + bz)
    l0 = abs(qx * ux + qy * uy + qz * uz) - (0.5 * length + r)
    l1 = abs(qx * vx + qy * vy + qz * vz) - r
    l2 = abs(qx * wx + qy * wy + qz * wz) - r
    o0 = max(l0, 0.0)
    o1 = max(l1, 0.0)
    o2 = max(l2, 0.0)
    return math.sqrt(o0 * o0 + o1 * o1 + o2 * o2) + min(max(l0, max(l1, l2)), 0.0)


@numba.njit(cache=True, nogil=True)
def _smooth_min(d1, d2, k):
    m = min(d1, d2)
    if k <= 0.0:
        return m
    h = max(k - abs(d1 - d2), 0.0) / k
    return m - h * h * k * 0.25


def sd_capsule(p, a, b, r: float) -> float:
    """Signed distance from ``p`` to the capsule with axis ``a``-``b`` and radius ``r``."""
    return float(_sd_capsule(float(p[0]), float(p[1]), float(p[2]),
                             float(a[0]), float(a[1]), float(a[2]),
                             float(b[0]), float(b[1]), float(b[2]), float(r)))


def sd_box_segment(p, a, b, r: float) -> float:
    return float(_sd_box_segment(float(p[0]), float(p[1]), float(p[2]),
                                 float(a[0]), float(a[1]), float(a[2]),
                                 float(b[0]), float(b[1]), float(b[2]), float(r)))


def smooth_min(d1: float, d2: float, k: float) -> float:
    """Polynomial smooth minimum; equals ``min`` once ``|d1 - d2| >= k``."""
    return float(_smooth_min(float(d1), float(d2), float(k)))


# ---------------------------------------------------------------------------
# packet templates


@numba.njit(cache=True, nogil=True)
def _surface_slope(offs, n):
    sxx = 0.0
    sxy = 0.0
    syy = 0.0
    sxz = 0.0
    syz = 0.0
    for j in range(n):
        ox = offs[j, 0]
        oy = offs[j, 1]
        oz = offs[j, 2]
        sxx += ox * ox
        sxy += ox * oy
        syy += oy * oy
        sxz += ox * oz
        syz += oy * oz
    det = sxx * syy - sxy * sxy
    scale = sxx + syy
    if n < 2 or det <= 1e-6 * scale * scale:
        return 0.0, 0.0
    gx = (sxz * syy - syz * sxy) / det
    gy = (syz * sxx - sxz * sxy) / det
    g = math.sqrt(gx * gx + gy * gy)
    if g > 1.0:
        gx /= g
        gy /= g
    return gx, gy


@numba.njit(cache=True, nogil=True)
def _packet_sdf(j, centers, offs, nadj, cls, seeds, ground_h, table, px, py, pz):
    """Distance from ``p`` to the template of packet ``j``."""
    c = cls[j]
    kind = TEMPLATE_KIND[c]
    r = table[c, 0]
    amp = table[c, 1]
    freq = table[c, 2]
    octaves = np.int64(table[c, 3])
    cx = centers[j, 0]
    cy = centers[j, 1]
    cz = centers[j, 2]
    n = nadj[j]

    if kind == SURFACE:
        gx, gy = _surface_slope(offs[j], n)
        height = pz - (ground_h[j] + gx * (px - cx) + gy * (py - cy))
        d = height / math.sqrt(1.0 + gx * gx + gy * gy)
        if amp > 0.0:
            taper = table[c, 4]
            w = 1.0
            if taper > 0.0:
                w = min(1.0, max(0.0, 1.0 - max(height, 0.0) / taper))
            if w > 0.0:
                d -= amp * w * _fbm(seeds[j], px, py, pz, freq, octaves)
        ex = px - cx
        ey = py - cy
        ez = pz - cz
        return max(d, math.sqrt(ex * ex + ey * ey + ez * ez) - r)

    if kind == BUMP:
        ex = px - cx
        ey = py - cy
        ez = pz - cz
        d = max(math.sqrt(ex * ex + ey * ey + ez * ez) - r, cz - pz)
    elif n == 0:
        # no neighbours means no orientation: every template degenerates to a ball
        ex = px - cx
        ey = py - cy
        ez = pz - cz
        d = math.sqrt(ex * ex + ey * ey + ez * ez) - r
    else:
        d1 = np.inf
        d2 = np.inf
        for m in range(n):
            bx = cx + 0.5 * offs[j, m, 0]
            by = cy + 0.5 * offs[j, m, 1]
            bz = cz + 0.5 * offs[j, m, 2]
            if kind == BOX:
                dm = _sd_box_segment(px, py, pz, cx, cy, cz, bx, by, bz, r)
            else:
                dm = _sd_capsule(px, py, pz, cx, cy, cz, bx, by, bz, r)
            if dm < d1:
                d2 = d1
                d1 = dm
            elif dm < d2:
                d2 = dm
        d = d1
        if n > 1:
            d = _smooth_min(d1, d2, table[c, 5])
    if amp > 0.0:
        d -= amp * _fbm(seeds[j], px, py, pz, freq, octaves)
    return d


@numba.njit(cache=True, nogil=True)
def _bounding_radius(c, offs, n, table):
    kind = TEMPLATE_KIND[c]
    r = table[c, 0]
    amp = table[c, 1]
    if kind == SURFACE or kind == BUMP or n == 0:
        return r + amp
    cross = SQRT3 * r if kind == BOX else r
    base = cross
    for m in range(n):
        ox = offs[m, 0]
        oy = offs[m, 1]
        oz = offs[m, 2]
        base = max(base, 0.5 * math.sqrt(ox * ox + oy * oy + oz * oz) + cross)
    if n > 1:
        base += 0.25 * table[c, 5]
    return base + amp


def bounding_radius(cls, offsets, table: np.ndarray) -> float:
    """Radius outside which the template of a packet is strictly positive."""
    offs = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    return float(_bounding_radius(int(cls), offs, len(offs), table))


# ---------------------------------------------------------------------------
# scene fields


class SdfSample(NamedTuple):
    distance: float
    material_id: int
    albedo: tuple[float, float, float]


class PacketArrays(NamedTuple):
    """Structure-of-arrays view of a packet list, as consumed by the kernels."""

    centers: np.ndarray
    offsets: np.ndarray
    n_adjacent: np.ndarray
    classes: np.ndarray
    seeds: np.ndarray
    ground_heights: np.ndarray
    bounding_radii: np.ndarray
    albedo: np.ndarray
    material_ids: np.ndarray

    def __len__(self):
        return len(self.centers)


def packet_arrays(packets, ground_heights=None) -> PacketArrays:
    n = len(packets)
    centers = np.zeros((n, 3))
    offsets = np.zeros((n, 8, 3))
    nadj = np.zeros(n, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64)
    seeds = np.zeros(n, dtype=np.uint64)
    radii = np.zeros(n)
    albedo = np.zeros((n, 3))
    mats = np.zeros(n, dtype=np.int64)
    for i, p in enumerate(packets):
        centers[i] = p.center
        m = len(p.adjacency)
        if m:
            offsets[i, :m] = p.adjacency
        nadj[i] = m
        classes[i] = int(p.cls)
        seeds[i] = p.seed
        radii[i] = p.bounding_radius
        albedo[i] = p.albedo
        mats[i] = p.material_id
    if ground_heights is None:
        ground_heights = compute_ground_heights(centers, classes)
    return PacketArrays(centers, offsets, nadj, classes, seeds,
                        np.asarray(ground_heights, dtype=np.float64), radii, albedo, mats)


def compute_ground_heights(centers: np.ndarray, classes: np.ndarray, groups=None) -> np.ndarray:
    """Reference ground height per packet.

    Surface-class packets use their own height. Others take the height of
    the nearest surface-class packet in the same group (chunk), falling
    back to the global minimum z.
    """
    n = len(centers)
    out = centers[:, 2].copy() if n else np.zeros(0)
    if n == 0:
        return out
    surface = np.isin(classes, [int(c) for c in (_C.GROUND, _C.GRASS, _C.ROAD)])
    zmin = float(centers[:, 2].min())
    if groups is None:
        groups = [np.arange(n)]
    for members in groups:
        members = np.asarray(members, dtype=np.int64)
        ground = members[surface[members]]
        others = members[~surface[members]]
        if len(others) == 0:
            continue
        if len(ground) == 0:
            out[others] = zmin
            continue
        d = np.linalg.norm(centers[others, None, :] - centers[None, ground, :], axis=2)
        out[others] = centers[ground[np.argmin(d, axis=1)], 2]
    return out


def packet_sdf(packet, params=None, ground_height: float | None = None, p=(0.0, 0.0, 0.0)) -> SdfSample:
    """Evaluate the class template of a single packet at ``p``.

    ``params`` is a table from :func:`template_table` or a class->params
    mapping. ``ground_height`` defaults to the packet's own height.
    """
    table = params if isinstance(params, np.ndarray) else template_table(params)
    arr = packet_arrays([packet], [packet.center[2] if ground_height is None else ground_height])
    d = _packet_sdf(0, arr.centers, arr.offsets, arr.n_adjacent, arr.classes, arr.seeds,
                    arr.ground_heights, table, float(p[0]), float(p[1]), float(p[2]))
    return SdfSample(float(d), packet.material_id, tuple(packet.albedo))


@numba.njit(cache=True, nogil=True)
def _blend_pair(d1, d2, i1, i2, cls, table):
    if i2 < 0:
        return d1
    k = min(table[cls[i1], 5], table[cls[i2], 5])
    return _smooth_min(d1, d2, k)


@numba.njit(cache=True, nogil=True)
def _scene_eval(ids, centers, offs, nadj, cls, seeds, ground_h, table, px, py, pz):
    """Smooth union of the two nearest templates among ``ids``; (distance, argmin)."""
    d1 = np.inf
    d2 = np.inf
    i1 = -1
    i2 = -1
    for m in range(ids.shape[0]):
        j = ids[m]
        d = _packet_sdf(j, centers, offs, nadj, cls, seeds, ground_h, table, px, py, pz)
        if d < d1 or (d == d1 and j < i1):
            d2 = d1
            i2 = i1
            d1 = d
            i1 = j
        elif d < d2 or (d == d2 and j < i2):
            d2 = d
            i2 = j
    if i1 < 0:
        return EMPTY_DISTANCE, -1
    return _blend_pair(d1, d2, i1, i2, cls, table), i1


def scene_sdf(packets, params=None, p=(0.0, 0.0, 0.0), ground_heights=None) -> SdfSample:
    """Blend the candidate packets' templates at ``p``.

    The two nearest templates are joined with :func:`smooth_min` using the
    smaller of their ``blend_k``; material and albedo come from the nearest.
    With no candidates the distance is ``EMPTY_DISTANCE``.
    """
    if len(packets) == 0:
        return SdfSample(EMPTY_DISTANCE, -1, (0.0, 0.0, 0.0))
    table = params if isinstance(params, np.ndarray) else template_table(params)
    arr = packets if isinstance(packets, PacketArrays) else packet_arrays(packets, ground_heights)
    d, i = _scene_eval(np.arange(len(arr), dtype=np.int64), arr.centers, arr.offsets,
                       arr.n_adjacent, arr.classes, arr.seeds, arr.ground_heights, table,
                       float(p[0]), float(p[1]), float(p[2]))
    return SdfSample(float(d), int(arr.material_ids[i]), tuple(float(v) for v in arr.albedo[i]))


def sdf_gradient(field, p, h: float = 1e-4) -> np.ndarray:
    """Normalised central-difference gradient of ``field`` at ``p``.

    ``field`` maps a 3-vector to a distance or an :class:`SdfSample`.
    Falls back to +z where the gradient vanishes.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    p = np.asarray(p, dtype=np.float64)

    def f(q):
        v = field(q)
        return v.distance if isinstance(v, SdfSample) else float(v)

    g = np.zeros(3)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        g[axis] = (f(p + e) - f(p - e)) / (2.0 * h)
    norm = float(np.linalg.norm(g))
    if norm > 1e-12:
        return g / norm
    return np.array([0.0, 0.0, 1.0])
