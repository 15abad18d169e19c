"""CPU sphere-tracing renderer over per-packet screen-aligned quads.

Each surviving packet contributes a quad: the conservative pixel rectangle
of its bounding sphere, grown by the class blend width so that smooth
blending never reaches outside it. Pixels are grouped in 16x16 tiles; a
tile's bin lists every quad that overlaps it. A pixel ray is marched once
through the depth-sorted sphere intervals of its candidates, so the first
hit is the nearest one.

Three culling stages run before tracing: chunk spheres against the
frustum and the previous frame's depth pyramid, then packet spheres
against both. Occlusion queries only cull a sphere whose nearest depth in
the previous view lies behind every sampled depth, so with a static camera
the culled and unculled images are identical.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .config import RenderConfig, resolve_threads
from .errors import PointAmpError
from .packets import material_table
from .ppm import encode_ppm
from .sdf import (
    BLEND_K,
    PacketArrays,
    SdfSample,
    _blend_pair,
    _packet_sdf,
    compute_ground_heights,
    packet_arrays,
    step_scale,
    template_table,
)
from .spatial import Chunk, make_chunk

TILE = 16
GRADIENT_H = 1e-4


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    right: tuple[float, float, float]
    up: tuple[float, float, float]
    forward: tuple[float, float, float]
    vertical_fov: float
    near: float
    far: float
    width: int
    height: int

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise PointAmpError(f"camera needs 0 < near < far (near={self.near}, far={self.far})")
        if not 0 < self.vertical_fov < math.pi:
            raise PointAmpError("vertical_fov must lie in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise PointAmpError(f"viewport must be non-empty, got {self.width}x{self.height}")
        basis = np.array([self.right, self.up, self.forward], dtype=np.float64)
        if not np.all(np.isfinite(basis)) or np.abs(basis @ basis.T - np.eye(3)).max() > 1e-9:
            raise PointAmpError("camera basis must be orthonormal")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), vertical_fov=math.radians(50.0),
                near=0.1, far=2000.0, width=640, height=360) -> "Camera":
        pos = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - pos
        norm = np.linalg.norm(fwd)
        if norm == 0:
            raise PointAmpError("camera target coincides with its position")
        fwd /= norm
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return cls(tuple(pos.tolist()), tuple(right.tolist()), tuple(true_up.tolist()),
                   tuple(fwd.tolist()), float(vertical_fov), float(near), float(far),
                   int(width), int(height))

    @classmethod
    def from_config(cls, cfg: RenderConfig, eye=None, target=None) -> "Camera":
        return cls.look_at(eye if eye is not None else cfg.eye,
                           target if target is not None else cfg.target,
                           vertical_fov=math.radians(cfg.vertical_fov_deg), near=cfg.near,
                           far=cfg.far, width=cfg.width, height=cfg.height)

    def packed(self) -> np.ndarray:
        tan_v = math.tan(0.5 * self.vertical_fov)
        return np.array([*self.position, *self.right, *self.up, *self.forward, tan_v,
                         self.width / self.height, self.near, self.far], dtype=np.float64)

    def ray(self, i: float, j: float) -> np.ndarray:
        """Unit direction through the centre of pixel column ``i``, row ``j``."""
        return np.array(_pixel_ray(self.packed(), self.width, self.height, int(i), int(j))[:3])


@dataclass
class FrameBuffers:
    color: np.ndarray
    depth: np.ndarray
    camera: Camera
    packet_ids: np.ndarray = field(repr=False)

    @classmethod
    def blank(cls, camera: Camera, background=(0.0, 0.0, 0.0)) -> "FrameBuffers":
        h, w = camera.height, camera.width
        color = np.empty((h, w, 3))
        color[:] = background
        return cls(color, np.full((h, w), camera.far), camera, np.full((h, w), -1, dtype=np.int64))


@dataclass
class CullStats:
    total: int = 0
    frustum_culled: int = 0
    chunk_culled: int = 0
    occlusion_culled: int = 0
    traced: int = 0
    rays_marched: int = 0
    avg_steps: float = 0.0

    @property
    def culled(self) -> int:
        return self.frustum_culled + self.chunk_culled + self.occlusion_culled

    def to_line(self) -> str:
        return (f"total={self.total} frustum_culled={self.frustum_culled} "
                f"chunk_culled={self.chunk_culled} occlusion_culled={self.occlusion_culled} "
                f"traced={self.traced} rays_marched={self.rays_marched} "
                f"avg_steps={self.avg_steps:.3f}")


class QuadProjection(NamedTuple):
    x0: int
    y0: int
    x1: int
    y1: int
    depth_min: float
    depth_max: float


class Hit(NamedTuple):
    t: float
    sample: SdfSample
    normal: tuple[float, float, float]
    packet: int


# ---------------------------------------------------------------------------
# projection kernels


@numba.njit(cache=True, nogil=True)
def _pixel_ray(cam, w, h, i, j):
    tan_v = cam[12]
    aspect = cam[13]
    sx = ((i + 0.5) / w * 2.0 - 1.0) * tan_v * aspect
    sy = (1.0 - (j + 0.5) / h * 2.0) * tan_v
    dx = cam[9] + sx * cam[3] + sy * cam[6]
    dy = cam[10] + sx * cam[4] + sy * cam[7]
    dz = cam[11] + sx * cam[5] + sy * cam[8]
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n, 1.0 / n


@numba.njit(cache=True, nogil=True)
def _slope_bounds(xc, zc, r):
    """Tangent slopes x/z bounding a circle of radius r at (xc, zc) seen from the origin."""
    denom = zc * zc - r * r
    t = math.sqrt(max(xc * xc + zc * zc - r * r, 0.0))
    return (xc * zc - r * t) / denom, (xc * zc + r * t) / denom


@numba.njit(cache=True, nogil=True)
def _project(cam, w, h, cx, cy, cz, r, out):
    """Conservative pixel rectangle of a sphere.

    Fills ``out`` with x0, y0, x1, y1, camera depth of the centre and a
    clipped flag (rectangle touched or crossed the viewport border).
    Returns False when the sphere lies entirely outside the frustum.
    """
    vx = cx - cam[0]
    vy = cy - cam[1]
    vz = cz - cam[2]
    xc = vx * cam[3] + vy * cam[4] + vz * cam[5]
    yc = vx * cam[6] + vy * cam[7] + vz * cam[8]
    zc = vx * cam[9] + vy * cam[10] + vz * cam[11]
    near = cam[14]
    far = cam[15]
    if zc + r < near or zc - r > far:
        return False
    ty = cam[12]
    tx = ty * cam[13]
    kx = r * math.sqrt(1.0 + tx * tx)
    ky = r * math.sqrt(1.0 + ty * ty)
    if xc - tx * zc > kx or -xc - tx * zc > kx or yc - ty * zc > ky or -yc - ty * zc > ky:
        return False
    clipped = False
    if zc > r * (1.0 + 1e-9) + 1e-12:
        sx0, sx1 = _slope_bounds(xc, zc, r)
        sy0, sy1 = _slope_bounds(yc, zc, r)
        px0 = (sx0 / tx + 1.0) * 0.5 * w
        px1 = (sx1 / tx + 1.0) * 0.5 * w
        py0 = (1.0 - sy1 / ty) * 0.5 * h
        py1 = (1.0 - sy0 / ty) * 0.5 * h
        x0 = np.ceil(px0 - 0.5) - 1.0
        x1 = np.floor(px1 - 0.5) + 1.0
        y0 = np.ceil(py0 - 0.5) - 1.0
        y1 = np.floor(py1 - 0.5) + 1.0
        if x0 < 0 or y0 < 0 or x1 > w - 1 or y1 > h - 1:
            clipped = True
        x0 = max(x0, 0.0)
        y0 = max(y0, 0.0)
        x1 = min(x1, w - 1.0)
        y1 = min(y1, h - 1.0)
    else:
        clipped = True
        x0 = 0.0
        y0 = 0.0
        x1 = w - 1.0
        y1 = h - 1.0
    if x0 > x1 or y0 > y1:
        return False
    out[0] = x0
    out[1] = y0
    out[2] = x1
    out[3] = y1
    out[4] = zc
    out[5] = 1.0 if clipped else 0.0
    return True


@numba.njit(cache=True, nogil=True)
def _project_many(cam, w, h, centers, radii, ids, rects, zc, clipped, inside):
    buf = np.empty(6)
    for m in range(ids.shape[0]):
        j = ids[m]
        ok = _project(cam, w, h, centers[j, 0], centers[j, 1], centers[j, 2], radii[j], buf)
        inside[m] = ok
        if ok:
            for a in range(4):
                rects[m, a] = np.int64(buf[a])
            zc[m] = buf[4]
            clipped[m] = buf[5] > 0.5


# ---------------------------------------------------------------------------
# depth pyramid


def build_hiz(depth: np.ndarray) -> list[np.ndarray]:
    """Max-depth mip chain, halving (rounding up) down to 1x1."""
    levels = [np.asarray(depth, dtype=np.float64)]
    while levels[-1].shape != (1, 1):
        cur = levels[-1]
        h, w = cur.shape
        nh, nw = (h + 1) // 2, (w + 1) // 2
        padded = np.full((nh * 2, nw * 2), -np.inf)
        padded[:h, :w] = cur
        levels.append(padded.reshape(nh, 2, nw, 2).max(axis=(1, 3)))
    return levels


def _flatten_hiz(levels):
    offsets = np.zeros(len(levels) + 1, dtype=np.int64)
    for i, lv in enumerate(levels):
        offsets[i + 1] = offsets[i] + lv.size
    flat = np.concatenate([lv.ravel() for lv in levels])
    widths = np.array([lv.shape[1] for lv in levels], dtype=np.int64)
    return flat, offsets, widths


@numba.njit(cache=True, nogil=True)
def _occluded(cam, w, h, flat, offsets, widths, cx, cy, cz, r, margin):
    buf = np.empty(6)
    if not _project(cam, w, h, cx, cy, cz, r, buf):
        return False
    if buf[5] > 0.5:
        return False
    nearest = buf[4] - r
    if nearest < cam[14]:
        return False
    x0 = max(np.int64(buf[0]) - 1, 0)
    y0 = max(np.int64(buf[1]) - 1, 0)
    x1 = min(np.int64(buf[2]) + 1, w - 1)
    y1 = min(np.int64(buf[3]) + 1, h - 1)
    level = 0
    while (x1 >> level) - (x0 >> level) > 1 or (y1 >> level) - (y0 >> level) > 1:
        level += 1
    if level >= widths.shape[0]:
        level = widths.shape[0] - 1
    lw = widths[level]
    base = offsets[level]
    deepest = -np.inf
    for yy in range(y0 >> level, (y1 >> level) + 1):
        for xx in range(x0 >> level, (x1 >> level) + 1):
            deepest = max(deepest, flat[base + yy * lw + xx])
    return nearest > deepest + margin


@numba.njit(cache=True, nogil=True)
def _occluded_many(cam, w, h, flat, offsets, widths, centers, radii, ids, margin, out):
    for m in range(ids.shape[0]):
        j = ids[m]
        out[m] = _occluded(cam, w, h, flat, offsets, widths, centers[j, 0], centers[j, 1],
                           centers[j, 2], radii[j], margin)


# ---------------------------------------------------------------------------
# tracing kernels


@numba.njit(cache=True, nogil=True)
def _ray_sphere(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    px = ox - cx
    py = oy - cy
    pz = oz - cz
    b = px * dx + py * dy + pz * dz
    c = px * px + py * py + pz * pz - r * r
    disc = b * b - c
    if disc < 0.0:
        return False, 0.0, 0.0
    s = math.sqrt(disc)
    return True, -b - s, -b + s


@numba.njit(cache=True, nogil=True)
def _insert(cid, ctin, ctout, n, j, tin, tout):
    slot = n
    while slot > 0 and (ctin[slot - 1] > tin or (ctin[slot - 1] == tin and cid[slot - 1] > j)):
        cid[slot] = cid[slot - 1]
        ctin[slot] = ctin[slot - 1]
        ctout[slot] = ctout[slot - 1]
        slot -= 1
    cid[slot] = j
    ctin[slot] = tin
    ctout[slot] = tout


@numba.njit(cache=True, nogil=True)
def _field_near(cid, n, centers, offs, nadj, cls, seeds, gh, rho, table, px, py, pz):
    """Blended field over the candidates whose quad sphere contains p."""
    d1 = np.inf
    d2 = np.inf
    i1 = -1
    i2 = -1
    for m in range(n):
        j = cid[m]
        ex = px - centers[j, 0]
        ey = py - centers[j, 1]
        ez = pz - centers[j, 2]
        if ex * ex + ey * ey + ez * ez > rho[j] * rho[j]:
            continue
        d = _packet_sdf(j, centers, offs, nadj, cls, seeds, gh, table, px, py, pz)
        if d < d1 or (d == d1 and j < i1):
            d2 = d1
            i2 = i1
            d1 = d
            i1 = j
        elif d < d2 or (d == d2 and j < i2):
            d2 = d
            i2 = j
    if i1 < 0:
        return np.inf, -1
    return _blend_pair(d1, d2, i1, i2, cls, table), i1


# conservative steps taken after a hit to pull t onto the surface
REFINE_STEPS = 8


@numba.njit(cache=True, nogil=True)
def _field_at(t, ptr, ox, oy, oz, dx, dy, dz, cid, ctout, centers, offs, nadj, cls, seeds, gh,
              table):
    """Blended field at ray parameter t over the candidates entered so far: (distance, nearest)."""
    px = ox + t * dx
    py = oy + t * dy
    pz = oz + t * dz
    d1 = np.inf
    d2 = np.inf
    i1 = -1
    i2 = -1
    for m in range(ptr):
        if ctout[m] < t:
            continue
        j = cid[m]
        d = _packet_sdf(j, centers, offs, nadj, cls, seeds, gh, table, px, py, pz)
        if d < d1 or (d == d1 and j < i1):
            d2 = d1
            i2 = i1
            d1 = d
            i1 = j
        elif d < d2 or (d == d2 and j < i2):
            d2 = d
            i2 = j
    if i1 < 0:
        return np.inf, -1
    return _blend_pair(d1, d2, i1, i2, cls, table), i1


@numba.njit(cache=True, nogil=True)
def _march(ox, oy, oz, dx, dy, dz, t_near, t_far, cid, ctin, ctout, n,
           centers, offs, nadj, cls, seeds, gh, table, sscale, hit_eps, max_steps):
    """Sphere-trace through depth-sorted candidate intervals.

    Returns (hit, t, nearest packet, steps). Only candidates whose interval
    contains the current t are evaluated; steps never cross the next entry.
    A hit is declared once the field drops below ``hit_eps``; a few more
    conservative steps then bring t closer to the surface, which matters
    for rays meeting it at a shallow angle.
    """
    if n == 0:
        return False, 0.0, -1, 0
    t_end = t_far
    last = -np.inf
    for m in range(n):
        last = max(last, ctout[m])
    t_end = min(t_end, last)
    t = max(t_near, ctin[0])
    ptr = 0
    steps = 0
    while steps < max_steps:
        if t > t_end:
            break
        while ptr < n and ctin[ptr] <= t:
            ptr += 1
        next_entry = ctin[ptr] if ptr < n else np.inf
        dist, i1 = _field_at(t, ptr, ox, oy, oz, dx, dy, dz, cid, ctout, centers, offs, nadj,
                             cls, seeds, gh, table)
        steps += 1
        if i1 < 0:
            if ptr >= n:
                break
            t = max(t, next_entry)
            continue
        if dist < hit_eps:
            for _ in range(REFINE_STEPS):
                if dist <= 1e-3 * hit_eps:
                    break
                t_next = t + sscale * dist
                while ptr < n and ctin[ptr] <= t_next:
                    ptr += 1
                d_next, j_next = _field_at(t_next, ptr, ox, oy, oz, dx, dy, dz, cid, ctout,
                                           centers, offs, nadj, cls, seeds, gh, table)
                if j_next < 0:
                    break
                t = t_next
                dist = d_next
                i1 = j_next
            return True, t, i1, steps
        t += min(sscale * dist, next_entry - t)
    return False, t, -1, steps


@numba.njit(cache=True, nogil=True)
def _normal(cid, n, centers, offs, nadj, cls, seeds, gh, rho, table, px, py, pz):
    h = GRADIENT_H
    g = np.empty(3)
    for a in range(3):
        ex = h if a == 0 else 0.0
        ey = h if a == 1 else 0.0
        ez = h if a == 2 else 0.0
        fp, _ = _field_near(cid, n, centers, offs, nadj, cls, seeds, gh, rho, table,
                            px + ex, py + ey, pz + ez)
        fm, _ = _field_near(cid, n, centers, offs, nadj, cls, seeds, gh, rho, table,
                            px - ex, py - ey, pz - ez)
        g[a] = (fp - fm) / (2.0 * h)
    norm = math.sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
    if not norm > 1e-12 or not math.isfinite(norm):
        return 0.0, 0.0, 1.0
    return g[0] / norm, g[1] / norm, g[2] / norm


@numba.njit(cache=True, nogil=True)
def _shade(ar, ag, ab, mat, mtable, nx, ny, nz, vx, vy, vz, lx, ly, lz, out):
    nl = max(0.0, nx * lx + ny * ly + nz * lz)
    hx = lx + vx
    hy = ly + vy
    hz = lz + vz
    hn = math.sqrt(hx * hx + hy * hy + hz * hz)
    nh = 0.0
    if hn > 0.0:
        nh = max(0.0, (nx * hx + ny * hy + nz * hz) / hn)
    rough = mtable[mat, 4]
    shininess = max(0.0, 2.0 / (rough ** 4 + 1e-4) - 2.0)
    spec = mtable[mat, 3] * nh ** shininess
    out[0] = min(1.0, max(0.0, ar * mtable[mat, 0] * nl + spec))
    out[1] = min(1.0, max(0.0, ag * mtable[mat, 1] * nl + spec))
    out[2] = min(1.0, max(0.0, ab * mtable[mat, 2] * nl + spec))


@numba.njit(cache=True, nogil=True)
def _sky(dz, zenith, horizon, out):
    e = min(1.0, max(0.0, dz))
    for a in range(3):
        out[a] = horizon[a] + (zenith[a] - horizon[a]) * e


@numba.njit(cache=True, nogil=True)
def _render_tiles(tiles, ntx, w, h, cam, centers, offs, nadj, cls, seeds, gh, rho, albedo,
                  mats, table, mtable, bin_start, bin_items, rects, sscale, hit_eps, max_steps,
                  light, zenith, horizon, color, depth, hit_id, steps_out):
    ox = cam[0]
    oy = cam[1]
    oz = cam[2]
    near = cam[14]
    far = cam[15]
    rgb = np.empty(3)
    for tile in tiles:
        tx = tile % ntx
        ty = tile // ntx
        lo = bin_start[tile]
        hi = bin_start[tile + 1]
        nb = hi - lo
        cid = np.empty(max(nb, 1), dtype=np.int64)
        ctin = np.empty(max(nb, 1))
        ctout = np.empty(max(nb, 1))
        for j in range(ty * TILE, min(h, ty * TILE + TILE)):
            for i in range(tx * TILE, min(w, tx * TILE + TILE)):
                dx, dy, dz, cos = _pixel_ray(cam, w, h, i, j)
                t_near = near / cos
                t_far = far / cos
                n = 0
                for m in range(lo, hi):
                    k = bin_items[m]
                    if i < rects[k, 0] or i > rects[k, 2] or j < rects[k, 1] or j > rects[k, 3]:
                        continue
                    ok, tin, tout = _ray_sphere(ox, oy, oz, dx, dy, dz, centers[k, 0],
                                                centers[k, 1], centers[k, 2], rho[k])
                    if not ok or tout < t_near or tin > t_far:
                        continue
                    _insert(cid, ctin, ctout, n, k, tin, tout)
                    n += 1
                depth[j, i] = far
                hit_id[j, i] = -1
                steps_out[j, i] = 0
                if n > 0:
                    hit, t, i1, steps = _march(ox, oy, oz, dx, dy, dz, t_near, t_far, cid, ctin,
                                               ctout, n, centers, offs, nadj, cls, seeds, gh,
                                               table, sscale, hit_eps, max_steps)
                    steps_out[j, i] = steps
                    if hit:
                        px = ox + t * dx
                        py = oy + t * dy
                        pz = oz + t * dz
                        nx, ny, nz = _normal(cid, n, centers, offs, nadj, cls, seeds, gh, rho,
                                             table, px, py, pz)
                        _shade(albedo[i1, 0], albedo[i1, 1], albedo[i1, 2], mats[i1], mtable,
                               nx, ny, nz, -dx, -dy, -dz, light[0], light[1], light[2], rgb)
                        color[j, i, 0] = rgb[0]
                        color[j, i, 1] = rgb[1]
                        color[j, i, 2] = rgb[2]
                        depth[j, i] = min(max(t * cos, near), far)
                        hit_id[j, i] = i1
                        continue
                _sky(dz, zenith, horizon, rgb)
                color[j, i, 0] = rgb[0]
                color[j, i, 1] = rgb[1]
                color[j, i, 2] = rgb[2]


@numba.njit(cache=True, nogil=True)
def _bin(ids, rects, ntx, nty):
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for m in range(ids.shape[0]):
        k = ids[m]
        for ty in range(rects[k, 1] // TILE, rects[k, 3] // TILE + 1):
            for tx in range(rects[k, 0] // TILE, rects[k, 2] // TILE + 1):
                counts[ty * ntx + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    items = np.empty(start[-1], dtype=np.int64)
    for m in range(ids.shape[0]):
        k = ids[m]
        for ty in range(rects[k, 1] // TILE, rects[k, 3] // TILE + 1):
            for tx in range(rects[k, 0] // TILE, rects[k, 2] // TILE + 1):
                t = ty * ntx + tx
                items[fill[t]] = k
                fill[t] += 1
    return start, items


# ---------------------------------------------------------------------------
# scene


class Scene:
    """Packets, chunks and the parameter tables they render with."""

    def __init__(self, packets, chunks=None, templates=None, materials=None):
        self.packets = list(packets)
        self.table = templates if isinstance(templates, np.ndarray) else template_table(templates)
        self.mtable = materials if isinstance(materials, np.ndarray) else material_table(materials)
        n = len(self.packets)
        if chunks is None or (n and not chunks):
            chunks = [self._single_chunk()] if n else []
        self.chunks = list(chunks)
        seen = np.zeros(n, dtype=np.int64)
        for c in self.chunks:
            seen[list(c.packet_indices)] += 1
        if n and not np.all(seen == 1):
            raise PointAmpError("every packet must belong to exactly one chunk")
        groups = [np.asarray(c.packet_indices, dtype=np.int64) for c in self.chunks]
        centers = np.array([p.center for p in self.packets], dtype=np.float64).reshape(-1, 3)
        classes = np.array([int(p.cls) for p in self.packets], dtype=np.int64)
        self.arrays: PacketArrays = packet_arrays(
            self.packets, compute_ground_heights(centers, classes, groups))
        blend = self.table[:, BLEND_K]
        # quad sphere: bounding sphere grown by the blend width
        self.rho = self.arrays.bounding_radii + blend[classes] if n else np.zeros(0)
        self.chunk_centers = np.array([c.sphere_center for c in self.chunks]).reshape(-1, 3)
        self.chunk_radii = np.array([c.sphere_radius for c in self.chunks]) + float(blend.max())
        self.step_scale = step_scale(self.table, np.unique(classes)) if n else 1.0

    def _single_chunk(self) -> Chunk:
        centers = np.array([p.center for p in self.packets], dtype=np.float64)
        radii = np.array([p.bounding_radius for p in self.packets])
        return make_chunk((0, 0, 0), range(len(self.packets)), centers, radii)

    def __len__(self):
        return len(self.packets)

    def bounds(self):
        a = self.arrays
        if len(a) == 0:
            return np.zeros(3), np.zeros(3)
        return a.centers.min(axis=0), a.centers.max(axis=0)


def default_view(scene: Scene):
    """Eye/target pair framing the scene from the south-west, above."""
    lo, hi = scene.bounds()
    mid = 0.5 * (lo + hi)
    extent = max(float(np.max(hi - lo)), 1.0)
    eye = mid + np.array([-0.6, -0.8, 0.55]) * extent + np.array([0.0, 0.0, 2.0])
    return tuple(eye.tolist()), tuple(mid.tolist())


# ---------------------------------------------------------------------------
# public operations


def project_quad(camera: Camera, center, radius: float) -> QuadProjection | None:
    """Pixel rectangle covering a sphere's projection, or None when it is outside the frustum."""
    buf = np.empty(6)
    if not _project(camera.packed(), camera.width, camera.height, float(center[0]),
                    float(center[1]), float(center[2]), float(radius), buf):
        return None
    zc = float(buf[4])
    return QuadProjection(int(buf[0]), int(buf[1]), int(buf[2]), int(buf[3]),
                          zc - radius, zc + radius)


def occlusion_margin(cfg: RenderConfig) -> float:
    return 2.0 * cfg.hit_eps


def occlusion_test(prev: FrameBuffers, center, radius: float, margin: float = 2e-3,
                   hiz=None) -> bool:
    """True when the sphere is hidden behind the previous frame's depth."""
    levels = hiz if hiz is not None else build_hiz(prev.depth)
    flat, offsets, widths = _flatten_hiz(levels)
    cam = prev.camera
    return bool(_occluded(cam.packed(), cam.width, cam.height, flat, offsets, widths,
                          float(center[0]), float(center[1]), float(center[2]), float(radius),
                          float(margin)))


def cull_chunk(camera: Camera, chunk: Chunk, prev: FrameBuffers | None = None,
               margin: float = 2e-3, blend: float = 0.0) -> tuple[bool, str | None]:
    """(keep, reason); reason is ``"frustum"`` or ``"occlusion"`` when culled."""
    radius = chunk.sphere_radius + blend
    if project_quad(camera, chunk.sphere_center, radius) is None:
        return False, "frustum"
    if prev is not None and occlusion_test(prev, chunk.sphere_center, radius, margin):
        return False, "occlusion"
    return True, None


def _candidates(arrays, rho, origin, direction, t_near, t_far):
    cid = np.empty(max(len(arrays), 1), dtype=np.int64)
    ctin = np.empty(max(len(arrays), 1))
    ctout = np.empty(max(len(arrays), 1))
    n = 0
    for k in range(len(arrays)):
        ok, tin, tout = _ray_sphere(*origin, *direction, *arrays.centers[k], rho[k])
        if ok and tout >= t_near and tin <= t_far:
            _insert(cid, ctin, ctout, n, k, tin, tout)
            n += 1
    return cid, ctin, ctout, n


def march_ray(origin, direction, candidates, params=None, near: float = 0.0,
              far: float = np.inf, hit_eps: float = 1e-3, max_steps: int = 256,
              scale: float | None = None, ground_heights=None):
    """Low-level march: ``(t or None, packet index, steps)``."""
    scene = candidates if isinstance(candidates, Scene) else Scene(candidates, templates=params)
    arrays = scene.arrays if ground_heights is None else scene.arrays._replace(
        ground_heights=np.asarray(ground_heights, dtype=np.float64))
    o = tuple(float(v) for v in origin)
    d = np.asarray(direction, dtype=np.float64)
    d = tuple((d / np.linalg.norm(d)).tolist())
    cid, ctin, ctout, n = _candidates(arrays, scene.rho, o, d, near, far)
    sscale = scene.step_scale if scale is None else scale
    hit, t, idx, steps = _march(*o, *d, near, far, cid, ctin, ctout, n, arrays.centers,
                                arrays.offsets, arrays.n_adjacent, arrays.classes, arrays.seeds,
                                arrays.ground_heights, scene.table, sscale, hit_eps, max_steps)
    return (float(t) if hit else None), int(idx), int(steps)


def trace_pixel(origin, direction, candidates, params=None, near: float = 0.0,
                far: float = np.inf, hit_eps: float = 1e-3, max_steps: int = 256,
                scale: float | None = None) -> Hit | None:
    """Sphere-trace one ray against candidate packets; None on a miss."""
    scene = candidates if isinstance(candidates, Scene) else Scene(candidates, templates=params)
    t, idx, _ = march_ray(origin, direction, scene, near=near, far=far, hit_eps=hit_eps,
                          max_steps=max_steps, scale=scale)
    if t is None:
        return None
    a = scene.arrays
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    p = o + t * d
    cid = np.arange(len(a), dtype=np.int64)
    dist, _ = _field_near(cid, len(a), a.centers, a.offsets, a.n_adjacent, a.classes, a.seeds,
                          a.ground_heights, scene.rho, scene.table, *p)
    normal = _normal(cid, len(a), a.centers, a.offsets, a.n_adjacent, a.classes, a.seeds,
                     a.ground_heights, scene.rho, scene.table, *p)
    sample = SdfSample(float(dist), int(a.material_ids[idx]), tuple(a.albedo[idx].tolist()))
    return Hit(t, sample, tuple(float(v) for v in normal), idx)


def shade(sample: SdfSample, normal, view_dir, light_dir, materials=None) -> tuple[float, float, float]:
    """Lambert plus normalised-Blinn specular, clamped to [0, 1].

    ``view_dir`` points from the eye towards the surface; ``light_dir``
    points from the surface towards the light.
    """
    mtable = materials if isinstance(materials, np.ndarray) else material_table(materials)
    out = np.empty(3)
    _shade(float(sample.albedo[0]), float(sample.albedo[1]), float(sample.albedo[2]),
           int(sample.material_id), mtable, *map(float, normal),
           *(-float(v) for v in view_dir), *map(float, light_dir), out)
    return (float(out[0]), float(out[1]), float(out[2]))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def render_frame(scene: Scene, camera: Camera, config: RenderConfig | None = None,
                 prev: FrameBuffers | None = None, threads: int | None = None
                 ) -> tuple[FrameBuffers, CullStats]:
    """Render one frame; ``prev`` enables reprojection occlusion culling."""
    cfg = config or RenderConfig()
    if camera.width <= 0 or camera.height <= 0:
        raise PointAmpError("zero-size viewport")
    n_threads = resolve_threads(cfg.threads if threads is None else threads)
    w, h = camera.width, camera.height
    cam = camera.packed()
    a = scene.arrays
    n = len(scene)
    stats = CullStats(total=n)
    margin = occlusion_margin(cfg)

    use_prev = (cfg.cull_occlusion and prev is not None
                and prev.depth.shape == (prev.camera.height, prev.camera.width))
    if use_prev:
        pcam = prev.camera.packed()
        flat, offsets, widths = _flatten_hiz(build_hiz(prev.depth))

    # chunk stage
    keep_chunk = np.ones(len(scene.chunks), dtype=bool)
    if cfg.cull_chunk and len(scene.chunks):
        ids = np.arange(len(scene.chunks), dtype=np.int64)
        rects = np.zeros((len(ids), 4), dtype=np.int64)
        zc = np.zeros(len(ids))
        clipped = np.zeros(len(ids), dtype=np.bool_)
        inside = np.zeros(len(ids), dtype=np.bool_)
        _project_many(cam, w, h, scene.chunk_centers, scene.chunk_radii, ids, rects, zc,
                      clipped, inside)
        hidden = np.zeros(len(ids), dtype=np.bool_)
        if use_prev:
            _occluded_many(pcam, prev.camera.width, prev.camera.height, flat, offsets, widths,
                           scene.chunk_centers, scene.chunk_radii, ids, margin, hidden)
        for c, chunk in enumerate(scene.chunks):
            if not inside[c]:
                keep_chunk[c] = False
                stats.chunk_culled += len(chunk.packet_indices)
            elif hidden[c]:
                keep_chunk[c] = False
                stats.occlusion_culled += len(chunk.packet_indices)

    live = [np.asarray(c.packet_indices, dtype=np.int64) for c, k in zip(scene.chunks, keep_chunk) if k]
    ids = np.sort(np.concatenate(live)) if live else np.zeros(0, dtype=np.int64)

    # packet stage
    rects = np.zeros((n, 4), dtype=np.int64)
    if len(ids):
        sub_rects = np.zeros((len(ids), 4), dtype=np.int64)
        zc = np.zeros(len(ids))
        clipped = np.zeros(len(ids), dtype=np.bool_)
        inside = np.zeros(len(ids), dtype=np.bool_)
        _project_many(cam, w, h, a.centers, scene.rho, ids, sub_rects, zc, clipped, inside)
        rects[ids] = sub_rects
        if cfg.cull_frustum:
            stats.frustum_culled += int((~inside).sum())
        visible = ids[inside]
        if use_prev and len(visible):
            hidden = np.zeros(len(visible), dtype=np.bool_)
            _occluded_many(pcam, prev.camera.width, prev.camera.height, flat, offsets, widths,
                           a.centers, scene.rho, visible, margin, hidden)
            stats.occlusion_culled += int(hidden.sum())
            visible = visible[~hidden]
    else:
        visible = ids
    stats.traced = n - stats.culled

    ntx = (w + TILE - 1) // TILE
    nty = (h + TILE - 1) // TILE
    bin_start, bin_items = _bin(visible, rects, ntx, nty)

    color = np.zeros((h, w, 3))
    depth = np.full((h, w), camera.far)
    hit_id = np.full((h, w), -1, dtype=np.int64)
    steps = np.zeros((h, w), dtype=np.int64)
    light = _unit(cfg.light_dir)
    zenith = np.asarray(cfg.sky_zenith, dtype=np.float64)
    horizon = np.asarray(cfg.sky_horizon, dtype=np.float64)

    def run(tiles):
        _render_tiles(tiles, ntx, w, h, cam, a.centers, a.offsets, a.n_adjacent, a.classes,
                      a.seeds, a.ground_heights, scene.rho, a.albedo, a.material_ids, scene.table,
                      scene.mtable, bin_start, bin_items, rects, scene.step_scale, cfg.hit_eps,
                      cfg.max_steps, light, zenith, horizon, color, depth, hit_id, steps)

    all_tiles = np.arange(ntx * nty, dtype=np.int64)
    if n_threads <= 1:
        run(all_tiles)
    else:
        # small interleaved batches balance dense and empty tiles
        batches = [all_tiles[s:s + 4] for s in range(0, len(all_tiles), 4)]
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(run, batches))

    marched = steps > 0
    stats.rays_marched = int(marched.sum())
    stats.avg_steps = float(steps[marched].mean()) if stats.rays_marched else 0.0
    return FrameBuffers(color, depth, camera, hit_id), stats


def write_ppm(fb: FrameBuffers) -> bytes:
    """Binary P6 encoding of the colour buffer (maxval 255, half-up rounding)."""
    return encode_ppm(fb.color)
