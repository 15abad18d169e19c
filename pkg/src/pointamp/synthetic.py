"""Seeded synthetic point clouds standing in for classified aerial tiles.

Class codes follow the DALES labelling (1 ground, 2 vegetation,
7 poles, 8 buildings).
"""

from __future__ import annotations

import math

import numpy as np

from .ingest import RawPoint

GROUND, VEGETATION, POLE, BUILDING = 1, 2, 7, 8


def _terrain(x, y):
    return 0.6 * np.sin(0.05 * x) * np.cos(0.04 * y) + 0.01 * x


def _points(xyz, code):
    return [RawPoint(float(x), float(y), float(z), code) for x, y, z in xyz]


def tree_points(rng, base, height=None, crown=None, spacing=1.0):
    """Trunk and roughly ellipsoidal crown shell sampled at about ``spacing``."""
    height = height if height is not None else rng.uniform(5.0, 9.0)
    crown = crown if crown is not None else rng.uniform(1.8, 3.2)
    bx, by, bz = base
    out = [(bx, by, bz + z) for z in np.arange(1.0, height - crown, spacing)]
    cz = bz + height - crown
    area = 4.0 * math.pi * crown * crown
    count = max(6, int(area / (spacing * spacing)))
    # Fibonacci sphere for even coverage, jittered
    k = np.arange(count) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / count)
    theta = math.pi * (1.0 + 5.0 ** 0.5) * k
    r = crown * rng.uniform(0.85, 1.0, count)
    xs = bx + r * np.sin(phi) * np.cos(theta)
    ys = by + r * np.sin(phi) * np.sin(theta)
    zs = cz + 0.8 * r * np.cos(phi)
    out.extend(zip(xs, ys, zs))
    return out


def synthetic_tile(n_points: int = 100_000, seed: int = 0, spacing: float = 1.0) -> list[RawPoint]:
    """A ground tile with trees and flat-roofed buildings, exactly ``n_points`` long."""
    rng = np.random.default_rng(seed)
    side = int(math.sqrt(0.6 * n_points))
    n_ground = min(side * side, n_points)
    rest = n_points - n_ground
    n_veg = int(round(rest * 0.75))
    n_bld = rest - n_veg
    extent = side * spacing

    gx, gy = np.meshgrid(np.arange(side) * spacing, np.arange(side) * spacing, indexing="ij")
    gx = gx.ravel() + rng.uniform(-0.2, 0.2, gx.size) * spacing
    gy = gy.ravel() + rng.uniform(-0.2, 0.2, gy.size) * spacing
    ground = np.stack([gx, gy, _terrain(gx, gy)], axis=1)[:n_ground]

    veg = []
    while len(veg) < n_veg:
        bx, by = rng.uniform(0, extent, 2)
        veg.extend(tree_points(rng, (bx, by, float(_terrain(bx, by))), spacing=spacing))
    veg = veg[:n_veg]

    bld = []
    while len(bld) < n_bld:
        w, d = rng.uniform(6, 14, 2)
        h = rng.uniform(4, 10)
        x0, y0 = rng.uniform(0, max(extent - 14, 1), 2)
        base = float(_terrain(x0, y0))
        for x in np.arange(x0, x0 + w, spacing):
            for y in np.arange(y0, y0 + d, spacing):
                bld.append((x, y, base + h))
    bld = bld[:n_bld]

    return (_points(ground, GROUND) + _points(veg, VEGETATION) + _points(bld, BUILDING))


def vegetation_cluster(center=(0.0, 0.0, 5.0), spacing: float = 1.0) -> list[RawPoint]:
    """Five vegetation points: a centre and four neighbours at ``spacing`` in a plus shape."""
    cx, cy, cz = center
    offs = [(0, 0, 0), (spacing, 0, 0), (-spacing, 0, 0), (0, 0, spacing), (0, 0, -spacing)]
    return [RawPoint(cx + dx, cy + dy, cz + dz, VEGETATION) for dx, dy, dz in offs]


def wall_scene(seed: int = 0, n_behind: int = 400, spacing: float = 0.5) -> list[RawPoint]:
    """A large building wall in the plane y = 0 with vegetation scattered behind it (y > 0)."""
    rng = np.random.default_rng(seed)
    wall = [(x, 0.0, z) for x in np.arange(-30, 30 + 1e-9, spacing)
            for z in np.arange(-20, 20 + 1e-9, spacing)]
    behind = np.column_stack([rng.uniform(-8, 8, n_behind), rng.uniform(4, 20, n_behind),
                              rng.uniform(-5, 5, n_behind)])
    return _points(wall, BUILDING) + _points(behind, VEGETATION)


def random_scene(seed: int, n_points: int = 300, extent: float = 20.0) -> list[RawPoint]:
    """Small mixed scene: ground patch, a few trees, a pole line and one roof."""
    rng = np.random.default_rng(seed)
    pts = []
    side = max(3, int(math.sqrt(n_points * 0.5)))
    step = extent / side
    for i in range(side):
        for j in range(side):
            x, y = i * step, j * step
            pts.append((x, y, float(_terrain(x, y)), GROUND))
    for _ in range(max(1, n_points // 80)):
        bx, by = rng.uniform(2, extent - 2, 2)
        for x, y, z in tree_points(rng, (bx, by, float(_terrain(bx, by))), height=rng.uniform(4, 6),
                                   crown=rng.uniform(1.2, 2.0)):
            pts.append((x, y, z, VEGETATION))
    px = rng.uniform(0, extent)
    for z in np.arange(0.5, 6.0, 1.0):
        pts.append((px, extent * 0.2, z, POLE))
    x0, y0 = rng.uniform(0, extent * 0.6, 2)
    for x in np.arange(x0, x0 + 4, 1.0):
        for y in np.arange(y0, y0 + 3, 1.0):
            pts.append((x, y, 3.0, BUILDING))
    return [RawPoint(float(x), float(y), float(z), code) for x, y, z, code in pts]
