"""Two-level grid index (cells, and chunks of cells) with exact same-class k-NN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import PointAmpError
from .ingest import canonical_classes, positions

MAX_NEIGHBOURS = 8


@dataclass(eq=False)
class GridIndex:
    """Points bucketed into cubic cells of edge ``cell_size``.

    A cell coordinate is ``floor((p - origin) / cell_size)``; ``origin`` is
    the componentwise minimum of the points so every coordinate is >= 0.
    Chunks group ``chunk_factor``-cubed blocks of cells.
    """

    cell_size: float
    origin: np.ndarray
    buckets: dict[tuple[int, int, int], list[int]]
    points: list
    chunk_factor: int
    classes: np.ndarray
    # derived flat layout used by the query kernels
    pos: np.ndarray = field(repr=False)
    cells: np.ndarray = field(repr=False)
    dims: np.ndarray = field(repr=False)
    keys: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.points)


def cell_coords(pos: np.ndarray, origin: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor((pos - origin) / cell_size).astype(np.int64)


def estimate_cell_size(pos: np.ndarray, sample: int = 1000) -> float:
    """Twice the median nearest-neighbour spacing over an evenly strided sample."""
    from scipy.spatial import cKDTree

    n = len(pos)
    if n < 2:
        return 1.0
    step = max(1, n // sample)
    probe = pos[::step][:sample]
    dist, _ = cKDTree(pos).query(probe, k=2)
    nn = dist[:, 1]
    nn = nn[nn > 0]
    if len(nn) == 0:
        return 1.0
    return 2.0 * float(np.median(nn))


def build_grid(
    points,
    cell_size: float | None = None,
    chunk_factor: int = 8,
    classes=None,
    scheme: str = "dales",
) -> GridIndex:
    """Bucket ``points`` into a grid.

    ``classes`` holds the canonical class of every point; when omitted they
    come from ``scheme``. ``cell_size=None`` picks the default spacing.
    """
    if len(points) == 0:
        raise PointAmpError("cannot build a grid over an empty point list")
    pos = positions(points)
    if cell_size is None:
        cell_size = estimate_cell_size(pos)
    if not cell_size > 0 or not math.isfinite(cell_size):
        raise PointAmpError(f"cell_size must be positive, got {cell_size}")
    if int(chunk_factor) < 1:
        raise PointAmpError(f"chunk_factor must be >= 1, got {chunk_factor}")
    if classes is None:
        classes = canonical_classes(points, scheme)
    classes = np.asarray(classes, dtype=np.int64)
    if classes.shape != (len(points),):
        raise PointAmpError("classes must hold one entry per point")

    origin = pos.min(axis=0)
    cells = cell_coords(pos, origin, cell_size)
    dims = cells.max(axis=0) + 1
    keys_all = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    # stable sort keeps ascending point index inside each bucket
    order = np.argsort(keys_all, kind="stable")
    sorted_keys = keys_all[order]
    keys, starts = np.unique(sorted_keys, return_index=True)
    starts = np.append(starts, len(order)).astype(np.int64)

    buckets = {}
    for b, key in enumerate(keys):
        members = order[starts[b]:starts[b + 1]]
        c = cells[members[0]]
        buckets[(int(c[0]), int(c[1]), int(c[2]))] = members.tolist()

    return GridIndex(
        cell_size=float(cell_size),
        origin=origin,
        buckets=buckets,
        points=list(points),
        chunk_factor=int(chunk_factor),
        classes=classes,
        pos=pos,
        cells=cells,
        dims=dims.astype(np.int64),
        keys=keys.astype(np.int64),
        starts=starts,
        order=order.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _bucket(keys, starts, key):
    b = np.searchsorted(keys, key)
    if b < keys.shape[0] and keys[b] == key:
        return starts[b], starts[b + 1]
    return 0, 0


@numba.njit(cache=True, nogil=True)
def _scan_cell(pos, classes, order, lo, hi, qx, qy, qz, qcls, exclude, k, rmax,
               best_d, best_i, count):
    for m in range(lo, hi):
        j = order[m]
        if j == exclude or classes[j] != qcls:
            continue
        dx = pos[j, 0] - qx
        dy = pos[j, 1] - qy
        dz = pos[j, 2] - qz
        d = math.sqrt((dx * dx + dy * dy) + dz * dz)
        if d > rmax:
            continue
        if count == k:
            if d > best_d[k - 1] or (d == best_d[k - 1] and j > best_i[k - 1]):
                continue
            slot = k - 1
        else:
            slot = count
            count += 1
        while slot > 0 and (best_d[slot - 1] > d or (best_d[slot - 1] == d and best_i[slot - 1] > j)):
            best_d[slot] = best_d[slot - 1]
            best_i[slot] = best_i[slot - 1]
            slot -= 1
        best_d[slot] = d
        best_i[slot] = j
    return count


@numba.njit(cache=True, nogil=True)
def _knn(pos, classes, cells, dims, keys, starts, order, cell_size,
         qx, qy, qz, qcls, qcell, exclude, k, rmax, best_d, best_i):
    """Expanding-shell search; returns the number of neighbours found."""
    count = 0
    cx, cy, cz = qcell[0], qcell[1], qcell[2]
    max_ring = 0
    for a in range(3):
        lo = -qcell[a]
        hi = dims[a] - 1 - qcell[a]
        max_ring = max(max_ring, abs(lo), abs(hi))
    s = 0
    while s <= max_ring:
        if s > 0:
            # any point in ring s lies at least (s - 1) cells away
            bound = (s - 1) * cell_size * (1.0 - 1e-9)
            if bound > rmax:
                break
            if count == k and bound > best_d[k - 1]:
                break
        for ix in range(cx - s, cx + s + 1):
            if ix < 0 or ix >= dims[0]:
                continue
            for iy in range(cy - s, cy + s + 1):
                if iy < 0 or iy >= dims[1]:
                    continue
                on_face = abs(ix - cx) == s or abs(iy - cy) == s
                step = 1 if on_face else max(2 * s, 1)
                for iz in range(cz - s, cz + s + 1, step):
                    if iz < 0 or iz >= dims[2]:
                        continue
                    key = (ix * dims[1] + iy) * dims[2] + iz
                    lo, hi = _bucket(keys, starts, key)
                    if hi > lo:
                        count = _scan_cell(pos, classes, order, lo, hi, qx, qy, qz, qcls,
                                           exclude, k, rmax, best_d, best_i, count)
        s += 1
    return count


@numba.njit(cache=True, nogil=True)
def _knn_batch(pos, classes, cells, dims, keys, starts, order, cell_size,
               queries, k, rmax, out_i, out_n):
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for qi in range(queries.shape[0]):
        q = queries[qi]
        n = _knn(pos, classes, cells, dims, keys, starts, order, cell_size,
                 pos[q, 0], pos[q, 1], pos[q, 2], classes[q], cells[q], q, k, rmax,
                 best_d, best_i)
        out_n[qi] = n
        for m in range(n):
            out_i[qi, m] = best_i[m]


@numba.njit(cache=True, nogil=True)
def _radius(pos, dims, keys, starts, order, origin, cell_size, qx, qy, qz, r):
    out = []
    lo_c = np.empty(3, dtype=np.int64)
    hi_c = np.empty(3, dtype=np.int64)
    q = (qx, qy, qz)
    for a in range(3):
        lo_c[a] = max(0, int(math.floor((q[a] - r - origin[a]) / cell_size)) - 1)
        hi_c[a] = min(dims[a] - 1, int(math.floor((q[a] + r - origin[a]) / cell_size)) + 1)
    for ix in range(lo_c[0], hi_c[0] + 1):
        for iy in range(lo_c[1], hi_c[1] + 1):
            for iz in range(lo_c[2], hi_c[2] + 1):
                lo, hi = _bucket(keys, starts, (ix * dims[1] + iy) * dims[2] + iz)
                for m in range(lo, hi):
                    j = order[m]
                    dx = pos[j, 0] - qx
                    dy = pos[j, 1] - qy
                    dz = pos[j, 2] - qz
                    if math.sqrt((dx * dx + dy * dy) + dz * dz) <= r:
                        out.append(j)
    return out


# ---------------------------------------------------------------------------
# queries


def _check_k(k, radius_max):
    if not 1 <= k <= MAX_NEIGHBOURS:
        raise PointAmpError(f"k must be in 1..{MAX_NEIGHBOURS}, got {k}")
    if not radius_max > 0:
        raise PointAmpError(f"radius_max must be positive, got {radius_max}")


def knn_same_class(index: GridIndex, query_idx: int, k: int = 8, radius_max: float = 3.0) -> list[int]:
    """Indices of up to ``k`` nearest same-class points, excluding the query.

    Ordered by distance, ties by ascending point index.
    """
    _check_k(k, radius_max)
    if not 0 <= int(query_idx) < len(index):
        raise PointAmpError(f"query index {query_idx} out of range for {len(index)} points")
    idx, n = knn_same_class_batch(index, np.array([query_idx]), k, radius_max)
    return idx[0, :n[0]].tolist()


def knn_same_class_batch(index: GridIndex, queries, k: int = 8, radius_max: float = 3.0,
                         n_jobs: int = 1):
    """Vectorised :func:`knn_same_class`.

    Returns ``(indices, counts)``: an ``(Q, k)`` int array padded with -1
    and the number of valid entries per row. Work is split across
    ``n_jobs`` threads over contiguous query ranges.
    """
    _check_k(k, radius_max)
    queries = np.ascontiguousarray(queries, dtype=np.int64)
    if len(queries) and (queries.min() < 0 or queries.max() >= len(index)):
        raise PointAmpError("query index out of range")
    out_i = np.full((len(queries), k), -1, dtype=np.int64)
    out_n = np.zeros(len(queries), dtype=np.int64)
    args = (index.pos, index.classes, index.cells, index.dims, index.keys, index.starts,
            index.order, index.cell_size)

    def run(lo, hi):
        _knn_batch(*args, queries[lo:hi], k, float(radius_max), out_i[lo:hi], out_n[lo:hi])

    _split(run, len(queries), n_jobs)
    return out_i, out_n


def knn_point(index: GridIndex, p, cls: int, k: int = 8, radius_max: float = 3.0,
              exclude: int = -1) -> list[int]:
    """Same-class k-NN around an arbitrary location ``p`` with class ``cls``."""
    _check_k(k, radius_max)
    q = np.asarray(p, dtype=np.float64)
    qcell = cell_coords(q[None, :], index.origin, index.cell_size)[0]
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    n = _knn(index.pos, index.classes, index.cells, index.dims, index.keys, index.starts,
             index.order, index.cell_size, float(q[0]), float(q[1]), float(q[2]), int(cls),
             qcell, int(exclude), k, float(radius_max), best_d, best_i)
    return best_i[:n].tolist()


def _split(fn, n, n_jobs):
    if n_jobs <= 1 or n < 2 * n_jobs:
        fn(0, n)
        return
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(0, n, n_jobs + 1).astype(int)
    with ThreadPoolExecutor(n_jobs) as pool:
        list(pool.map(lambda b: fn(bounds[b], bounds[b + 1]), range(n_jobs)))


def radius_query(index: GridIndex, p, radius: float) -> list[int]:
    """All point indices within ``radius`` of ``p``, any class, ascending."""
    hits = _radius(index.pos, index.dims, index.keys, index.starts, index.order,
                   index.origin, index.cell_size, float(p[0]), float(p[1]), float(p[2]),
                   float(radius))
    return sorted(hits)


# ---------------------------------------------------------------------------
# chunks


@dataclass(frozen=True)
class Chunk:
    chunk_coord: tuple[int, int, int]
    aabb_min: tuple[float, float, float]
    aabb_max: tuple[float, float, float]
    packet_indices: tuple[int, ...]
    sphere_center: tuple[float, float, float]
    sphere_radius: float


def make_chunk(coord, indices, centers: np.ndarray, radii: np.ndarray) -> Chunk:
    lo = (centers - radii[:, None]).min(axis=0)
    hi = (centers + radii[:, None]).max(axis=0)
    mid = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    return Chunk(
        tuple(int(c) for c in coord),
        tuple(float(v) for v in lo),
        tuple(float(v) for v in hi),
        tuple(int(i) for i in indices),
        tuple(float(v) for v in mid),
        radius,
    )


def chunks(index: GridIndex, packets) -> list[Chunk]:
    """Group packets by ``floor(cell / chunk_factor)``; chunks sorted by coordinate."""
    if len(packets) == 0:
        return []
    if len(packets) != len(index):
        raise PointAmpError("packets and grid index cover different point counts")
    centers = np.array([p.center for p in packets], dtype=np.float64)
    radii = np.array([p.bounding_radius for p in packets], dtype=np.float64)
    return chunks_from_arrays(index.cells // index.chunk_factor, centers, radii)


def chunks_from_arrays(chunk_cells: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> list[Chunk]:
    order = np.lexsort((np.arange(len(chunk_cells)), chunk_cells[:, 2], chunk_cells[:, 1],
                        chunk_cells[:, 0]))
    sorted_cells = chunk_cells[order]
    breaks = np.flatnonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)) + 1
    out = []
    for group in np.split(order, breaks):
        out.append(make_chunk(chunk_cells[group[0]], group, centers[group], radii[group]))
    return out
