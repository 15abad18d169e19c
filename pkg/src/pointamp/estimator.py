"""scikit-learn style front end: fit a point cloud, transform points into packet descriptors."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ingest import RawPoint, canonical_classes
from .packets import build_packets, packet_seed
from .sdf import _bounding_radius, template_table
from .spatial import MAX_NEIGHBOURS, build_grid, chunks, knn_point

# center(3), n_adjacent, 8 offsets(24), class, bounding radius
N_DESCRIPTOR = 3 + 1 + 3 * MAX_NEIGHBOURS + 1 + 1


def _as_points(X) -> list[RawPoint]:
    return [RawPoint(float(x), float(y), float(z), int(c)) for x, y, z, c in X]


class PointAmplifier(TransformerMixin, BaseEstimator):
    """Turns a classified cloud into render packets.

    ``X`` is an ``(n, 4)`` array of ``x, y, z, class_code`` rows. ``fit``
    builds the grid index and the packets of the training cloud;
    ``transform`` returns one descriptor row per input point:
    centre, adjacency count, eight zero-padded offsets, canonical class
    and bounding radius. Transforming the training array itself gives the
    fitted packets (a point is never its own neighbour); any other array is
    treated as new query points against the fitted cloud.
    """

    def __init__(self, k=8, radius_max=3.0, cell_size=None, chunk_factor=8, class_map="dales",
                 ground_as="ground", low_veg_as_grass=False, low_veg_height=0.5, global_seed=0,
                 n_jobs=1):
        self.k = k
        self.radius_max = radius_max
        self.cell_size = cell_size
        self.chunk_factor = chunk_factor
        self.class_map = class_map
        self.ground_as = ground_as
        self.low_veg_as_grass = low_veg_as_grass
        self.low_veg_height = low_veg_height
        self.global_seed = global_seed
        self.n_jobs = n_jobs

    def _classes(self, points):
        return canonical_classes(points, self.class_map, self.ground_as, self.low_veg_as_grass,
                                 self.low_veg_height)

    def _check(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 4:
            raise ValueError(f"expected 4 columns (x, y, z, class_code), got {X.shape[1]}")
        codes = X[:, 3]
        if np.any(codes != np.round(codes)) or codes.min() < 0 or codes.max() > 255:
            raise ValueError("class codes must be integers in 0..255")
        return X

    def fit(self, X, y=None):
        X = self._check(X)
        points = _as_points(X)
        self.classes_ = self._classes(points)
        self.index_ = build_grid(points, self.cell_size, self.chunk_factor, classes=self.classes_)
        self.table_ = template_table()
        self.packets_ = build_packets(points, self.index_, None, self.global_seed,
                                      self.radius_max, self.table_, n_jobs=self.n_jobs,
                                      k=self.k)
        self.chunks_ = chunks(self.index_, self.packets_)
        self.cell_size_ = self.index_.cell_size
        self.n_features_in_ = 4
        self._fit_X = X
        return self

    def _descriptor(self, center, offsets, cls, radius):
        row = np.zeros(N_DESCRIPTOR)
        row[0:3] = center
        row[3] = len(offsets)
        if len(offsets):
            row[4:4 + 3 * len(offsets)] = np.asarray(offsets, dtype=np.float64).ravel()
        row[-2] = int(cls)
        row[-1] = radius
        return row

    def transform(self, X):
        check_is_fitted(self, "packets_")
        X = self._check(X)
        if X.shape == self._fit_X.shape and np.array_equal(X, self._fit_X):
            return np.array([self._descriptor(p.center, p.adjacency, p.cls, p.bounding_radius)
                             for p in self.packets_]).reshape(-1, N_DESCRIPTOR)
        points = _as_points(X)
        classes = self._classes(points)
        pos = self.index_.pos
        out = np.zeros((len(X), N_DESCRIPTOR))
        for r in range(len(X)):
            nbr = knn_point(self.index_, X[r, :3], int(classes[r]), self.k, self.radius_max)
            offs = (pos[nbr] - X[r, :3]).astype(np.float32).astype(np.float64)
            radius = _bounding_radius(int(classes[r]), offs.reshape(-1, 3), len(nbr), self.table_)
            out[r] = self._descriptor(X[r, :3], offs, classes[r], radius)
        return out

    def seeds(self, X) -> np.ndarray:
        """Per-row packet seeds under the fitted global seed."""
        X = self._check(X)
        return np.array([packet_seed(self.global_seed, row[:3]) for row in X], dtype=np.uint64)

    def to_scene(self):
        """The fitted packets as a renderable scene."""
        from .render import Scene

        check_is_fitted(self, "packets_")
        return Scene(self.packets_, self.chunks_, templates=self.table_)
