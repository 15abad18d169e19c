import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import brute_knn
from pointamp.estimator import N_DESCRIPTOR, PointAmplifier
from pointamp.ingest import RawPoint
from pointamp.packets import build_packets, packet_seed
from pointamp.spatial import build_grid


def cloud(n, seed, extent=15.0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, extent, (n, 3)), rng.choice([1, 2, 6], n)])


def test_fit_transform_shape_and_matches_build_packets():
    X = cloud(800, 0)
    est = PointAmplifier(global_seed=5)
    D = est.fit_transform(X)
    assert D.shape == (800, N_DESCRIPTOR)
    pts = [RawPoint(*map(float, r[:3]), int(r[3])) for r in X]
    packets = build_packets(pts, build_grid(pts), global_seed=5)
    assert est.packets_ == packets
    for row, p in zip(D, packets):
        n = len(p.adjacency)
        assert row[3] == n and row[-2] == int(p.cls) and row[-1] == p.bounding_radius
        assert np.array_equal(row[4:4 + 3 * n].reshape(-1, 3), np.array(p.adjacency).reshape(-1, 3))
        assert not row[4 + 3 * n:-2].any()


def test_training_points_are_not_their_own_neighbours():
    X = np.array([[0, 0, 0, 2], [1, 0, 0, 2], [2, 0, 0, 2]], dtype=float)
    D = PointAmplifier().fit(X).transform(X)
    assert D[:, 3].tolist() == [2, 2, 2]
    assert not np.any(np.all(D[:, 4:10].reshape(3, 2, 3) == 0, axis=2))


def test_new_points_match_brute_force():
    X = cloud(600, 1)
    est = PointAmplifier(radius_max=4.0).fit(X)
    Q = cloud(50, 2)
    D = est.transform(Q)
    pos = np.vstack([est.index_.pos, Q[:, :3]])
    cls = np.concatenate([est.classes_, np.asarray(est._classes(
        [RawPoint(*map(float, r[:3]), int(r[3])) for r in Q]))])
    for r in range(len(Q)):
        q = len(X) + r
        # the oracle sees only the training cloud plus this one query point
        keep = np.r_[np.arange(len(X)), q]
        want = brute_knn(pos[keep], cls[keep], len(X), 8, 4.0)
        offs = (pos[want] - Q[r, :3]).astype(np.float32)
        assert D[r, 3] == len(want)
        assert np.array_equal(D[r, 4:4 + 3 * len(want)], offs.ravel().astype(float))


def test_k_parameter_limits_degree():
    X = cloud(500, 3, extent=5.0)
    D = PointAmplifier(k=3).fit_transform(X)
    assert D[:, 3].max() == 3
    assert not D[:, 4 + 9:-2].any()


def test_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        PointAmplifier().transform(cloud(3, 0))
    with pytest.raises(ValueError):
        PointAmplifier().fit(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        PointAmplifier().fit(np.array([[0, 0, 0, 1.5]]))
    with pytest.raises(ValueError):
        PointAmplifier().fit(np.array([[0, 0, 0, 300]]))


def test_clone_and_params():
    est = PointAmplifier(k=4, global_seed=3, ground_as="road")
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "packets_")
    twin.set_params(k=6)
    assert twin.k == 6


def test_seeds_and_scene():
    X = cloud(100, 4)
    est = PointAmplifier(global_seed=11).fit(X)
    assert est.seeds(X)[7] == packet_seed(11, X[7, :3])
    assert [p.seed for p in est.packets_] == est.seeds(X).tolist()
    scene = est.to_scene()
    assert len(scene.packets) == 100
