import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numba
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import capsule_distance
from pointamp.errors import ConfigError
from pointamp.ingest import CanonicalClass
from pointamp.packets import RenderPacket, packet_seed
from pointamp.sdf import (
    DEFAULT_TEMPLATES,
    EMPTY_DISTANCE,
    TemplateParams,
    _fbm,
    bounding_radius,
    compute_ground_heights,
    dump_templates,
    fbm_noise,
    lattice_value,
    packet_sdf,
    parse_templates,
    scene_sdf,
    sd_box_segment,
    sd_capsule,
    sdf_gradient,
    smooth_min,
    step_scale,
    template_table,
)

C = CanonicalClass
finite = st.floats(-10, 10, allow_nan=False)
vec = st.tuples(finite, finite, finite)


def make_packet(center, adjacency=(), cls=C.VEGETATION, table=None, seed=None):
    table = template_table() if table is None else table
    adjacency = tuple(tuple(float(v) for v in o) for o in adjacency)
    r = bounding_radius(cls, adjacency, table)
    return RenderPacket(tuple(float(v) for v in center), adjacency, cls, int(cls), (1.0, 1.0, 1.0),
                        r, packet_seed(0, center) if seed is None else seed)


def quiet_table():
    """Default templates with every noise amplitude set to zero."""
    return template_table({c: replace(t, noise_amplitude=0.0) for c, t in DEFAULT_TEMPLATES.items()})


# -- primitives


@pytest.mark.parametrize("p,want", [((0, 0, 1), -0.5), ((1, 0, 1), 0.5), ((0, 0, 3), 0.5)])
def test_capsule_closed_form(p, want):
    assert abs(sd_capsule(p, (0, 0, 0), (0, 0, 2), 0.5) - want) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(vec, vec, vec, st.floats(0.01, 3))
def test_capsule_matches_projection_oracle(p, a, b, r):
    assert sd_capsule(p, a, b, r) == pytest.approx(capsule_distance(p, a, b, r), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(vec, vec, vec, vec, st.floats(0.01, 3))
def test_capsule_is_1_lipschitz(p, q, a, b, r):
    dp = sd_capsule(p, a, b, r)
    dq = sd_capsule(q, a, b, r)
    assert abs(dp - dq) <= math.dist(p, q) + 1e-9


@settings(max_examples=300, deadline=None)
@given(vec, vec, vec, vec, st.floats(0.01, 3))
def test_box_segment_is_1_lipschitz(p, q, a, b, r):
    assert abs(sd_box_segment(p, a, b, r) - sd_box_segment(q, a, b, r)) <= math.dist(p, q) + 1e-9


def test_box_segment_values():
    a, b = (0, 0, 0), (2, 0, 0)
    assert sd_box_segment((1, 0, 0), a, b, 0.5) == pytest.approx(-0.5)
    assert sd_box_segment((1, 0, 1.5), a, b, 0.5) == pytest.approx(1.0)
    assert sd_box_segment((3.5, 0, 0), a, b, 0.5) == pytest.approx(1.0)
    assert sd_box_segment((3.5, 1.5, 0), a, b, 0.5) == pytest.approx(math.sqrt(2))


def test_smooth_min_cases():
    assert smooth_min(1.0, 3.0, 1.5) == 1.0
    assert smooth_min(3.0, 1.0, 2.0) == 1.0
    assert smooth_min(0.7, 0.7, 0.4) == pytest.approx(0.7 - 0.1)


def test_smooth_min_bounds_10k():
    rng = np.random.default_rng(0)
    for d1, d2, k in zip(rng.normal(0, 2, 10_000), rng.normal(0, 2, 10_000), rng.uniform(0, 2, 10_000)):
        m = min(d1, d2)
        s = smooth_min(d1, d2, k)
        assert m - k / 4 - 1e-12 <= s <= m


@settings(max_examples=300, deadline=None)
@given(finite, finite, st.floats(0, 3), st.floats(0, 2))
def test_smooth_min_commutative_monotone(d1, d2, k, bump):
    assert smooth_min(d1, d2, k) == smooth_min(d2, d1, k)
    assert smooth_min(d1 + bump, d2, k) >= smooth_min(d1, d2, k) - 1e-12
    assert smooth_min(d1, d2 + bump, k) >= smooth_min(d1, d2, k) - 1e-12


# -- noise


def test_fbm_deterministic_across_threads():
    rng = np.random.default_rng(4)
    probes = rng.uniform(-50, 50, (500, 3))

    def run(_):
        return [fbm_noise(1234, p, 1.7, 4) for p in probes]

    with ThreadPoolExecutor(4) as pool:
        results = list(pool.map(run, range(4)))
    assert all(r == results[0] for r in results)


@pytest.mark.parametrize("ijk", [(0, 0, 0), (3, -2, 7), (-100, 5, 1)])
def test_fbm_lattice_endpoints(ijk):
    for seed in (0, 1, 2**63 + 5):
        assert fbm_noise(seed, ijk, 1.0, 1) == lattice_value(seed, 0, *ijk)


def test_fbm_seeds_differ():
    vals = {fbm_noise(s, (0.3, 0.6, 0.9), 1.0, 3) for s in range(20)}
    assert len(vals) == 20


@numba.njit(cache=True)
def _fbm_max(seed, pts, freq, octaves):
    m = 0.0
    for i in range(pts.shape[0]):
        m = max(m, abs(_fbm(seed, pts[i, 0], pts[i, 1], pts[i, 2], freq, octaves)))
    return m


def test_fbm_bounded_on_a_million_samples():
    pts = np.random.default_rng(5).uniform(-1e3, 1e3, (1_000_000, 3))
    for octaves in (1, 3, 6):
        assert _fbm_max(np.uint64(99), pts, 1.3, octaves) <= 1.0


# -- packet templates


def test_isolated_vegetation_is_a_sphere():
    table = quiet_table()
    pk = make_packet((1, 2, 3), table=table)
    for p in [(1, 2, 3), (4, 2, 3), (0, 0, 0)]:
        want = math.dist(p, (1, 2, 3)) - 0.35
        assert packet_sdf(pk, table, p=p).distance == pytest.approx(want, abs=1e-12)


def test_single_adjacency_is_a_half_capsule():
    table = quiet_table()
    pk = make_packet((0, 0, 0), [(2, 0, 0)], table=table)
    rng = np.random.default_rng(0)
    for p in rng.uniform(-3, 3, (200, 3)):
        want = capsule_distance(p, (0, 0, 0), (1, 0, 0), 0.35)
        assert packet_sdf(pk, table, p=p).distance == pytest.approx(want, abs=1e-12)


def test_noise_displacement_bounded_by_amplitude():
    noisy = template_table()
    table = quiet_table()
    rng = np.random.default_rng(1)
    offs = rng.normal(0, 1, (6, 3))
    for cls in (C.VEGETATION, C.GRASS, C.GROUND):
        amp = noisy[cls, 1]
        pk = make_packet((0, 0, 0), offs, cls, noisy)
        for p in rng.uniform(-3, 3, (10_000 // 3, 3)):
            a = packet_sdf(pk, noisy, 0.0, p).distance
            b = packet_sdf(pk, table, 0.0, p).distance
            assert abs(a - b) <= amp + 1e-12


def test_surface_template_is_height_field_near_centre():
    table = quiet_table()
    pk = make_packet((0, 0, 1.0), [(1, 0, 0), (0, 1, 0), (-1, 0, 0), (0, -1, 0)], C.ROAD, table)
    assert packet_sdf(pk, table, 1.0, (0.1, 0.2, 1.3)).distance == pytest.approx(0.3)
    assert packet_sdf(pk, table, 1.0, (0.1, 0.2, 0.8)).distance == pytest.approx(-0.2)


def test_grass_noise_fades_above_taper():
    noisy = template_table()
    quiet = quiet_table()
    pk = make_packet((0, 0, 0), [(1, 0, 0), (0, 1, 0)], C.GRASS, noisy)
    for z in (0.61, 0.7, 0.85):
        p = (0.05, 0.1, z)
        assert packet_sdf(pk, noisy, 0.0, p).distance == packet_sdf(pk, quiet, 0.0, p).distance


def test_unknown_is_a_bump_above_its_centre():
    pk = make_packet((0, 0, 0), (), C.UNKNOWN)
    assert packet_sdf(pk, p=(0, 0, 0.5)).distance == pytest.approx(0.3)
    assert packet_sdf(pk, p=(0, 0, -0.1)).distance == pytest.approx(0.1)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(list(C)), st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_bounding_soundness_property(cls, n, seed):
    rng = np.random.default_rng(seed)
    offs = rng.normal(0, 1.2, (n, 3))
    pk = make_packet(rng.uniform(-5, 5, 3), offs, cls, seed=int(rng.integers(0, 2**63)))
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dist = pk.bounding_radius * (1 + 1e-9) + rng.exponential(0.5, 200)
    gh = float(pk.center[2] + rng.normal(0, 1))
    for p in np.asarray(pk.center) + dirs * dist[:, None]:
        assert packet_sdf(pk, None, gh, p).distance > 0


def test_ground_height_prefers_nearest_surface_in_group():
    centers = np.array([[0, 0, 1.0], [10, 0, 5.0], [1, 0, 3.0], [9, 0, 8.0], [50, 0, 9.0]])
    classes = np.array([C.GROUND, C.ROAD, C.VEGETATION, C.VEGETATION, C.POLE])
    gh = compute_ground_heights(centers, classes, groups=[[0, 1, 2, 3], [4]])
    assert gh.tolist() == [1.0, 5.0, 1.0, 5.0, 1.0]


# -- scene fields


def test_scene_of_one_packet_is_the_packet():
    pk = make_packet((0, 0, 0), [(1, 0, 0), (0, 1, 1)])
    for p in np.random.default_rng(0).uniform(-2, 2, (50, 3)):
        assert scene_sdf([pk], p=p).distance == packet_sdf(pk, p=p).distance


def test_far_packets_combine_by_min():
    a = make_packet((0, 0, 0))
    b = make_packet((20, 0, 0), cls=C.BUILDING)
    for p in [(1, 0, 0), (19, 0, 0), (5, 2, 0), (16, 0, 1)]:
        s = scene_sdf([a, b], p=p)
        da = packet_sdf(a, p=p).distance
        db = packet_sdf(b, p=p).distance
        assert s.distance == min(da, db)
        assert s.material_id == (C.VEGETATION if da < db else C.BUILDING)


def test_empty_scene_sentinel():
    assert scene_sdf([], p=(0, 0, 0)).distance == EMPTY_DISTANCE


def test_scene_gap_bounded_by_quarter_blend():
    rng = np.random.default_rng(8)
    table = template_table()
    kmax = table[:, 5].max()
    for trial in range(30):
        n = int(rng.integers(1, 11))
        pks = [make_packet(rng.uniform(-2, 2, 3), rng.normal(0, 1, (int(rng.integers(0, 9)), 3)),
                           C(int(rng.integers(0, 10)))) for _ in range(n)]
        gh = [0.0] * n
        for p in rng.uniform(-3, 3, (40, 3)):
            s = scene_sdf(pks, table, p, gh).distance
            m = min(packet_sdf(pk, table, 0.0, p).distance for pk in pks)
            assert m - kmax / 4 - 1e-12 <= s <= m


def test_scene_sdf_is_order_independent():
    rng = np.random.default_rng(2)
    pks = [make_packet(rng.uniform(-1, 1, 3), rng.normal(0, 1, (3, 3))) for _ in range(6)]
    for p in rng.uniform(-2, 2, (50, 3)):
        a = scene_sdf(pks, p=p, ground_heights=[0.0] * 6)
        b = scene_sdf(pks[::-1], p=p, ground_heights=[0.0] * 6)
        assert a.distance == b.distance


def test_gradient_of_unit_sphere():
    g = sdf_gradient(lambda q: np.linalg.norm(q) - 1.0, (2, 0, 0))
    assert np.allclose(g, (1, 0, 0), atol=1e-6)


def test_gradient_on_capsule_side():
    g = sdf_gradient(lambda q: sd_capsule(q, (0, 0, 0), (0, 0, 2), 0.5), (0.3, 0.4, 1.0))
    assert np.allclose(g, (0.6, 0.8, 0), atol=1e-5)


def test_gradient_degenerate_falls_back_to_up():
    assert sdf_gradient(lambda q: 1.0, (0, 0, 0)).tolist() == [0.0, 0.0, 1.0]


def test_noisy_march_never_overshoots():
    """Stepping by step_scale * d never jumps across the surface."""
    table = template_table()
    scale = step_scale(table, [C.VEGETATION])
    rng = np.random.default_rng(6)
    pk = make_packet((0, 0, 0), rng.normal(0, 1, (8, 3)), C.VEGETATION, table)
    for _ in range(100):
        o = rng.normal(size=3)
        o = 4.0 * o / np.linalg.norm(o)
        d = -o + rng.normal(0, 0.3, 3)
        d /= np.linalg.norm(d)
        t = 0.0
        for _ in range(200):
            dist = packet_sdf(pk, table, 0.0, o + t * d).distance
            if dist < 1e-3:
                break
            step = scale * dist
            for u in np.linspace(0, step, 12)[1:]:
                assert packet_sdf(pk, table, 0.0, o + (t + u) * d).distance > 0
            t += step


# -- template config


def test_template_validation():
    with pytest.raises(ConfigError):
        TemplateParams(0.0)
    with pytest.raises(ConfigError):
        TemplateParams(1.0, noise_amplitude=-1)
    with pytest.raises(ConfigError):
        TemplateParams(1.0, octaves=0)
    with pytest.raises(ConfigError):
        TemplateParams(1.0, blend_k=-0.1)


def test_template_text_round_trip():
    t = parse_templates("vegetation.noise_amplitude=0.1\npole.capsule_radius = 0.2  # thicker\n")
    assert t[C.VEGETATION].noise_amplitude == 0.1
    assert t[C.POLE].capsule_radius == 0.2
    assert parse_templates(dump_templates(t)) == t
    with pytest.raises(ConfigError, match="line 1"):
        parse_templates("tree.capsule_radius=1")


def test_step_scale_formula():
    table = template_table()
    assert step_scale(table, [C.BUILDING]) == 1.0
    assert step_scale(table, [C.VEGETATION, C.BUILDING]) == pytest.approx(1 / (1 + 0.25 * 2 * 3))
