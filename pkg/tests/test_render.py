import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import ray_sphere
from pointamp.config import RenderConfig
from pointamp.errors import PointAmpError
from pointamp.ingest import CanonicalClass
from pointamp.packets import RenderPacket, material_table
from pointamp.pipeline import build_scene
from pointamp.ppm import decode_ppm, encode_ppm
from pointamp.render import (
    Camera,
    CullStats,
    FrameBuffers,
    Scene,
    build_hiz,
    cull_chunk,
    march_ray,
    occlusion_test,
    project_quad,
    render_frame,
    shade,
    trace_pixel,
    write_ppm,
)
from pointamp.sdf import DEFAULT_TEMPLATES, SdfSample, TemplateParams, scene_sdf, template_table
from pointamp.spatial import make_chunk
from pointamp.synthetic import random_scene, wall_scene

C = CanonicalClass
SMALL = RenderConfig(width=96, height=54, threads=1)


def scene_from(points, cfg=SMALL):
    built = build_scene(points, cfg)
    return Scene(built.packets, built.chunks)


def sphere_packet(center=(0.0, 0.0, 0.0), radius=1.0, cls=C.VEGETATION):
    return RenderPacket(tuple(map(float, center)), (), cls, int(cls), (1.0, 1.0, 1.0), radius, 1)


def sphere_table(radius=1.0):
    t = dict(DEFAULT_TEMPLATES)
    t[C.VEGETATION] = TemplateParams(radius, 0.0, 1.0, 1, 0.0, 0.5)
    return template_table(t)


# -- camera


def test_camera_validation():
    with pytest.raises(PointAmpError):
        Camera.look_at((0, 0, 0), (1, 0, 0), near=5.0, far=1.0)
    with pytest.raises(PointAmpError):
        Camera.look_at((0, 0, 0), (0, 0, 0))
    with pytest.raises(PointAmpError):
        Camera((0, 0, 0), (1, 0, 0), (1, 0, 0), (0, 0, 1), 1.0, 0.1, 10.0, 4, 4)
    cam = Camera.look_at((0, 0, 0), (0, 0, 10))  # straight up still gets a basis
    basis = np.array([cam.right, cam.up, cam.forward])
    assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-12)


# -- projection


def test_project_on_axis_is_centred():
    cam = Camera.look_at((0, 0, 0), (10, 0, 0), width=101, height=61)
    q = project_quad(cam, (10, 0, 0), 0.2)
    assert (q.x0 + q.x1) / 2 == pytest.approx(50, abs=0.5)
    assert (q.y0 + q.y1) / 2 == pytest.approx(30, abs=0.5)
    assert q.depth_min == pytest.approx(9.8) and q.depth_max == pytest.approx(10.2)


def test_project_behind_camera_is_absent():
    cam = Camera.look_at((0, 0, 0), (10, 0, 0))
    assert project_quad(cam, (-10, 0, 0), 1.0) is None


def test_projection_covers_every_intersecting_pixel():
    rng = np.random.default_rng(0)
    cam = Camera.look_at((0, 0, 0), (1, 0.2, 0.1), vertical_fov=math.radians(60), width=48,
                         height=32)
    dirs = np.array([[cam.ray(i, j) for i in range(cam.width)] for j in range(cam.height)])
    flat = dirs.reshape(-1, 3)
    for _ in range(1000):
        c = rng.normal(0, 6, 3) + np.array(cam.forward) * rng.uniform(-2, 15)
        r = rng.uniform(0.05, 3.0)
        oc = -c
        b = flat @ oc
        disc = b * b - (oc @ oc - r * r)
        t_far = -b + np.sqrt(np.maximum(disc, 0))
        t_near = -b - np.sqrt(np.maximum(disc, 0))
        cos = flat @ np.array(cam.forward)
        # the pixel sees the sphere somewhere in [near, far] (distances along the ray)
        hit = (disc >= 0) & (t_far * cos >= cam.near) & (t_near * cos <= cam.far)
        q = project_quad(cam, c, r)
        if q is None:
            assert not hit.any()
            continue
        jj, ii = np.divmod(np.flatnonzero(hit), cam.width)
        assert np.all((ii >= q.x0) & (ii <= q.x1) & (jj >= q.y0) & (jj <= q.y1))


# -- chunk and occlusion culling


def _chunk(center, radius):
    return make_chunk((0, 0, 0), [0], np.array([center], float), np.array([radius]))


def test_chunk_behind_camera_is_frustum_culled():
    cam = Camera.look_at((0, 0, 0), (10, 0, 0))
    assert cull_chunk(cam, _chunk((-20, 0, 0), 2.0)) == (False, "frustum")


def test_chunk_containing_camera_is_kept():
    cam = Camera.look_at((0, 0, 0), (10, 0, 0))
    assert cull_chunk(cam, _chunk((0.5, 0, 0), 3.0)) == (True, None)


def _wall_frame(depth=5.0):
    cam = Camera.look_at((0, 0, 0), (10, 0, 0), width=64, height=36)
    fb = FrameBuffers.blank(cam)
    fb.depth[:] = depth
    return cam, fb


def test_sphere_behind_full_wall_is_occluded():
    _, fb = _wall_frame()
    assert occlusion_test(fb, (10, 0, 0), 0.5)
    assert not occlusion_test(fb, (4, 0, 0), 0.5)


def test_sphere_partly_outside_previous_view_is_visible():
    cam, fb = _wall_frame()
    # sits on the left border of the view at depth 10
    edge = 10 * math.tan(0.5 * cam.vertical_fov) * cam.width / cam.height
    assert not occlusion_test(fb, (10, edge, 0), 0.5)
    assert not occlusion_test(fb, (10, 0, 0), 15.0)  # crosses the near plane


def test_hiz_is_a_max_pyramid():
    d = np.random.default_rng(1).random((9, 13))
    levels = build_hiz(d)
    assert [lv.shape for lv in levels] == [(9, 13), (5, 7), (3, 4), (2, 2), (1, 1)]
    assert levels[-1][0, 0] == d.max()
    assert levels[1][4, 6] == d[8, 12]


def test_occlusion_culled_packets_never_contribute():
    pts = wall_scene(seed=2, n_behind=150, spacing=1.0)
    scene = scene_from(pts)
    cam = Camera.look_at((0, -15, 0), (0, 10, 0), width=96, height=54)
    ref, _ = render_frame(scene, cam, SMALL.without_culling())
    visible_ids = set(np.unique(ref.packet_ids[ref.packet_ids >= 0]).tolist())
    culled = [i for i in range(len(scene))
              if occlusion_test(ref, scene.arrays.centers[i], scene.rho[i], 2 * SMALL.hit_eps)]
    assert culled
    assert not visible_ids & set(culled)


# -- tracing


def test_trace_unit_sphere_analytic():
    hit = trace_pixel((0, 0, -5), (0, 0, 1), [sphere_packet()], sphere_table())
    assert hit is not None
    assert hit.t == pytest.approx(4.0, abs=1e-3)
    assert np.allclose(hit.normal, (0, 0, -1), atol=1e-3)


def test_missing_ray_does_no_work():
    t, idx, steps = march_ray((0, 0, -5), (1, 0, 0), [sphere_packet()], sphere_table())
    assert t is None and idx == -1 and steps == 0
    assert trace_pixel((0, 0, -5), (1, 0, 0), [sphere_packet()], sphere_table()) is None


def test_nearest_of_overlapping_packets_wins():
    pks = [sphere_packet((0, 0, 3)), sphere_packet((0, 0.2, 1.5))]
    table = sphere_table()
    both = trace_pixel((0, 0, -5), (0, 0, 1), pks, table)
    single = [trace_pixel((0, 0, -5), (0, 0, 1), [p], table) for p in pks]
    assert both.t == pytest.approx(min(h.t for h in single), abs=2e-3)
    assert both.packet == 1


# -- shading


def _mats(diffuse=(1.0, 1.0, 1.0), spec=0.0, rough=0.5):
    m = material_table()
    m[C.VEGETATION] = (*diffuse, spec, rough)
    return m


def test_grazing_light_without_specular_is_black():
    s = SdfSample(0.0, int(C.VEGETATION), (1.0, 1.0, 1.0))
    assert shade(s, (0, 0, 1), (0, 0, -1), (1, 0, 0), _mats()) == (0.0, 0.0, 0.0)


def test_head_on_white_is_white():
    s = SdfSample(0.0, int(C.VEGETATION), (1.0, 1.0, 1.0))
    assert shade(s, (0, 0, 1), (0, 0, -1), (0, 0, 1), _mats()) == pytest.approx((1.0, 1.0, 1.0))


def test_shade_output_is_clamped():
    rng = np.random.default_rng(3)
    m = material_table()
    for _ in range(10_000):
        n, v, lt = (x / np.linalg.norm(x) for x in rng.normal(size=(3, 3)))
        s = SdfSample(0.0, int(rng.integers(0, 10)), tuple(rng.random(3)))
        out = shade(s, n, v, lt, m)
        assert all(0.0 <= c <= 1.0 for c in out)


# -- frames


def test_empty_scene_is_background_only():
    cam = Camera.look_at((0, 0, 0), (1, 0, 0), width=32, height=18)
    fb, stats = render_frame(Scene([]), cam, SMALL)
    assert np.all(fb.depth == cam.far)
    assert np.all(fb.packet_ids == -1)
    # sky gradient by ray elevation
    zen, hor = np.array(SMALL.sky_zenith), np.array(SMALL.sky_horizon)
    for j in range(cam.height):
        for i in range(cam.width):
            e = min(1.0, max(0.0, cam.ray(i, j)[2]))
            assert np.allclose(fb.color[j, i], hor + (zen - hor) * e, atol=1e-12)
    assert stats == CullStats(total=0)


def test_scene_behind_camera_matches_empty():
    scene = scene_from(random_scene(1, 200))
    cam = Camera.look_at((0, 0, 50), (-10, -10, 60), width=32, height=18)
    empty, _ = render_frame(Scene([]), cam, SMALL)
    fb, stats = render_frame(scene, cam, replace(SMALL, cull_chunk=False))
    assert np.array_equal(fb.color, empty.color)
    assert stats.frustum_culled == stats.total and stats.traced == 0
    _, stats = render_frame(scene, cam, SMALL)
    assert stats.frustum_culled + stats.chunk_culled == stats.total


@pytest.mark.parametrize("seed", [0, 1])
def test_second_frame_with_culling_matches_reference(seed):
    scene = scene_from(random_scene(seed, 300))
    cam = Camera.look_at((-8, -8, 9), (10, 10, 0), width=96, height=54)
    ref, _ = render_frame(scene, cam, SMALL.without_culling())
    first, s1 = render_frame(scene, cam, SMALL)
    second, s2 = render_frame(scene, cam, SMALL, prev=first)
    assert write_ppm(second) == write_ppm(ref) == write_ppm(first)
    assert np.array_equal(second.depth, ref.depth)
    for s in (s1, s2):
        assert s.culled + s.traced == s.total


def test_render_is_thread_invariant():
    scene = scene_from(random_scene(3, 300))
    cam = Camera.look_at((-8, -8, 9), (10, 10, 0), width=96, height=54)
    outs = [render_frame(scene, cam, SMALL, threads=t)[0] for t in (1, 2, 8)]
    assert all(np.array_equal(o.color, outs[0].color) for o in outs)
    assert all(np.array_equal(o.depth, outs[0].depth) for o in outs)


def test_depth_points_lie_on_the_surface():
    scene = scene_from(random_scene(4, 300))
    cam = Camera.look_at((-8, -8, 9), (10, 10, 0), width=64, height=36)
    fb, _ = render_frame(scene, cam, SMALL)
    a = scene.arrays
    fwd = np.array(cam.forward)
    jj, ii = np.nonzero(fb.packet_ids >= 0)
    assert len(jj) > 100
    for j, i in zip(jj, ii):
        d = cam.ray(i, j)
        p = np.array(cam.position) + fb.depth[j, i] / (d @ fwd) * d
        assert abs(scene_sdf(a, scene.table, p).distance) <= 2 * SMALL.hit_eps


def test_depth_within_near_far():
    scene = scene_from(random_scene(5, 300))
    cam = Camera.look_at((-8, -8, 9), (10, 10, 0), width=48, height=27)
    fb, _ = render_frame(scene, cam, SMALL)
    assert np.all((fb.depth >= cam.near) & (fb.depth <= cam.far))


def test_no_false_misses_on_sphere_scene():
    rng = np.random.default_rng(7)
    table = sphere_table(0.8)
    centers = rng.uniform(-4, 4, (6, 3))
    pks = [sphere_packet(c, 0.8) for c in centers]
    scene = Scene(pks, templates=table)
    for _ in range(300):
        o = rng.normal(size=3)
        o = 12 * o / np.linalg.norm(o)
        target = centers[rng.integers(0, 6)] + rng.normal(0, 0.5, 3)
        d = (target - o) / np.linalg.norm(target - o)
        want = [ray_sphere(o, d, c, 0.8) for c in centers]
        want = [t for t in want if t is not None]
        t, _, _ = march_ray(o, d, scene)
        if want:
            assert t is not None
            assert t <= min(want) + 2e-3
        if t is not None:
            # the blend only bulges outwards, by at most k/4 in distance
            p = o + t * d
            nearest = min(np.linalg.norm(p - c) - 0.8 for c in centers)
            assert -2e-3 <= nearest <= 0.5 / 4 + 2e-3


# -- ppm


def test_ppm_one_white_pixel():
    cam = Camera.look_at((0, 0, 0), (1, 0, 0), width=1, height=1)
    fb = FrameBuffers(np.ones((1, 1, 3)), np.ones((1, 1)), cam, np.zeros((1, 1), dtype=np.int64))
    blob = write_ppm(fb)
    assert blob == b"P6\n1 1\n255\n\xff\xff\xff"
    assert len(blob) == 14


def test_ppm_golden_2x2():
    img = np.array([[[1, 0, 0], [0, 1, 0]], [[0, 0, 1], [0.5, 0.25, 0.002]]])
    assert encode_ppm(img) == (b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255,
                                                           128, 64, 1]))


def test_ppm_round_trip_through_reader():
    rng = np.random.default_rng(0)
    img = rng.random((7, 5, 3))
    q = decode_ppm(encode_ppm(img))
    assert np.array_equal(q, np.floor(img * 255 + 0.5).astype(np.uint8))
    assert encode_ppm(q) == encode_ppm(img)
