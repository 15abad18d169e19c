"""Command-line front end: ingest, build, render, flythrough, stats."""

from __future__ import annotations

import argparse
import json
import math
import sys
import typing
from collections import Counter
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .config import RenderConfig, dump_config, load_config, parse_value
from .errors import PointAmpError
from .ingest import CanonicalClass, canonical_classes, load_ortho, read_points, write_packed_binary
from .packets import read_packets

# ---------------------------------------------------------------------------
# camera paths


@dataclass(frozen=True)
class Keyframe:
    time: float
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]


@dataclass(frozen=True)
class CameraPath:
    keyframes: tuple[Keyframe, ...]
    frame_rate: float = 24.0

    def __post_init__(self):
        if not self.keyframes:
            raise PointAmpError("camera path needs at least one keyframe")
        if not self.frame_rate > 0:
            raise PointAmpError(f"frame_rate must be positive, got {self.frame_rate}")
        times = [k.time for k in self.keyframes]
        for i in range(1, len(times)):
            if not times[i] > times[i - 1]:
                raise PointAmpError(
                    f"keyframe times must increase strictly (keyframe {i}: {times[i]} after {times[i - 1]})")

    @property
    def duration(self) -> float:
        return self.keyframes[-1].time - self.keyframes[0].time

    def frame_times(self) -> list[float]:
        t0 = self.keyframes[0].time
        n = int(math.floor(self.duration * self.frame_rate + 1e-9)) + 1
        return [t0 + i / self.frame_rate for i in range(n)]

    def pose(self, t: float):
        """Piecewise-linear ``(position, look_at)`` at time ``t``, clamped to the ends."""
        ks = self.keyframes
        if t <= ks[0].time:
            return ks[0].position, ks[0].look_at
        if t >= ks[-1].time:
            return ks[-1].position, ks[-1].look_at
        for a, b in zip(ks, ks[1:]):
            if a.time <= t <= b.time:
                u = (t - a.time) / (b.time - a.time)
                pos = tuple(pa + u * (pb - pa) for pa, pb in zip(a.position, b.position))
                tgt = tuple(pa + u * (pb - pa) for pa, pb in zip(a.look_at, b.look_at))
                return pos, tgt
        raise AssertionError("unreachable")


def _vec3(value, what):
    v = tuple(float(x) for x in value)
    if len(v) != 3:
        raise PointAmpError(f"{what} needs 3 components")
    return v


def parse_camera_path(text: str) -> CameraPath:
    """JSON keyframe array, or an object with ``keyframes`` and ``frame_rate``."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PointAmpError(f"camera path: line {exc.lineno}: {exc.msg}") from None
    frame_rate = 24.0
    if isinstance(data, dict):
        frame_rate = float(data.get("frame_rate", frame_rate))
        data = data.get("keyframes")
    if not isinstance(data, list):
        raise PointAmpError("camera path must be a keyframe array")
    keys = []
    for i, k in enumerate(data):
        try:
            keys.append(Keyframe(float(k["time"]), _vec3(k["position"], "position"),
                                 _vec3(k["look_at"], "look_at")))
        except (KeyError, TypeError, ValueError) as exc:
            raise PointAmpError(f"camera path keyframe {i}: bad or missing field ({exc})") from None
    return CameraPath(tuple(keys), frame_rate)


# ---------------------------------------------------------------------------
# config flags


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_parent() -> argparse.ArgumentParser:
    """Shared options: one flag per config key, plus ``--config`` / ``--dump-config``."""
    parent = argparse.ArgumentParser(add_help=False)
    g = parent.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", metavar="FILE", help="flat key=value config file")
    g.add_argument("--dump-config", action="store_true",
                   help="print the effective config and exit")
    hints = typing.get_type_hints(RenderConfig)
    defaults = RenderConfig()
    for f in fields(RenderConfig):
        kind = hints[f.name]
        default = getattr(defaults, f.name)
        if kind is bool:
            g.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=f"(default: {default})")
        else:
            shown = ",".join(str(v) for v in default) if isinstance(default, tuple) else default
            if f.name == "eye" or f.name == "target":
                shown = "framed automatically"
            g.add_argument(_flag(f.name), dest=f.name, metavar="X,Y,Z" if "tuple" in str(kind) else None,
                           default=argparse.SUPPRESS, help=f"(default: {shown})")
    return parent


def resolve_config(args) -> RenderConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RenderConfig()
    overrides = {}
    for f in fields(RenderConfig):
        if hasattr(args, f.name):
            value = getattr(args, f.name)
            overrides[f.name] = value if isinstance(value, bool) else parse_value(f.name, value)
    if getattr(args, "no_cull", False):
        overrides.update(cull_frustum=False, cull_chunk=False, cull_occlusion=False)
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# helpers


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _write_image(path, fb) -> None:
    from .render import write_ppm

    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        from .ppm import quantize

        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(fb.color)).save(path, format="PNG")
    else:
        _write_bytes(path, write_ppm(fb))


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise PointAmpError(f"missing required argument: {name}")


def _load_scene(path, cfg):
    from .pipeline import load_scene

    return load_scene(path, cfg)


def _camera(scene, cfg, eye=None, target=None):
    from .render import Camera, default_view

    eye = eye if eye is not None else cfg.eye
    target = target if target is not None else cfg.target
    if eye is None or target is None:
        d_eye, d_target = default_view(scene)
        eye = d_eye if eye is None else eye
        target = d_target if target is None else target
    return Camera.from_config(cfg, eye, target)


def _print_histogram(counts: Counter, out) -> None:
    for cls in CanonicalClass:
        if counts.get(int(cls)):
            print(f"  {cls.name.lower()}: {counts[int(cls)]}", file=out)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg: RenderConfig, out=sys.stdout) -> int:
    _require(args, "input", "output")
    points = read_points(args.input, args.format)
    _write_bytes(args.output, write_packed_binary(points))
    classes = canonical_classes(points, cfg.class_map, cfg.ground_as, cfg.low_veg_as_grass,
                                cfg.low_veg_height) if points else []
    print(f"points: {len(points)}", file=out)
    print("classes:", file=out)
    _print_histogram(Counter(int(c) for c in classes), out)
    return 0


def cmd_build(args, cfg: RenderConfig, out=sys.stdout) -> int:
    from .pipeline import build_scene

    _require(args, "cloud", "output")
    points = read_points(args.cloud, args.format)
    ortho = load_ortho(args.ortho) if args.ortho else None
    if not points:
        from .packets import PacketFileHeader, write_packets

        _write_bytes(args.output, write_packets([], [], PacketFileHeader(cfg.global_seed, 0.0,
                                                                         cfg.chunk_factor)))
        print("cell_size: 0\npackets: 0\nchunks: 0\nmean_degree: 0.000", file=out)
        return 0
    built = build_scene(points, cfg, ortho)
    _write_bytes(args.output, built.to_bytes())
    degree = np.mean([len(p.adjacency) for p in built.packets])
    print(f"cell_size: {built.index.cell_size:.6g}", file=out)
    print(f"packets: {len(built.packets)}", file=out)
    print(f"chunks: {len(built.chunks)}", file=out)
    print(f"mean_degree: {degree:.3f}", file=out)
    return 0


def cmd_render(args, cfg: RenderConfig, out=sys.stdout) -> int:
    from .render import render_frame

    _require(args, "packets", "output")
    if args.repeat < 1:
        raise PointAmpError("--repeat must be >= 1")
    scene = _load_scene(args.packets, cfg)
    camera = _camera(scene, cfg)
    prev = None
    for _ in range(args.repeat):
        prev, stats = render_frame(scene, camera, cfg, prev=prev)
    _write_image(args.output, prev)
    if args.stats:
        print(stats.to_line(), file=out)
    return 0


def _frame_path(pattern: str, i: int) -> Path:
    if "{" in pattern:
        return Path(pattern.format(frame=i, i=i))
    if "%" in pattern:
        return Path(pattern % i)
    return Path(pattern) / f"frame_{i:04d}.ppm"


def cmd_flythrough(args, cfg: RenderConfig, out=sys.stdout) -> int:
    from .render import render_frame

    _require(args, "packets", "path", "output")
    path = parse_camera_path(Path(args.path).read_text(encoding="utf-8"))
    scene = _load_scene(args.packets, cfg)
    prev = None
    times = path.frame_times()
    for i, t in enumerate(times):
        eye, target = path.pose(t)
        fb, stats = render_frame(scene, _camera(scene, cfg, eye, target), cfg, prev=prev)
        target_path = _frame_path(args.output, i)
        _write_image(target_path, fb)
        if args.stats:
            print(f"frame={i} {stats.to_line()}", file=out)
        prev = fb
    print(f"frames: {len(times)}", file=out)
    return 0


def packet_stats(packets, chunk_list) -> dict:
    degrees = Counter(len(p.adjacency) for p in packets)
    radii = np.array([p.bounding_radius for p in packets])
    pct = {q: float(np.percentile(radii, q)) for q in (0, 50, 90, 99, 100)} if len(radii) else {}
    return {
        "packets": len(packets),
        "chunks": len(chunk_list),
        "classes": Counter(int(p.cls) for p in packets),
        "degrees": degrees,
        "radius_percentiles": pct,
    }


def cmd_stats(args, cfg: RenderConfig, out=sys.stdout) -> int:
    _require(args, "packets")
    packets, chunk_list, header = read_packets(Path(args.packets).read_bytes())
    s = packet_stats(packets, chunk_list)
    print(f"packets: {s['packets']}", file=out)
    print(f"chunks: {s['chunks']}", file=out)
    print(f"cell_size: {header.cell_size:.6g}", file=out)
    print("classes:", file=out)
    _print_histogram(s["classes"], out)
    print("degrees:", file=out)
    for d in range(9):
        print(f"  {d}: {s['degrees'].get(d, 0)}", file=out)
    print("bounding_radius:", file=out)
    for q, v in s["radius_percentiles"].items():
        print(f"  p{q}: {v:.6g}", file=out)
    return 0


def cmd_gen_synthetic(args, cfg: RenderConfig, out=sys.stdout) -> int:
    from . import synthetic
    from .ingest import write_xyzc

    _require(args, "output")
    if args.kind == "tile":
        points = synthetic.synthetic_tile(args.points, args.seed)
    elif args.kind == "cluster":
        points = synthetic.vegetation_cluster()
    elif args.kind == "wall":
        points = synthetic.wall_scene(args.seed)
    else:
        points = synthetic.random_scene(args.seed, args.points)
    data = write_xyzc(points) if str(args.output).endswith(".xyzc") else write_packed_binary(points)
    _write_bytes(args.output, data)
    print(f"points: {len(points)}", file=out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "build": cmd_build,
    "render": cmd_render,
    "flythrough": cmd_flythrough,
    "stats": cmd_stats,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(
        prog="pointamp",
        description="Amplify classified LiDAR points into SDF render packets and sphere-trace them.",
        epilog="POINTAMP_THREADS overrides the worker count.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[parent], help="convert a point file to .pamp")
    p.add_argument("input", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=("xyzc", "pamp"), help="input format (default: extension)")

    p = sub.add_parser("build", parents=[parent], help="build render packets (.pkt)")
    p.add_argument("cloud", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=("xyzc", "pamp"))
    p.add_argument("--ortho", help="P6 ortho image with a .wld world file beside it")

    p = sub.add_parser("render", parents=[parent], help="render one frame")
    p.add_argument("packets", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--no-cull", action="store_true", help="disable all culling (reference mode)")
    p.add_argument("--stats", action="store_true", help="print culling statistics")
    p.add_argument("--repeat", type=int, default=1,
                   help="render this many frames at the same pose, reprojecting each into the next")

    p = sub.add_parser("flythrough", parents=[parent], help="render a camera path")
    p.add_argument("packets", nargs="?")
    p.add_argument("path", nargs="?", help="JSON keyframes")
    p.add_argument("-o", "--output", help="directory, or pattern with {frame} or %%d")
    p.add_argument("--no-cull", action="store_true")
    p.add_argument("--stats", action="store_true")

    p = sub.add_parser("stats", parents=[parent], help="summarise a .pkt file")
    p.add_argument("packets", nargs="?")

    # hidden: seeded synthetic inputs for tests
    p = sub.add_parser("gen-synthetic", parents=[parent])
    p.add_argument("-o", "--output")
    p.add_argument("--kind", choices=("tile", "cluster", "wall", "random"), default="tile")
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "gen-synthetic"]
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            out.write(dump_config(cfg))
            return 0
        return COMMANDS[args.command](args, cfg, out)
    except (PointAmpError, OSError, ValueError) as exc:
        print(f"pointamp {args.command}: error: {exc}", file=err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
