"""End-to-end helpers wiring ingest, grid, packets and rendering together."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import RenderConfig, resolve_threads
from .ingest import OrthoImage, canonical_classes
from .packets import PacketFileHeader, RenderPacket, build_packets, read_packets, write_packets
from .sdf import parse_templates, template_table
from .spatial import Chunk, GridIndex, build_grid, chunks


@dataclass
class BuiltScene:
    index: GridIndex
    packets: list[RenderPacket]
    chunks: list[Chunk]
    header: PacketFileHeader

    def to_bytes(self) -> bytes:
        return write_packets(self.packets, self.chunks, self.header)


def load_templates(cfg: RenderConfig):
    if not cfg.templates:
        return template_table()
    text = Path(cfg.templates).read_text(encoding="utf-8")
    return template_table(parse_templates(text))


def build_scene(points, cfg: RenderConfig | None = None, ortho: OrthoImage | None = None,
                threads: int | None = None) -> BuiltScene:
    cfg = cfg or RenderConfig()
    classes = canonical_classes(points, cfg.class_map, cfg.ground_as, cfg.low_veg_as_grass,
                                cfg.low_veg_height)
    index = build_grid(points, cfg.cell_size if cfg.cell_size > 0 else None, cfg.chunk_factor,
                       classes=classes)
    n_jobs = resolve_threads(cfg.threads if threads is None else threads)
    packets = build_packets(points, index, ortho, cfg.global_seed, cfg.radius_max,
                            load_templates(cfg), n_jobs=n_jobs)
    header = PacketFileHeader(cfg.global_seed, index.cell_size, index.chunk_factor)
    return BuiltScene(index, packets, chunks(index, packets), header)


def load_scene(path, cfg: RenderConfig | None = None):
    from .render import Scene

    cfg = cfg or RenderConfig()
    packets, chunk_list, _ = read_packets(Path(path).read_bytes())
    return Scene(packets, chunk_list, templates=load_templates(cfg))
