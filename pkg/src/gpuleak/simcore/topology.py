from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .cache import CacheConfig

DEFAULT_DRAM_BYTES = 16 * 1024**3
DEFAULT_PAGE_BYTES = 64 * 1024

# DGX-1 hybrid cube-mesh: two fully connected quads plus i <-> i+4 bridges.
DGX1_LINKS = (
    [(a, b) for q in (0, 4) for a in range(q, q + 4) for b in range(a + 1, q + 4)]
    + [(i, i + 4) for i in range(4)]
)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class GpuNode:
    id: int
    dram_bytes: int = DEFAULT_DRAM_BYTES
    cache: CacheConfig = field(default_factory=CacheConfig)


@dataclass(frozen=True)
class Topology:
    gpus: tuple[GpuNode, ...]
    links: frozenset[tuple[int, int]]
    page_bytes: int = DEFAULT_PAGE_BYTES

    def gpu(self, gpu_id: int) -> GpuNode:
        for g in self.gpus:
            if g.id == gpu_id:
                return g
        raise TopologyError(f"no GPU with id {gpu_id}")

    def adjacent(self, a: int, b: int) -> bool:
        return (a, b) in self.links

    def degree(self, gpu_id: int) -> int:
        return sum(1 for a, _ in self.links if a == gpu_id)

    @property
    def gpu_ids(self) -> list[int]:
        return [g.id for g in self.gpus]


def build_topology(
    num_gpus: int = 8,
    links: Iterable[tuple[int, int]] | None = None,
    cache: CacheConfig | None = None,
    dram_bytes: int = DEFAULT_DRAM_BYTES,
    page_bytes: int = DEFAULT_PAGE_BYTES,
    gpu_ids: Iterable[int] | None = None,
) -> Topology:
    """Validate a topology description.

    ``links`` must list every connection in both directions; with
    ``links=None`` and 8 GPUs the DGX-1 cube-mesh is used.
    """
    ids = list(gpu_ids) if gpu_ids is not None else list(range(num_gpus))
    if len(ids) < 2:
        raise TopologyError("need at least 2 GPUs")
    if len(set(ids)) != len(ids):
        raise TopologyError(f"duplicate gpu ids in {ids}")
    if page_bytes <= 0 or page_bytes & (page_bytes - 1):
        raise TopologyError("page_bytes must be a power of two")
    if dram_bytes % page_bytes:
        raise TopologyError("dram_bytes must be a multiple of page_bytes")
    cache = cache or CacheConfig()
    if page_bytes % cache.line_bytes:
        raise TopologyError("page_bytes must be a multiple of line_bytes")

    if links is None:
        if sorted(ids) != list(range(8)):
            raise TopologyError("default links are only defined for GPUs 0..7")
        pairs = set(DGX1_LINKS) | {(b, a) for a, b in DGX1_LINKS}
    else:
        pairs = {(int(a), int(b)) for a, b in links}
        for a, b in pairs:
            if a == b:
                raise TopologyError(f"self link ({a},{b})")
            if a not in ids or b not in ids:
                raise TopologyError(f"link ({a},{b}) names an unknown GPU")
            if (b, a) not in pairs:
                raise TopologyError(f"asymmetric link ({a},{b})")
    if not pairs:
        raise TopologyError("need at least one link")

    gpus = tuple(GpuNode(i, dram_bytes, cache) for i in ids)
    return Topology(gpus, frozenset(pairs), page_bytes)


def symmetric(links: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Expand undirected pairs into the symmetric list ``build_topology`` wants."""
    out = []
    for a, b in links:
        out += [(a, b), (b, a)]
    return out
