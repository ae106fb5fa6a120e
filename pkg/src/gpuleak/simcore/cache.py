from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POLICIES = {"lru": 0, "random": 1}


def _pow2(x: int) -> bool:
    return x > 0 and not x & (x - 1)


@dataclass(frozen=True)
class CacheConfig:
    line_bytes: int = 128
    num_sets: int = 2048
    ways: int = 16
    policy: str = "lru"

    def __post_init__(self):
        if not _pow2(self.line_bytes) or not _pow2(self.num_sets):
            raise ValueError("line_bytes and num_sets must be powers of two")
        if self.ways < 1:
            raise ValueError("ways must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown replacement policy {self.policy!r}")

    @property
    def size_bytes(self) -> int:
        return self.line_bytes * self.num_sets * self.ways


class CacheState:
    """One GPU's L2: per-set tags plus recency stamps (larger = more recent)."""

    def __init__(self, config: CacheConfig):
        self.config = config
        self.tags = np.full((config.num_sets, config.ways), -1, dtype=np.int64)
        self.stamps = np.zeros((config.num_sets, config.ways), dtype=np.int64)
        self.clock = np.zeros(1, dtype=np.int64)

    def flush(self) -> None:
        self.tags.fill(-1)
        self.stamps.fill(0)

    def set_lines(self, set_id: int) -> list[int]:
        """Tags of one set ordered most-recent first."""
        row, st = self.tags[set_id], self.stamps[set_id]
        order = np.argsort(-st, kind="stable")
        return [int(row[w]) for w in order if row[w] != -1]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tags.copy(), self.stamps.copy()

    def contains(self, line: int) -> bool:
        return bool((self.tags[line % self.config.num_sets] == line).any())


def set_index(offset: int, config: CacheConfig) -> int:
    """Linear physical indexing: line number modulo set count."""
    return (offset // config.line_bytes) % config.num_sets
