from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from .cache import POLICIES, CacheState
from .latency import AccessClass, LatencyModel
from .topology import Topology, build_topology

VADDR_BASE = 1 << 40


class SimError(Exception):
    pass


class OutOfMemory(SimError, MemoryError):
    pass


class NoNvlinkPath(SimError):
    pass


class PermissionViolation(SimError, PermissionError):
    pass


class UnmappedAddress(SimError, LookupError):
    pass


@dataclass(frozen=True)
class PhysicalAddress:
    gpu: int
    offset: int


@dataclass
class Allocation:
    handle: int
    owner_gpu: int
    base_vaddr: int
    length: int
    page_map: np.ndarray  # frame number per page
    page_bytes: int
    process_id: int

    @property
    def end_vaddr(self) -> int:
        return self.base_vaddr + self.length

    @property
    def num_pages(self) -> int:
        return len(self.page_map)

    def vaddr(self, offset: int) -> int:
        return self.base_vaddr + offset


@dataclass(frozen=True)
class TimingSample:
    vaddr: int
    observed_cycles: int
    timestamp_cycles: int
    true_class: AccessClass  # oracle-only


@dataclass
class SampleBatch:
    vaddrs: np.ndarray
    cycles: np.ndarray
    timestamps: np.ndarray
    true_class: np.ndarray  # oracle-only

    def __len__(self):
        return len(self.cycles)


@dataclass
class _Segment:
    gpu: int
    remote: bool
    lines: np.ndarray
    vaddrs: np.ndarray


@dataclass
class Chain:
    """A translated, permission-checked pointer chase ready to replay."""

    segments: list[_Segment]
    length: int


class TraceLog:
    """Every TimingSample of a run, tagged with the issuing agent, in issue order."""

    FIELDS = ("agent_id", "timestamp", "vaddr", "cycles", "true_class", "gpu")

    def __init__(self):
        self._chunks: dict[str, list[np.ndarray]] = {f: [] for f in self.FIELDS}
        self._cache: dict[str, np.ndarray] | None = None

    def record(self, agent_id, timestamps, vaddrs, cycles, classes, gpu):
        n = len(cycles)
        c = self._chunks
        c["agent_id"].append(np.full(n, agent_id, dtype=np.int64))
        c["timestamp"].append(np.asarray(timestamps, dtype=np.int64))
        c["vaddr"].append(np.asarray(vaddrs, dtype=np.int64))
        c["cycles"].append(np.array(cycles, dtype=np.int64))
        c["true_class"].append(np.array(classes, dtype=np.int8))
        c["gpu"].append(np.full(n, gpu, dtype=np.int64))
        self._cache = None

    def column(self, name: str) -> np.ndarray:
        if self._cache is None:
            self._cache = {
                f: (np.concatenate(v) if v else np.zeros(0, dtype=np.int64))
                for f, v in self._chunks.items()
            }
        return self._cache[name]

    def __len__(self):
        return len(self.column("cycles"))

    def for_agent(self, agent_id: int) -> dict[str, np.ndarray]:
        mask = self.column("agent_id") == agent_id
        return {f: self.column(f)[mask] for f in self.FIELDS}

    def __eq__(self, other):
        if not isinstance(other, TraceLog):
            return NotImplemented
        return all(np.array_equal(self.column(f), other.column(f)) for f in self.FIELDS)

    def to_csv(self, fh=None) -> str | None:
        """Write ``agent_id,timestamp,vaddr,cycles``; returns text if no handle given."""
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["agent_id", "timestamp", "vaddr", "cycles"])
        cols = [self.column(f) for f in ("agent_id", "timestamp", "vaddr", "cycles")]
        for row in zip(*(c.tolist() for c in cols)):
            w.writerow(row)
        return out.getvalue() if fh is None else None


class Simulator:
    """Ground truth for one multi-GPU node instance.

    ``seed`` fixes physical page placement; ``noise_seed`` (defaults to
    ``seed``) fixes latency noise and random replacement. Keeping ``seed``
    and the allocation sequence fixed reproduces identical frames, so
    eviction sets stay valid across instances.
    """

    def __init__(self, topology: Topology | None = None, latency: LatencyModel | None = None,
                 seed: int = 0, noise_seed: int | None = None, quantum_cycles: int = 2000):
        self.topology = topology or build_topology()
        self.latency = latency or LatencyModel()
        self.seed = seed
        self.noise_seed = seed if noise_seed is None else noise_seed
        self.quantum_cycles = quantum_cycles
        self.caches = {g.id: CacheState(g.cache) for g in self.topology.gpus}
        self.page_bytes = self.topology.page_bytes
        self._frame_rng = {g.id: np.random.default_rng([seed, g.id]) for g in self.topology.gpus}
        self._used = {g.id: set() for g in self.topology.gpus}
        self._allocs: list[Allocation] = []
        self._bases: list[int] = []
        self._next_vaddr = VADDR_BASE
        self._next_agent = 0
        self._next_process = 0
        self.active_probed_sets = 1
        self.trace: TraceLog | None = None
        self._repl_state = np.random.SeedSequence([self.noise_seed, 0xC0FFEE]).generate_state(1, np.uint64)
        self._means = self.latency.mean_array()
        self._sigmas = self.latency.sigma_array()

    # sessions -----------------------------------------------------------
    def new_session(self, home_gpu: int, start_cycle: int = 0) -> "AgentSession":
        self.topology.gpu(home_gpu)
        pid = self._next_process
        self._next_process += 1
        return self._make_session(home_gpu, pid, set(), start_cycle)

    def _make_session(self, home_gpu, pid, grants, start_cycle):
        aid = self._next_agent
        self._next_agent += 1
        state = np.random.SeedSequence([self.noise_seed, aid, 0x5EED]).generate_state(1, np.uint64)
        return AgentSession(self, aid, home_gpu, pid, grants, start_cycle, state)

    # memory -------------------------------------------------------------
    def _draw_frames(self, gpu: int, count: int) -> np.ndarray:
        node = self.topology.gpu(gpu)
        total = node.dram_bytes // self.page_bytes
        used = self._used[gpu]
        if count > total - len(used):
            raise OutOfMemory(f"GPU {gpu}: need {count} pages, {total - len(used)} free")
        rng = self._frame_rng[gpu]
        frames: list[int] = []
        taken = set()
        if count * 2 > total - len(used):
            free = np.array(sorted(set(range(total)) - used), dtype=np.int64)
            frames = rng.permutation(free)[:count].tolist()
        else:
            while len(frames) < count:
                for f in rng.integers(0, total, size=2 * (count - len(frames)) + 8).tolist():
                    if f not in used and f not in taken:
                        taken.add(f)
                        frames.append(f)
                        if len(frames) == count:
                            break
        used.update(frames)
        return np.array(frames, dtype=np.int64)

    def _allocate(self, session: "AgentSession", owner_gpu: int, length: int) -> Allocation:
        if length <= 0:
            raise ValueError("length must be positive")
        pb = self.page_bytes
        npages = -(-length // pb)
        frames = self._draw_frames(owner_gpu, npages)
        alloc = Allocation(len(self._allocs), owner_gpu, self._next_vaddr, length, frames, pb,
                           session.process_id)
        # one unmapped guard page between allocations
        self._next_vaddr += (npages + 1) * pb
        self._allocs.append(alloc)
        self._bases.append(alloc.base_vaddr)
        return alloc

    def find_allocation(self, vaddr: int) -> Allocation:
        i = bisect.bisect_right(self._bases, vaddr) - 1
        if i < 0 or vaddr >= self._allocs[i].end_vaddr:
            raise UnmappedAddress(f"unmapped address {vaddr:#x}")
        return self._allocs[i]

    @property
    def allocations(self) -> list[Allocation]:
        return list(self._allocs)

    def flush_caches(self) -> None:
        for c in self.caches.values():
            c.flush()

    # oracle -------------------------------------------------------------
    def oracle_translate(self, alloc: Allocation, offset: int) -> PhysicalAddress:
        if not 0 <= offset < alloc.length:
            raise UnmappedAddress(f"offset {offset} outside allocation of {alloc.length} bytes")
        page, within = divmod(offset, alloc.page_bytes)
        return PhysicalAddress(alloc.owner_gpu, int(alloc.page_map[page]) * alloc.page_bytes + within)

    def oracle_set(self, vaddr: int) -> tuple[int, int]:
        """(gpu, set id) a virtual address maps to."""
        alloc = self.find_allocation(vaddr)
        pa = self.oracle_translate(alloc, vaddr - alloc.base_vaddr)
        cfg = self.caches[pa.gpu].config
        return pa.gpu, (pa.offset // cfg.line_bytes) % cfg.num_sets

    def oracle_lines_in_set(self, alloc: Allocation, set_id: int, count: int | None = None) -> list[int]:
        """Line-aligned vaddrs of ``alloc`` that land in physical set ``set_id``."""
        cfg = self.caches[alloc.owner_gpu].config
        offs = np.arange(0, alloc.length, cfg.line_bytes, dtype=np.int64)
        lines = self._lines(alloc, offs)
        hits = offs[lines % cfg.num_sets == set_id] + alloc.base_vaddr
        out = hits.tolist()
        return out if count is None else out[:count]

    def _lines(self, alloc: Allocation, offsets: np.ndarray) -> np.ndarray:
        cfg = self.caches[alloc.owner_gpu].config
        pages = offsets // alloc.page_bytes
        phys = alloc.page_map[pages] * alloc.page_bytes + offsets % alloc.page_bytes
        return phys // cfg.line_bytes

    # access -------------------------------------------------------------
    def _translate(self, session: "AgentSession", vaddrs: np.ndarray) -> Chain:
        vaddrs = np.asarray(vaddrs, dtype=np.int64)
        if vaddrs.ndim != 1:
            vaddrs = vaddrs.ravel()
        segments: list[_Segment] = []
        if len(vaddrs) == 0:
            return Chain(segments, 0)
        idx = np.searchsorted(self._bases, vaddrs, side="right") - 1
        if (idx < 0).any():
            raise UnmappedAddress(f"unmapped address {int(vaddrs[idx < 0][0]):#x}")
        # split at allocation changes
        cuts = np.flatnonzero(np.diff(idx)) + 1
        starts = [0] + cuts.tolist()
        ends = cuts.tolist() + [len(vaddrs)]
        for s, e in zip(starts, ends):
            alloc = self._allocs[int(idx[s])]
            va = vaddrs[s:e]
            off = va - alloc.base_vaddr
            if (off >= alloc.length).any():
                raise UnmappedAddress(f"unmapped address {int(va[off >= alloc.length][0]):#x}")
            session._check(alloc)
            lines = self._lines(alloc, off)
            remote = alloc.owner_gpu != session.home_gpu
            if segments and segments[-1].gpu == alloc.owner_gpu:
                prev = segments[-1]
                segments[-1] = _Segment(prev.gpu, prev.remote, np.concatenate([prev.lines, lines]),
                                        np.concatenate([prev.vaddrs, va]))
            else:
                segments.append(_Segment(alloc.owner_gpu, remote, np.ascontiguousarray(lines), va))
        return Chain(segments, len(vaddrs))

    def _run(self, session: "AgentSession", chain: Chain, want_classes: bool):
        extra = self.latency.extra_sigma(self.active_probed_sets)
        outs, classes = [], []
        trace = self.trace
        for seg in chain.segments:
            n = len(seg.lines)
            cyc = np.empty(n, dtype=np.int64)
            cls = np.empty(n, dtype=np.int8)
            cache = self.caches[seg.gpu]
            start = session.cycles
            total = _kernels.chase(
                cache.tags, cache.stamps, cache.clock, seg.lines, cache.config.num_sets,
                POLICIES[cache.config.policy], self._repl_state, seg.remote, self._means,
                self._sigmas, extra, session._rng, cyc, cls,
            )
            session.cycles = start + int(total)
            if trace is not None:
                ts = start + np.concatenate(([0], np.cumsum(cyc[:-1])))
                trace.record(session.agent_id, ts, seg.vaddrs, cyc, cls, seg.gpu)
            outs.append(cyc)
            classes.append(cls)
        if len(outs) == 1:
            return outs[0], classes[0]
        if not outs:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8)
        return np.concatenate(outs), np.concatenate(classes)


@dataclass(eq=False)
class AgentSession:
    """An attacker- or victim-facing execution context (one thread block).

    Sessions spawned from the same process share allocations and peer
    grants but keep their own cycle counter and noise stream.
    """

    sim: Simulator
    agent_id: int
    home_gpu: int
    process_id: int
    grants: set = field(default_factory=set)
    cycles: int = 0
    _rng: np.ndarray = field(default=None, repr=False)

    def spawn(self) -> "AgentSession":
        return self.sim._make_session(self.home_gpu, self.process_id, self.grants, self.cycles)

    def enable_peer_access(self, remote_gpu: int) -> None:
        if remote_gpu == self.home_gpu:
            raise NoNvlinkPath(f"GPU {remote_gpu} cannot peer with itself")
        self.sim.topology.gpu(remote_gpu)
        if not self.sim.topology.adjacent(self.home_gpu, remote_gpu):
            raise NoNvlinkPath(f"no single-hop NVLink between GPU {self.home_gpu} and {remote_gpu}")
        self.grants.add(remote_gpu)

    def can_reach(self, gpu: int) -> bool:
        return gpu == self.home_gpu or gpu in self.grants

    def _check(self, alloc: Allocation) -> None:
        if alloc.process_id != self.process_id:
            raise PermissionViolation(f"allocation {alloc.handle} belongs to another process")
        if not self.can_reach(alloc.owner_gpu):
            raise PermissionViolation(f"no peer access to GPU {alloc.owner_gpu}")

    def allocate(self, owner_gpu: int, length_bytes: int) -> Allocation:
        if not self.can_reach(owner_gpu):
            raise PermissionViolation(f"no peer access to GPU {owner_gpu}")
        return self.sim._allocate(self, owner_gpu, length_bytes)

    def prepare(self, vaddrs) -> Chain:
        return self.sim._translate(self, vaddrs)

    def run_chain(self, chain: Chain) -> np.ndarray:
        """Replay a prepared chase; returns observed cycles per access."""
        return self.sim._run(self, chain, False)[0]

    def access_many(self, vaddrs) -> SampleBatch:
        vaddrs = np.asarray(vaddrs, dtype=np.int64)
        start = self.cycles
        cyc, cls = self.sim._run(self, self.sim._translate(self, vaddrs), True)
        ts = start + np.concatenate(([0], np.cumsum(cyc[:-1]))) if len(cyc) else cyc
        return SampleBatch(vaddrs, cyc, ts, cls)

    def access(self, vaddr: int) -> TimingSample:
        b = self.access_many([vaddr])
        return TimingSample(int(vaddr), int(b.cycles[0]), int(b.timestamps[0]),
                            AccessClass(int(b.true_class[0])))

    def burn(self, cycles: int) -> None:
        """Busy-work without memory traffic."""
        self.cycles += max(0, int(cycles))

    def wait_until(self, cycle: int) -> None:
        if cycle > self.cycles:
            self.cycles = int(cycle)

    def flush_caches(self) -> None:
        """Clear every L2 between experiments (harness-level, not an attacker primitive)."""
        self.sim.flush_caches()
