"""Attacker-side reverse engineering through AgentSession only.

Latency calibration, pointer-chase eviction-set discovery, associativity and
replacement-policy inference, and alias elimination between eviction sets.
Nothing here reads simulator ground truth; ``EvictionSet.resolved_set`` is
only ever filled in by tests.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .simcore import AgentSession, Allocation


class CalibrationFailed(RuntimeError):
    pass


class IncompleteSet(RuntimeError):
    def __init__(self, found_count: int, members=()):
        super().__init__(f"eviction set incomplete: found {found_count} members")
        self.found_count = found_count
        self.members = list(members)


@dataclass(frozen=True)
class LatencyThresholds:
    boundaries: tuple[float, float, float]
    means: tuple[float, float, float, float]
    stds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        b, m = self.boundaries, self.means
        if not (b[0] < b[1] < b[2]):
            raise ValueError(f"boundaries must increase: {b}")
        if not all(m[i] < b[i] < m[i + 1] for i in range(3)):
            raise ValueError(f"boundaries {b} must sit between cluster means {m}")

    def miss_threshold(self, remote: bool) -> float:
        return self.boundaries[2] if remote else self.boundaries[0]

    def is_miss(self, cycles, remote: bool):
        return np.asarray(cycles) > self.miss_threshold(remote)

    def classify(self, cycles) -> np.ndarray:
        """Access class index 0..3 for each observed latency."""
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(cycles), side="left")

    def to_dict(self) -> dict:
        return {"schema_version": 1, "boundaries": list(self.boundaries),
                "means": list(self.means), "stds": list(self.stds)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyThresholds":
        return cls(tuple(d["boundaries"]), tuple(d["means"]), tuple(d.get("stds", (0.0,) * 4)))


@dataclass(frozen=True)
class ProbeConfig:
    stride_bytes: int = 128
    num_access_repeats: int = 4
    kernel_repeats: int = 20
    search_budget: int | None = None  # max candidates in the chase; None = whole buffer
    set_size: int = 16  # members wanted per eviction set
    votes: int = 5
    skip_block: int = 8
    gallop: bool = True
    page_bytes: int = 64 * 1024
    lines_per_launch: int = 48


@dataclass
class EvictionSet:
    target_vaddr: int
    member_vaddrs: list[int]
    resolved_set: int | None = None  # test-only

    def __post_init__(self):
        if len(set(self.member_vaddrs)) != len(self.member_vaddrs):
            raise ValueError("eviction set members must be distinct")

    def __len__(self):
        return len(self.member_vaddrs)

    def to_dict(self) -> dict:
        return {"target": self.target_vaddr, "members": list(self.member_vaddrs),
                "resolved_set": self.resolved_set}

    @classmethod
    def from_dict(cls, d: dict) -> "EvictionSet":
        return cls(int(d["target"]), [int(x) for x in d["members"]], d.get("resolved_set"))


def dump_eviction_sets(sets: list[EvictionSet], fh=None) -> str | None:
    doc = {"schema_version": 1, "sets": [s.to_dict() for s in sets]}
    if fh is None:
        return json.dumps(doc, indent=1, sort_keys=True)
    json.dump(doc, fh, indent=1, sort_keys=True)
    return None


def load_eviction_sets(text_or_fh) -> list[EvictionSet]:
    doc = json.loads(text_or_fh) if isinstance(text_or_fh, str) else json.load(text_or_fh)
    return [EvictionSet.from_dict(d) for d in doc["sets"]]


@dataclass
class PolicyReport:
    inferred_ways: int | None
    eviction_period: int | None
    policy_label: str
    eviction_points: list = field(default_factory=list)
    curve: list = field(default_factory=list)  # (k, mean re-access cycles)

    def to_dict(self) -> dict:
        return asdict(self)


def _is_remote(session: AgentSession, vaddr: int) -> bool:
    # the attacker knows where it allocated its own buffers
    return session.sim.find_allocation(int(vaddr)).owner_gpu != session.home_gpu


# --- calibration ----------------------------------------------------------

def collect_calibration_samples(session: AgentSession, allocs: list[Allocation], samples: int,
                                cfg: ProbeConfig | None = None) -> np.ndarray:
    """Flush, first-touch a strided block, then re-touch it; per allocation.

    Runs at least ``kernel_repeats`` launches and until ``samples`` first-touch
    latencies were gathered per allocation.
    """
    cfg = cfg or ProbeConfig()
    out = []
    for alloc in allocs:
        n_lines = alloc.length // cfg.stride_bytes
        got, start, launches = 0, 0, 0
        while got < samples or launches < cfg.kernel_repeats:
            launches += 1
            k = cfg.lines_per_launch if got >= samples else min(cfg.lines_per_launch, samples - got)
            idx = (start + np.arange(k)) % n_lines
            start += k
            vaddrs = alloc.base_vaddr + idx * cfg.stride_bytes
            session.flush_caches()
            chain = session.prepare(vaddrs)
            for _ in range(cfg.num_access_repeats):
                out.append(session.run_chain(chain))
            got += k
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def kmeans_1d(x: np.ndarray, k: int = 4, iters: int = 100):
    """Lloyd's algorithm on a line with evenly spaced initial centres."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    centres = np.linspace(x[0], x[-1], k)
    labels = None
    for _ in range(iters):
        edges = (centres[1:] + centres[:-1]) / 2
        new = np.searchsorted(edges, x, side="left")
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            sel = x[labels == j]
            if len(sel):
                centres[j] = sel.mean()
    counts = np.bincount(labels, minlength=k)
    stds = np.array([x[labels == j].std() if counts[j] else 0.0 for j in range(k)])
    return centres, stds, counts


def thresholds_from_samples(cycles: np.ndarray) -> LatencyThresholds:
    centres, stds, counts = kmeans_1d(cycles, 4)
    if (counts == 0).any():
        raise CalibrationFailed(f"empty latency cluster: counts {counts.tolist()}")
    for i in range(3):
        if centres[i + 1] - centres[i] <= max(stds[i], stds[i + 1]):
            raise CalibrationFailed(
                f"clusters {i} and {i + 1} overlap: means {centres[i]:.1f}/{centres[i + 1]:.1f}")
    bounds = tuple(float((centres[i] + centres[i + 1]) / 2) for i in range(3))
    return LatencyThresholds(bounds, tuple(float(c) for c in centres), tuple(float(s) for s in stds))


def calibrate_latencies(session: AgentSession, local_alloc: Allocation, remote_alloc: Allocation,
                        samples: int = 240, cfg: ProbeConfig | None = None) -> LatencyThresholds:
    if samples < 100:
        raise ValueError("need at least 100 samples per class")
    cyc = collect_calibration_samples(session, [local_alloc, remote_alloc], samples, cfg)
    return thresholds_from_samples(cyc)


# --- eviction sets --------------------------------------------------------

class _Chaser:
    """Target / chain / target experiment with majority-vote confirmation."""

    def __init__(self, session, target, candidates, thresholds, votes):
        self.session = session
        self.target = np.array([target], dtype=np.int64)
        self.cand = np.asarray(candidates, dtype=np.int64)
        self.thr = thresholds.miss_threshold(_is_remote(session, target))
        self.votes = votes
        self.traversed = 0

    def _once(self, n: int) -> bool:
        chain = np.concatenate([self.target, self.cand[:n], self.target])
        cyc = self.session.run_chain(self.session.prepare(chain))
        self.traversed += n
        return bool(cyc[-1] > self.thr)

    def voted(self, n: int, yes: int = 0) -> bool:
        need = self.votes // 2 + 1
        no = 0
        while yes < need and no < need:
            if self._once(n):
                yes += 1
            else:
                no += 1
        return yes >= need

    def evicts(self, n: int) -> bool:
        # misreads of a hit are rare but costly, so only positives are re-checked
        return self._once(n) and self.voted(n, yes=1)

    def remove(self, i: int) -> int:
        v = int(self.cand[i])
        self.cand = np.delete(self.cand, i)
        return v


def _candidates(alloc: Allocation, target_offset: int, stride: int) -> np.ndarray:
    offs = np.arange(0, alloc.length, stride, dtype=np.int64)
    offs = offs[offs != target_offset]
    offs = np.concatenate([offs[offs > target_offset], offs[offs < target_offset]])
    return alloc.base_vaddr + offs


def discover_eviction_set(session: AgentSession, alloc: Allocation, target_offset: int,
                          thresholds: LatencyThresholds, cfg: ProbeConfig | None = None,
                          candidates=None) -> EvictionSet:
    """Grow a pointer chase after the target until the target gets evicted.

    The candidate added last when the target first misses shares its set;
    it is recorded and dropped from the chase, and growth continues until
    ``cfg.set_size`` such addresses are known. Candidates are added in
    blocks of ``skip_block`` (with doubling when ``gallop``); on eviction
    the search narrows back down to the single responsible address.
    ``candidates`` overrides the default of every line in ``alloc``.
    """
    cfg = cfg or ProbeConfig()
    target_offset -= target_offset % cfg.stride_bytes
    target = alloc.base_vaddr + target_offset
    if candidates is None:
        candidates = _candidates(alloc, target_offset, cfg.stride_bytes)
    else:
        candidates = np.asarray([c for c in candidates if c != target], dtype=np.int64)
    ch = _Chaser(session, target, candidates, thresholds, cfg.votes)
    budget = len(ch.cand) if cfg.search_budget is None else min(cfg.search_budget, len(ch.cand))
    members: list[int] = []
    lo = 0  # prefix length known not to evict
    gap = last = 0  # spacing of recent members hints at the next stride
    while len(members) < cfg.set_size:
        limit = min(budget, len(ch.cand))
        if lo >= limit:
            raise IncompleteSet(len(members), members)
        step = max(cfg.skip_block, gap // 2) if cfg.gallop else cfg.skip_block
        while True:
            n = min(lo + step, limit)
            if ch.evicts(n):
                hi = n
                break
            lo = n
            if n >= limit:
                raise IncompleteSet(len(members), members)
            if cfg.gallop:
                step *= 2
        while hi - lo > cfg.skip_block:
            mid = (lo + hi) // 2
            if ch.evicts(mid):
                hi = mid
            else:
                lo = mid
        # per-address scan inside the last block
        first = hi
        for n in range(lo + 1, hi):
            if ch.evicts(n):
                first = n
                break
        p = first - 1
        if not ch.voted(first) or ch.voted(p):
            lo = 0  # a misread steered the search; redo it from scratch
            continue
        members.append(ch.remove(p))
        if len(members) > 1:
            gap = p - last
        lo = last = p
    return EvictionSet(alloc.base_vaddr + target_offset, members)


def evicts_target(session: AgentSession, es: EvictionSet, thresholds: LatencyThresholds,
                  votes: int = 5, k: int | None = None) -> bool:
    """Does accessing the first ``k`` members after the target evict it (majority vote)?"""
    members = es.member_vaddrs if k is None else es.member_vaddrs[:k]
    ch = _Chaser(session, es.target_vaddr, members, thresholds, votes)
    return ch.voted(len(members))


def measure_associativity(session: AgentSession, es: EvictionSet, thresholds: LatencyThresholds,
                          trials: int = 10, votes: int = 5) -> PolicyReport:
    """Find, per trial, the smallest k whose members evict the target."""
    m = len(es)
    ch = _Chaser(session, es.target_vaddr, es.member_vaddrs, thresholds, 1)
    points = []
    sums = np.zeros(m + 1)
    cnt = np.zeros(m + 1)
    for _ in range(trials):
        point = None
        for k in range(1, m + 1):
            chain = np.concatenate([ch.target, ch.cand[:k], ch.target])
            prepared = session.prepare(chain)
            ev = 0
            for _ in range(votes):
                c = session.run_chain(prepared)[-1]
                sums[k] += c
                cnt[k] += 1
                ev += c > ch.thr
            if ev > votes // 2:
                point = k
                break
        points.append(point)
    curve = [(k, float(sums[k] / cnt[k])) for k in range(1, m + 1) if cnt[k]]
    if any(p is None for p in points):
        return PolicyReport(None, None, "unknown", points, curve)
    period = Counter(points).most_common(1)[0][0]
    label = "LRU-like" if len(set(points)) == 1 else "random-like"
    return PolicyReport(max(points), period, label, points, curve)


def test_alias(session: AgentSession, set_a: EvictionSet, set_b: EvictionSet,
               thresholds: LatencyThresholds, trials: int = 5) -> bool:
    """Prime A, walk B, re-probe A; aliased when most trials see a miss."""
    if set(set_a.member_vaddrs) & set(set_b.member_vaddrs):
        return True
    thr = thresholds.miss_threshold(_is_remote(session, set_a.member_vaddrs[0]))
    a = session.prepare(set_a.member_vaddrs)
    b = session.prepare(set_b.member_vaddrs)
    hits = 0
    for _ in range(trials):
        session.run_chain(a)
        session.run_chain(b)
        hits += bool((session.run_chain(a) > thr).any())
    return hits > trials // 2


# keep pytest from collecting the attack primitive above
test_alias.__test__ = False


def _shifted(alloc: Allocation, es: EvictionSet, shift_bytes: int, page_bytes: int) -> EvictionSet | None:
    out = []
    for v in [es.target_vaddr] + es.member_vaddrs:
        off = v - alloc.base_vaddr
        if off % page_bytes + shift_bytes >= page_bytes or off + shift_bytes >= alloc.length:
            return None
        out.append(v + shift_bytes)
    return EvictionSet(out[0], out[1:])


def enumerate_unique_sets(session: AgentSession, alloc: Allocation, count_wanted: int,
                          thresholds: LatencyThresholds, cfg: ProbeConfig | None = None,
                          max_discoveries: int | None = None) -> list[EvictionSet]:
    """Collect ``count_wanted`` pairwise non-aliased eviction sets.

    Each discovery starts from the first line of a page not used before. A
    page maps to consecutive sets, so a found set shifted line by line
    yields eviction sets for the neighbouring sets; those are validated
    rather than searched for. New discoveries are alias-tested only against
    earlier discoveries, since shifted families cannot collide otherwise.

    If the first discovery shows every member at the target's in-page
    offset, later searches only chase the first lines of other pages, and
    pages already appearing in a kept set are skipped.
    Returns fewer sets if the buffer or ``max_discoveries`` runs out.
    """
    cfg = cfg or ProbeConfig()
    if count_wanted < 1:
        return []
    kept: list[EvictionSet] = []
    bases: list[EvictionSet] = []
    page_lines = cfg.page_bytes // cfg.stride_bytes
    n_pages = -(-alloc.length // cfg.page_bytes)
    page_heads = alloc.base_vaddr + np.arange(n_pages, dtype=np.int64) * cfg.page_bytes
    aligned = False
    covered: set[int] = set()
    tries = 0
    for page in range(n_pages):
        if len(kept) >= count_wanted or (max_discoveries is not None and tries >= max_discoveries):
            break
        if int(page_heads[page]) in covered:
            continue
        tries += 1
        cands = np.roll(page_heads, -page - 1)[:-1] if aligned else None
        try:
            base = discover_eviction_set(session, alloc, page * cfg.page_bytes, thresholds, cfg, cands)
        except IncompleteSet:
            continue
        if not bases:
            aligned = all((v - alloc.base_vaddr) % cfg.page_bytes == 0 for v in base.member_vaddrs)
        covered.update(base.member_vaddrs)
        if any(test_alias(session, base, b, thresholds, cfg.votes) for b in bases):
            continue
        bases.append(base)
        kept.append(base)
        for s in range(1, page_lines):
            if len(kept) >= count_wanted:
                break
            es = _shifted(alloc, base, s * cfg.stride_bytes, cfg.page_bytes)
            if es is not None and evicts_target(session, es, thresholds, cfg.votes):
                kept.append(es)
    return kept[:count_wanted]
