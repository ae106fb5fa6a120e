"""Cross-GPU prime+probe covert channel.

The trojan runs on the GPU that owns the attacked L2 and touches its own
eviction set to send a '1'. The spy reaches the same L2 over NVLink and
probes its aligned eviction set every slot; a slow probe means its lines
were evicted. Both sides agree on slot boundaries through the shared cycle
clock. Pairs of sets carry bits in parallel, one agent per pair and side.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from .probe import EvictionSet, IncompleteSet, LatencyThresholds, discover_eviction_set, evicts_target
from .scenario import Layout, build_world, probe_config_for, spy_sets, spy_thresholds, trojan_thresholds
from .simcore import Agent, AgentSession, LatencyModel, Topology, run_agents
from .workloads import noise_agent


class AlignmentFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    trojan_probe_loops: int = 400
    spy_probe_loops: int = 150
    num_cache_lines: int = 16
    margin_cycles: float = 50.0

    def __post_init__(self):
        if self.spy_probe_loops < 1 or self.trojan_probe_loops < self.spy_probe_loops:
            raise ValueError("need trojan_probe_loops >= spy_probe_loops >= 1")
        if self.num_cache_lines < 1:
            raise ValueError("num_cache_lines must be positive")


@dataclass(frozen=True)
class AlignedPair:
    trojan_set_index: int
    spy_set_index: int
    contention_score: float


def _lines(es: EvictionSet, n: int) -> list[int]:
    return es.member_vaddrs[:n]


def _hammer(session: AgentSession, vaddrs, loops: int, out: list | None = None):
    chain = session.prepare(vaddrs)

    def program(s: AgentSession) -> Iterator[None]:
        for _ in range(loops):
            cyc = s.run_chain(chain)
            if out is not None:
                out.append(cyc.mean())
            yield

    return program


def _sync(*sessions: AgentSession) -> None:
    t = max(s.cycles for s in sessions)
    for s in sessions:
        s.wait_until(t)


def spy_baseline(spy_session: AgentSession, spy_set: EvictionSet, cfg: AlignmentConfig) -> float:
    """Mean per-pass probe latency of the spy set probed alone."""
    lines = _lines(spy_set, cfg.num_cache_lines)
    spy_session.run_chain(spy_session.prepare(lines))  # prime
    means: list[float] = []
    run_agents([Agent(spy_session, _hammer(spy_session, lines, cfg.spy_probe_loops, means))],
               record=False)
    return float(np.mean(means))


def contention_score(trojan_session: AgentSession, spy_session: AgentSession, trojan_set: EvictionSet,
                     spy_set: EvictionSet, cfg: AlignmentConfig, baseline: float | None = None) -> float:
    """Spy's mean probe latency while the trojan hammers, minus its solo baseline."""
    if baseline is None:
        baseline = spy_baseline(spy_session, spy_set, cfg)
    _sync(trojan_session, spy_session)
    means: list[float] = []
    run_agents([
        Agent(trojan_session, _hammer(trojan_session, _lines(trojan_set, cfg.num_cache_lines),
                                      cfg.trojan_probe_loops)),
        Agent(spy_session, _hammer(spy_session, _lines(spy_set, cfg.num_cache_lines),
                                   cfg.spy_probe_loops, means)),
    ], record=False)
    return float(np.mean(means)) - baseline


def score_grid(trojan_session, spy_session, trojan_sets, spy_sets_, cfg: AlignmentConfig) -> np.ndarray:
    base = [spy_baseline(spy_session, s, cfg) for s in spy_sets_]
    return np.array([[contention_score(trojan_session, spy_session, t, s, cfg, base[j])
                      for j, s in enumerate(spy_sets_)] for t in trojan_sets])


def align_sets(trojan_session: AgentSession, spy_session: AgentSession, trojan_sets: list[EvictionSet],
               spy_sets_: list[EvictionSet], cfg: AlignmentConfig | None = None) -> list[AlignedPair]:
    """Greedily match each trojan set to the first free spy set it visibly contends with."""
    cfg = cfg or AlignmentConfig()
    base = [spy_baseline(spy_session, s, cfg) for s in spy_sets_]
    taken: set[int] = set()
    pairs = []
    for i, t in enumerate(trojan_sets):
        for j, s in enumerate(spy_sets_):
            if j in taken:
                continue
            score = contention_score(trojan_session, spy_session, t, s, cfg, base[j])
            if score > cfg.margin_cycles:
                pairs.append(AlignedPair(i, j, score))
                taken.add(j)
                break
    return pairs


# --- channel -------------------------------------------------------------

@dataclass
class ChannelConfig:
    pairs: list  # (trojan EvictionSet, spy EvictionSet) per aligned pair
    thresholds: LatencyThresholds
    slot_cycles: int = 40000
    prime_reps: int = 1
    zero_wait_cycles: int = 8000
    probe_offset: int = 20000  # spy probes this long after the slot starts
    num_cache_lines: int = 16

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("channel needs at least one aligned pair")
        if not 0 < self.probe_offset < self.slot_cycles:
            raise ValueError("probe_offset must fall inside the slot")
        worst = self.num_cache_lines * self.thresholds.means[3]
        if self.slot_cycles - self.probe_offset <= worst or self.probe_offset <= worst * self.prime_reps:
            raise ValueError(f"slot_cycles {self.slot_cycles} too short for one prime+probe")


@dataclass(frozen=True)
class ChannelStats:
    pairs: int
    slot_cycles: int
    bits_sent: int
    bit_errors: int
    error_rate: float
    duration_cycles: int
    throughput_bits_per_kilocycle: float

    @classmethod
    def compute(cls, sent: np.ndarray, decoded: np.ndarray, pairs: int, slot_cycles: int) -> "ChannelStats":
        n = len(sent)
        errors = int(np.count_nonzero(np.asarray(sent) != np.asarray(decoded)))
        slots = -(-n // pairs)
        duration = slots * slot_cycles
        return cls(pairs, slot_cycles, n, errors, errors / n if n else 0.0, duration,
                   n * 1000 / duration if duration else 0.0)

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}


@dataclass(frozen=True)
class NoiseProfile:
    sigma_scale: float = 1.0
    contention_coeff: float | None = None  # None keeps the model's coefficient
    background_intensity: float = 0.0

    def apply(self, model: LatencyModel) -> LatencyModel:
        return model.scaled(self.sigma_scale, self.contention_coeff)


ZERO_NOISE_PROFILE = NoiseProfile(0.0, 0.0, 0.0)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8)).astype(np.int8)


def bits_to_bytes(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def stripe(bits, pairs: int) -> np.ndarray:
    """Slot-major layout: bit ``j`` travels on pair ``j % pairs`` in slot ``j // pairs``."""
    bits = np.asarray(bits, dtype=np.int8)
    slots = -(-len(bits) // pairs)
    padded = np.zeros(slots * pairs, dtype=np.int8)
    padded[:len(bits)] = bits
    return padded.reshape(slots, pairs)


@dataclass
class Transmission:
    slots: np.ndarray  # [slot, pair]
    start_cycle: int
    agents: list


@dataclass
class Reception:
    expected_bits: int
    start_cycle: int
    agents: list
    latencies: np.ndarray  # mean probe latency per [slot, pair]
    threshold: float
    truncated: bool = False

    def bits(self) -> np.ndarray:
        return (self.latencies > self.threshold).astype(np.int8).reshape(-1)[:self.expected_bits]


def transmit(trojan_session: AgentSession, bits, cfg: ChannelConfig, start_cycle: int | None = None) -> Transmission:
    """Trojan agents, one per pair; run them under ``run_agents`` with the spy's."""
    start = trojan_session.cycles if start_cycle is None else start_cycle
    slots = stripe(bits, len(cfg.pairs))
    agents = []
    for p, (tset, _) in enumerate(cfg.pairs):
        s = trojan_session.spawn()
        chain = s.prepare(_lines(tset, cfg.num_cache_lines))
        col = slots[:, p].tolist()

        def program(sess, chain=chain, col=col) -> Iterator[None]:
            for i, bit in enumerate(col):
                sess.wait_until(start + (i + 1) * cfg.slot_cycles)
                yield
                if bit:
                    for _ in range(cfg.prime_reps):
                        sess.run_chain(chain)
                else:
                    sess.burn(cfg.zero_wait_cycles)
                yield

        agents.append(Agent(s, program, kind="trojan"))
    return Transmission(slots, start, agents)


def receive(spy_session: AgentSession, cfg: ChannelConfig, expected_bits: int,
            start_cycle: int | None = None) -> Reception:
    """Spy agents that prime at ``start_cycle`` then probe once per slot."""
    start = spy_session.cycles if start_cycle is None else start_cycle
    pairs = len(cfg.pairs)
    n_slots = -(-expected_bits // pairs)
    lat = np.zeros((n_slots, pairs))
    agents = []
    for p, (_, sset) in enumerate(cfg.pairs):
        s = spy_session.spawn()
        chain = s.prepare(_lines(sset, cfg.num_cache_lines))

        def program(sess, chain=chain, p=p) -> Iterator[None]:
            sess.wait_until(start)
            sess.run_chain(chain)
            yield
            for i in range(n_slots):
                sess.wait_until(start + (i + 1) * cfg.slot_cycles + cfg.probe_offset)
                yield
                lat[i, p] = sess.run_chain(chain).mean()
                yield

        agents.append(Agent(s, program, kind="spy"))
    return Reception(expected_bits, start, agents, lat, cfg.thresholds.boundaries[2],
                     truncated=n_slots * pairs > expected_bits)


def exchange(trojan_session: AgentSession, spy_session: AgentSession, bits, cfg: ChannelConfig,
             extra_agents: list | None = None) -> Reception:
    """Send ``bits`` from trojan to spy; returns the spy's reception."""
    bits = np.asarray(bits, dtype=np.int8)
    _sync(trojan_session, spy_session)
    start = spy_session.cycles
    tx = transmit(trojan_session, bits, cfg, start)
    rx = receive(spy_session, cfg, len(bits), start)
    if len(bits):
        sim = spy_session.sim
        prev = sim.active_probed_sets
        sim.active_probed_sets = len(cfg.pairs)
        try:
            run_agents(rx.agents + tx.agents + list(extra_agents or []), record=False)
        finally:
            sim.active_probed_sets = prev
    return rx


# --- end-to-end ----------------------------------------------------------

def channel_setup(layout: Layout = Layout(), topology: Topology | None = None, max_pairs: int = 16,
                  align_cfg: AlignmentConfig = AlignmentConfig(), max_tries: int = 16,
                  latency: LatencyModel | None = None):
    """Aligned (trojan, spy) eviction-set pairs, found once per process.

    The spy enumerates a page family of consecutive sets. The trojan
    discovers base sets on successive pages until one aligns with the spy's
    base; shifting both bases by the same in-page offset then yields aligned
    neighbours, which are re-checked with the alignment protocol.
    """
    return _channel_setup(layout, topology, max_pairs, align_cfg, max_tries, latency)


@lru_cache(maxsize=8)
def _channel_setup(layout, topology, max_pairs, align_cfg, max_tries, latency):
    world = build_world(layout, topology, latency)
    cfg = probe_config_for(world)
    spies = spy_sets(layout, topology, max_pairs, cfg, latency)
    if len(spies) < max_pairs:
        raise AlignmentFailed(f"spy found only {len(spies)} eviction sets")
    t_thr = trojan_thresholds(world, cfg)
    spy_thresholds(world, cfg)
    tr, alloc, page = world.trojan, world.trojan_local, world.sim.page_bytes
    for attempt in range(min(max_tries, alloc.length // page)):
        try:
            base = discover_eviction_set(tr, alloc, attempt * page, t_thr, cfg)
        except IncompleteSet:
            continue
        if not align_sets(tr, world.spy, [base], [spies[0]], align_cfg):
            continue
        trojans = [base]
        for s in range(1, max_pairs):
            shift = spies[s].target_vaddr - spies[0].target_vaddr
            members = [v + shift for v in base.member_vaddrs]
            es = EvictionSet(base.target_vaddr + shift, members)
            if not all(alloc.base_vaddr <= v < alloc.end_vaddr for v in members + [es.target_vaddr]):
                break
            if not evicts_target(tr, es, t_thr, cfg.votes):
                break
            trojans.append(es)
        if len(trojans) < max_pairs:
            continue
        found = align_sets(tr, world.spy, trojans, list(spies), align_cfg)
        if [(p.trojan_set_index, p.spy_set_index) for p in found] != [(i, i) for i in range(max_pairs)]:
            continue
        return tuple(zip(trojans, spies))
    raise AlignmentFailed(f"no trojan eviction set aligned with the spy after {max_tries} pages")


def run_channel(message: bytes, num_pairs: int, noise: NoiseProfile = NoiseProfile(), seed: int = 0,
                layout: Layout = Layout(), topology: Topology | None = None, slot_cycles: int = 40000,
                prime_reps: int = 1, latency: LatencyModel | None = None, setup_pairs: int = 16,
                align_cfg: AlignmentConfig = AlignmentConfig()) -> tuple[ChannelStats, Reception]:
    """Full pipeline: reuse aligned sets, calibrate, transmit ``message``, compare.

    Setup runs on the base ``latency`` model; ``noise`` scales it for the
    transmission itself.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    pairs = channel_setup(layout, topology, max(setup_pairs, num_pairs), align_cfg,
                          latency=latency)[:num_pairs]
    model = noise.apply(latency or LatencyModel())
    world = build_world(layout, topology, model, noise_seed=seed)
    thr = spy_thresholds(world, probe_config_for(world))
    cfg = ChannelConfig(list(pairs), thr, slot_cycles=slot_cycles, prime_reps=prime_reps,
                        num_cache_lines=align_cfg.num_cache_lines)
    extra = []
    if noise.background_intensity > 0:
        ns = world.sim.new_session(layout.target_gpu)
        extra.append(noise_agent(ns, noise.background_intensity, seed))
    world.sim.flush_caches()
    bits = bytes_to_bits(message)
    rx = exchange(world.trojan, world.spy, bits, cfg, extra)
    return ChannelStats.compute(bits, rx.bits(), num_pairs, slot_cycles), rx


def stats_json(stats: ChannelStats) -> str:
    return json.dumps(stats.to_dict(), indent=1, sort_keys=True)


def latencies_csv(rx: Reception, sent=None) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["slot", "pair", "mean_cycles", "decoded"] + (["sent"] if sent is not None else []))
    slots = stripe(sent, rx.latencies.shape[1]) if sent is not None else None
    for i in range(rx.latencies.shape[0]):
        for p in range(rx.latencies.shape[1]):
            row = [i, p, f"{rx.latencies[i, p]:.2f}", int(rx.latencies[i, p] > rx.threshold)]
            if slots is not None:
                row.append(int(slots[i, p]))
            w.writerow(row)
    return out.getvalue()
