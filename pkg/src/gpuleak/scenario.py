"""Reproducible attacker/victim layouts.

A ``World`` always creates its sessions and buffers in the same order, so
with the same layout seed every buffer lands on the same physical frames.
Eviction sets found once in a setup world therefore stay valid in any later
world built from the same layout, whatever its noise seed. The expensive
discovery step is cached per process.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .probe import (
    EvictionSet,
    LatencyThresholds,
    ProbeConfig,
    calibrate_latencies,
    enumerate_unique_sets,
)
from .simcore import AgentSession, Allocation, LatencyModel, Simulator, Topology

MiB = 1 << 20


@dataclass(frozen=True)
class Layout:
    target_gpu: int = 0  # GPU whose L2 is attacked; trojan and victims live here
    spy_gpu: int = 1
    alloc_bytes: int = 16 * MiB
    calib_bytes: int = 1 * MiB
    seed: int = 0  # physical frame placement
    quantum_cycles: int = 2000


@dataclass
class World:
    sim: Simulator
    layout: Layout
    spy: AgentSession
    trojan: AgentSession
    spy_local: Allocation
    spy_remote: Allocation
    trojan_local: Allocation
    trojan_remote: Allocation


def build_world(layout: Layout = Layout(), topology: Topology | None = None,
                latency: LatencyModel | None = None, noise_seed: int | None = None) -> World:
    sim = Simulator(topology, latency, seed=layout.seed,
                    noise_seed=layout.seed if noise_seed is None else noise_seed,
                    quantum_cycles=layout.quantum_cycles)
    spy = sim.new_session(layout.spy_gpu)
    spy.enable_peer_access(layout.target_gpu)
    spy_local = spy.allocate(layout.spy_gpu, layout.calib_bytes)
    spy_remote = spy.allocate(layout.target_gpu, layout.alloc_bytes)
    trojan = sim.new_session(layout.target_gpu)
    trojan.enable_peer_access(layout.spy_gpu)
    trojan_local = trojan.allocate(layout.target_gpu, layout.alloc_bytes)
    trojan_remote = trojan.allocate(layout.spy_gpu, layout.calib_bytes)
    return World(sim, layout, spy, trojan, spy_local, spy_remote, trojan_local, trojan_remote)


def spy_thresholds(world: World, cfg: ProbeConfig | None = None, samples: int = 240) -> LatencyThresholds:
    return calibrate_latencies(world.spy, world.spy_local, world.spy_remote, samples, cfg)


def trojan_thresholds(world: World, cfg: ProbeConfig | None = None, samples: int = 240) -> LatencyThresholds:
    return calibrate_latencies(world.trojan, world.trojan_local, world.trojan_remote, samples, cfg)


def probe_config_for(world: World, **overrides) -> ProbeConfig:
    """Probe settings matching the simulated geometry (line size, ways, page size)."""
    cache = world.sim.topology.gpu(world.layout.target_gpu).cache
    kw = dict(stride_bytes=cache.line_bytes, set_size=cache.ways, page_bytes=world.sim.page_bytes)
    kw.update(overrides)
    return ProbeConfig(**kw)


def spy_sets(layout: Layout, topology: Topology | None, count: int, cfg: ProbeConfig | None = None,
             latency: LatencyModel | None = None) -> tuple[EvictionSet, ...]:
    """``count`` non-aliased spy eviction sets on the target GPU.

    Found under ``latency`` (default noise when None) in a setup world.
    """
    return _spy_sets(layout, topology, count, cfg, latency)


@lru_cache(maxsize=16)
def _spy_sets(layout, topology, count, cfg, latency):
    world = build_world(layout, topology, latency)
    cfg = cfg or probe_config_for(world)
    thr = spy_thresholds(world, cfg)
    return tuple(enumerate_unique_sets(world.spy, world.spy_remote, count, thr, cfg))
