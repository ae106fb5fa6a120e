"""Ground-truth simulation of a multi-GPU node with NUMA L2 caches."""
from .cache import CacheConfig, CacheState, set_index
from .latency import CLASS_NAMES, ZERO_NOISE, AccessClass, LatencyModel
from .scheduler import Agent, OccupancyPolicy, RunResult, run_agents
from .sim import (
    AgentSession,
    Allocation,
    Chain,
    NoNvlinkPath,
    OutOfMemory,
    PermissionViolation,
    PhysicalAddress,
    SampleBatch,
    SimError,
    Simulator,
    TimingSample,
    TraceLog,
    UnmappedAddress,
)
from .topology import GpuNode, Topology, TopologyError, build_topology, symmetric

__all__ = [
    "AccessClass", "Agent", "AgentSession", "Allocation", "CLASS_NAMES", "CacheConfig",
    "CacheState", "Chain", "GpuNode", "LatencyModel", "NoNvlinkPath", "OccupancyPolicy",
    "OutOfMemory", "PermissionViolation", "PhysicalAddress", "RunResult", "SampleBatch",
    "SimError", "Simulator", "TimingSample", "Topology", "TopologyError", "TraceLog",
    "UnmappedAddress", "ZERO_NOISE", "build_topology", "run_agents", "set_index", "symmetric",
]
