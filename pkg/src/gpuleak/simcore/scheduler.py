"""Deterministic fixed-quantum round-robin scheduler.

An agent program is a generator taking its session; it performs accesses or
cycle burns through the session and yields after each step. A step (one
access, or one pointer chase) is never preempted. Each round, every live
agent runs until its cycle counter reaches the round's quantum boundary,
in list order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

from .sim import AgentSession, TraceLog

Program = Callable[[AgentSession], Iterator]


@dataclass
class Agent:
    session: AgentSession
    program: Program
    kind: str = "agent"
    daemon: bool = False  # runs until all non-daemon agents finish


@dataclass(frozen=True)
class OccupancyPolicy:
    """When exclusive, idle blocks saturate the SMs and noise agents never get scheduled."""

    exclusive: bool = False

    def admit(self, agent: Agent) -> bool:
        return not (self.exclusive and agent.kind == "noise")


@dataclass
class RunResult:
    trace: TraceLog | None
    end_cycle: int
    finished: list[int] = field(default_factory=list)


def run_agents(agents: list[Agent], quantum_cycles: int | None = None, max_cycles: int | None = None,
               record: bool = True, occupancy: OccupancyPolicy | None = None) -> RunResult:
    if not agents:
        raise ValueError("need at least one agent")
    sim = agents[0].session.sim
    q = quantum_cycles or sim.quantum_cycles
    if occupancy is not None:
        agents = [a for a in agents if occupancy.admit(a)]
    live = [(a, a.program(a.session)) for a in agents]
    trace = TraceLog() if record else None
    prev_trace = sim.trace
    sim.trace = trace
    finished: list[int] = []
    try:
        while any(not a.daemon for a, _ in live):
            low = min(a.session.cycles for a, _ in live)
            if max_cycles is not None and low >= max_cycles:
                break
            # empty rounds change nothing, so jump straight to the next busy one
            boundary = (low // q + 1) * q
            if max_cycles is not None:
                boundary = min(boundary, max_cycles)
            done = []
            for i, (a, gen) in enumerate(live):
                s = a.session
                while s.cycles < boundary:
                    before = s.cycles
                    try:
                        next(gen)
                    except StopIteration:
                        done.append(i)
                        break
                    if s.cycles == before:
                        # zero-cost step; hand over rather than spin
                        s.cycles += 1
            if done:
                finished += [live[i][0].session.agent_id for i in done if not live[i][0].daemon]
                live = [x for i, x in enumerate(live) if i not in done]
            if not live:
                break
    finally:
        sim.trace = prev_trace
    end = max((a.session.cycles for a in agents), default=0)
    return RunResult(trace, end, finished)
