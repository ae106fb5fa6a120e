"""Synthetic victim programs with distinct cache footprints.

Each program allocates its own buffer on the session's GPU, then repeatedly
touches a batch of at most ``BATCH`` lines and burns compute cycles. The
footprints are stylised stand-ins for well-known GPU kernels:

- vectoradd: three arrays read and written in lock-step linear streams
- histogram: linear input stream plus a Zipf-skewed set of hot bins
- blackscholes: one wide linear sweep plus a few constant hot lines
- matmul: tiles of two matrices, each tile reused before moving on
- quasirandom: van der Corput scatter over a large buffer
- walsh: butterfly stages pairing lines ``i`` and ``i ^ 2**s``
- mlp: per epoch a data-loading burst, then sweeps over weights whose size
  grows linearly with the hidden-layer width
- idle: no memory traffic at all
- noise: uniform random lines at a rate set by ``intensity``

The seed only drives start and burn jitter (and hot-bin draws), so the same
spec and seed replay the same trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .simcore import Agent, AgentSession

BATCH = 32
LINE = 128
KINDS = ("vectoradd", "histogram", "blackscholes", "matmul", "quasirandom", "walsh",
         "mlp", "idle", "noise")
APPLICATIONS = ("vectoradd", "histogram", "blackscholes", "matmul", "quasirandom", "walsh")
MLP_SIZES = (64, 128, 256, 512)

_DEFAULTS = {
    "vectoradd": {"lines": 4096, "compute": 2000},
    "histogram": {"lines": 8192, "bins": 256, "zipf": 1.3, "compute": 1500},
    "blackscholes": {"lines": 16384, "hot": 4, "compute": 4000},
    "matmul": {"lines": 4096, "tile": 8, "reuse": 3, "compute": 3000},
    "quasirandom": {"lines": 32768, "compute": 1000},
    "walsh": {"lines": 8192, "compute": 2000},
    "mlp": {"neurons": 128, "epochs": 1, "base_lines": 256, "lines_per_neuron": 8,
            "data_lines": 4096, "sweeps": 3, "train_batch": 4, "compute": 20000, "load_compute": 200},
    "idle": {},
    "noise": {"intensity": 0.0, "lines": 32768},
}


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    start_jitter: int = 20000
    burn_jitter: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WorkloadError(f"unknown workload kind {self.kind!r}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise WorkloadError(f"unknown {self.kind} params: {sorted(unknown)}")
        p = self.resolved()
        for k, v in p.items():
            if k in ("zipf", "intensity"):
                continue
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise WorkloadError(f"{self.kind}.{k} must be a non-negative integer")
        if self.kind == "mlp":
            if p["epochs"] < 1 or p["neurons"] < 1:
                raise WorkloadError("mlp needs neurons >= 1 and epochs >= 1")
        if self.kind == "noise" and not 0.0 <= p["intensity"] <= 1.0:
            raise WorkloadError("noise intensity must lie in [0, 1]")
        if self.kind == "histogram" and p["zipf"] <= 1.0:
            raise WorkloadError("histogram zipf exponent must exceed 1")
        if self.kind == "walsh" and p["lines"] & (p["lines"] - 1):
            raise WorkloadError("walsh lines must be a power of two")
        if self.start_jitter < 0 or not 0 <= self.burn_jitter < 1:
            raise WorkloadError("bad jitter settings")

    def resolved(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.params}


def mlp_weight_lines(neurons: int, base_lines: int = 256, lines_per_neuron: int = 8) -> int:
    return base_lines + lines_per_neuron * neurons


def van_der_corput(n: int, base: int = 2) -> np.ndarray:
    """First ``n`` points of the base-``base`` radical inverse sequence, from index 1."""
    out = np.zeros(n)
    idx = np.arange(1, n + 1)
    denom = 1.0
    while idx.any():
        denom *= base
        idx, digit = np.divmod(idx, base)
        out += digit / denom
    return out


def footprint(spec: WorkloadSpec) -> tuple[int, list[np.ndarray]]:
    """Buffer size in lines and the ordered list of line batches of one pass.

    Passes repeat forever except for mlp, whose passes are its epochs.
    """
    p = spec.resolved()
    k = spec.kind
    if k in ("idle", "noise"):
        return 0, []
    if k == "vectoradd":
        n = p["lines"]
        i = np.arange(n)
        order = np.stack([i, n + i, 2 * n + i], axis=1).reshape(-1)
        return 3 * n, _chunks(order, 24)
    if k == "histogram":
        n, bins = p["lines"], p["bins"]
        rng = np.random.default_rng([spec.seed, 1])
        hot = np.minimum(rng.zipf(p["zipf"], size=n), bins) - 1 + n
        out = []
        for s in range(0, n, 16):
            out.append(np.concatenate([np.arange(s, min(s + 16, n)), hot[s:s + 16]]))
        return n + bins, out
    if k == "blackscholes":
        n, hot = p["lines"], p["hot"]
        hot_lines = n + np.arange(hot)
        return n + hot, [np.concatenate([np.arange(s, min(s + BATCH - hot, n)), hot_lines])
                         for s in range(0, n, BATCH - hot)]
    if k == "matmul":
        n, t, r = p["lines"], p["tile"], p["reuse"]
        out = []
        for a in range(0, n, t):
            for j in range(4):
                b = (a * 5 + j * t * 8) % n
                tile = np.concatenate([np.arange(a, a + t), n + np.arange(b, b + t)])
                out.append(np.tile(tile, r)[:BATCH])
        return 2 * n, out
    if k == "quasirandom":
        n = p["lines"]
        pts = np.minimum((van_der_corput(n) * n).astype(np.int64), n - 1)
        return n, _chunks(pts, BATCH)
    if k == "walsh":
        n = p["lines"]
        out = []
        for s in range(n.bit_length() - 1):
            i = np.arange(n)
            lo = i[(i >> s) & 1 == 0]
            pairs = np.stack([lo, lo ^ (1 << s)], axis=1).reshape(-1)
            out += _chunks(pairs, BATCH)
        return n, out
    if k == "mlp":
        w = mlp_weight_lines(p["neurons"], p["base_lines"], p["lines_per_neuron"])
        d = p["data_lines"]
        out = _chunks(np.arange(w, w + d), BATCH)
        for _ in range(p["sweeps"]):
            out += _chunks(np.arange(w), max(1, min(p["train_batch"], BATCH)))
        return w + d, out
    raise WorkloadError(k)  # pragma: no cover


def _chunks(a: np.ndarray, size: int) -> list[np.ndarray]:
    return [a[i:i + size] for i in range(0, len(a), size)]


def make_workload(spec: WorkloadSpec):
    """Agent program (generator function of a session) for ``spec``."""
    if spec.kind == "noise":
        return make_noise_agent(spec.resolved()["intensity"], spec.seed, spec.resolved()["lines"])
    p = spec.resolved()
    n_lines, batches = footprint(spec)

    def program(session: AgentSession) -> Iterator[None]:
        if not batches:
            return
        rng = np.random.default_rng([spec.seed, 0])
        alloc = session.allocate(session.home_gpu, n_lines * LINE)
        chains: dict[int, object] = {}

        def chain(i):
            if i not in chains:
                chains[i] = session.prepare(alloc.base_vaddr + batches[i] * LINE)
            return chains[i]

        if spec.start_jitter:
            session.burn(int(rng.integers(0, spec.start_jitter)))
            yield
        compute = p.get("compute", 0)
        if spec.kind == "mlp":
            n_load = len(_chunks(np.arange(p["data_lines"]), BATCH))
            for _ in range(p["epochs"]):
                for i in range(len(batches)):
                    session.run_chain(chain(i))
                    session.burn(_jitter(rng, p["load_compute"] if i < n_load else compute,
                                         spec.burn_jitter))
                    yield
            return
        while True:
            for i in range(len(batches)):
                session.run_chain(chain(i))
                session.burn(_jitter(rng, compute, spec.burn_jitter))
                yield

    return program


def _jitter(rng, base: int, frac: float) -> int:
    if not base or not frac:
        return base
    return int(base * (1.0 + frac * (2.0 * rng.random() - 1.0)))


def make_noise_agent(intensity: float, seed: int = 0, lines: int = 32768):
    """Uniform random line accesses; ``intensity`` 1 means back-to-back batches."""
    if not 0.0 <= intensity <= 1.0:
        raise WorkloadError("noise intensity must lie in [0, 1]")

    def program(session: AgentSession) -> Iterator[None]:
        if intensity == 0.0:
            return
        rng = np.random.default_rng([seed, 2])
        alloc = session.allocate(session.home_gpu, lines * LINE)
        # roughly the time one batch of misses takes, scaled to a duty cycle
        gap = int(16 * 500 * (1.0 / intensity - 1.0))
        while True:
            session.access_many(alloc.base_vaddr + rng.integers(0, lines, size=16) * LINE)
            session.burn(gap)
            yield

    return program


def victim_agent(session: AgentSession, spec: WorkloadSpec, daemon: bool = True) -> Agent:
    kind = "noise" if spec.kind == "noise" else "victim"
    return Agent(session, make_workload(spec), kind=kind, daemon=daemon)


def noise_agent(session: AgentSession, intensity: float, seed: int = 0) -> Agent:
    return Agent(session, make_noise_agent(intensity, seed), kind="noise", daemon=True)
