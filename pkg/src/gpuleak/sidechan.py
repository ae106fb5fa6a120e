"""Memorygram side channel: watch remote L2 sets, fingerprint what runs there.

The spy scans its monitored eviction sets once per epoch and counts, per
set, how many of its own lines were evicted since the previous scan. Scans
alternate direction so a single foreign line costs one miss instead of
cascading through the whole set under LRU.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .probe import EvictionSet, LatencyThresholds, _is_remote
from .scenario import Layout, build_world, probe_config_for, spy_sets, spy_thresholds
from .simcore import Agent, AgentSession, LatencyModel, OccupancyPolicy, Topology, run_agents
from .workloads import WorkloadSpec, noise_agent, victim_agent

SCHEMA_VERSION = 1
PROFILE_BINS = 64


class TrainingDataInsufficient(ValueError):
    pass


class EmptyCalibration(ValueError):
    pass


@dataclass
class Memorygram:
    matrix: np.ndarray  # [set, epoch] miss counts
    set_ids: list[int]
    epoch_cycles: int
    ways: int = 16
    epoch_starts: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64).reshape(len(self.set_ids), -1)
        if self.matrix.size and (self.matrix.min() < 0 or self.matrix.max() > self.ways):
            raise ValueError(f"miss counts must lie in 0..{self.ways}")

    @property
    def num_epochs(self) -> int:
        return self.matrix.shape[1]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["set_id", "epoch", "miss_count"])
        for i, sid in enumerate(self.set_ids):
            for e, v in enumerate(self.matrix[i].tolist()):
                w.writerow([sid, e, v])
        return out.getvalue()

    def to_pgm(self, min_misses: int = 1) -> bytes:
        """Binary P5 image: rows are sets, columns epochs, white where misses occurred."""
        img = np.where(self.matrix >= min_misses, 255, 0).astype(np.uint8)
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "set_ids": list(self.set_ids),
                "epoch_cycles": self.epoch_cycles, "ways": self.ways, "matrix": self.matrix.tolist()}


def collect_memorygram(spy_session: AgentSession, monitored_sets: list[EvictionSet], num_epochs: int | None,
                       epoch_cycles: int, thresholds: LatencyThresholds, victims: list[Agent] = (),
                       occupancy: OccupancyPolicy | None = None, set_ids: list[int] | None = None) -> Memorygram:
    """Run the spy alongside ``victims`` and record one column per epoch.

    Epoch ``e`` starts at ``t0 + e * epoch_cycles`` or when the previous scan
    ends, whichever is later. Column 0 is the cold priming pass. With
    ``num_epochs=None`` the spy keeps scanning until every non-daemon victim
    finishes; an unfinished final scan is dropped.
    """
    if not monitored_sets:
        raise ValueError("need at least one monitored set")
    chains = [spy_session.prepare(es.member_vaddrs) for es in monitored_sets]
    rchains = [spy_session.prepare(es.member_vaddrs[::-1]) for es in monitored_sets]
    thr = [thresholds.miss_threshold(_is_remote(spy_session, es.member_vaddrs[0])) for es in monitored_sets]
    ways = max(len(es) for es in monitored_sets)
    cols: list[list[int]] = []
    starts: list[int] = []
    t0 = spy_session.cycles

    def program(s: AgentSession) -> Iterator[None]:
        e = 0
        while num_epochs is None or e < num_epochs:
            s.wait_until(t0 + e * epoch_cycles)
            start = s.cycles
            yield
            col = []
            use = chains if e % 2 == 0 else rchains
            for ch, th in zip(use, thr):
                col.append(int(np.count_nonzero(s.run_chain(ch) > th)))
                yield
            cols.append(col)
            starts.append(start)
            e += 1

    spy = Agent(spy_session, program, kind="spy", daemon=num_epochs is None)
    if num_epochs is None and not any(not v.daemon for v in victims):
        raise ValueError("num_epochs=None needs a finite (non-daemon) victim")
    run_agents([spy, *victims], record=False, occupancy=occupancy)
    mat = np.array(cols, dtype=np.int64).T if cols else np.zeros((len(monitored_sets), 0), dtype=np.int64)
    ids = list(range(len(monitored_sets))) if set_ids is None else list(set_ids)
    return Memorygram(mat, ids, epoch_cycles, ways, starts)


# --- features and classifier --------------------------------------------

@dataclass
class FeatureVector:
    per_set: np.ndarray
    total: float
    profile: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.per_set, [self.total], self.profile]).astype(np.float64)


def resample(x: np.ndarray, bins: int = PROFILE_BINS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(bins)
    if len(x) == 1:
        return np.full(bins, x[0])
    return np.interp(np.linspace(0, len(x) - 1, bins), np.arange(len(x)), x)


def extract_features(mg: Memorygram, bins: int = PROFILE_BINS) -> FeatureVector:
    if mg.matrix.size == 0:
        raise ValueError("empty memorygram")
    per_set = mg.matrix.sum(axis=1).astype(np.float64)
    return FeatureVector(per_set, float(per_set.sum()), resample(mg.matrix.sum(axis=0), bins))


@dataclass
class FingerprintModel:
    labels: list[str]
    centroids: np.ndarray  # normalised, one row per label
    mean: np.ndarray
    scale: np.ndarray
    k: int = 1

    def normalise(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.mean.shape:
            raise ValueError(f"feature length {x.shape[0]} does not match model ({self.mean.shape[0]})")
        return (x - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "labels": list(self.labels), "k": self.k,
                "centroids": self.centroids.tolist(), "mean": self.mean.tolist(),
                "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintModel":
        return cls(list(d["labels"]), np.array(d["centroids"]), np.array(d["mean"]),
                   np.array(d["scale"]), int(d.get("k", 1)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def train_fingerprint(labeled: list[tuple[str, Memorygram]], min_samples: int = 5) -> FingerprintModel:
    """Per-label centroids of z-scored feature vectors."""
    if not labeled:
        raise TrainingDataInsufficient("no training data")
    by_label: dict[str, list[np.ndarray]] = {}
    for label, mg in labeled:
        by_label.setdefault(str(label), []).append(extract_features(mg).as_array())
    short = sorted(lb for lb, xs in by_label.items() if len(xs) < min_samples)
    if short:
        raise TrainingDataInsufficient(f"fewer than {min_samples} samples for labels {short}")
    labels = sorted(by_label)
    # sum in label order so the model does not depend on input order
    all_x = np.stack([x for lb in labels for x in sorted(by_label[lb], key=lambda a: a.tobytes())])
    mean = all_x.mean(axis=0)
    scale = all_x.std(axis=0)
    scale[scale == 0] = 1.0
    cents = np.stack([((np.stack(sorted(by_label[lb], key=lambda a: a.tobytes())) - mean) / scale).mean(axis=0)
                      for lb in labels])
    return FingerprintModel(labels, cents, mean, scale)


def classify(model: FingerprintModel, mg: Memorygram) -> tuple[str, float]:
    """Nearest centroid; margin ``(d2 - d1) / d2`` between the two nearest."""
    z = model.normalise(extract_features(mg).as_array())
    d = np.sqrt(((model.centroids - z) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")  # labels are sorted, so ties go to the smallest
    d1 = d[order[0]]
    if len(d) < 2:
        return model.labels[order[0]], 1.0
    d2 = d[order[1]]
    return model.labels[order[0]], float((d2 - d1) / d2) if d2 > 0 else 0.0


# --- hidden-layer size ---------------------------------------------------

@dataclass(frozen=True)
class NeuronEstimate:
    estimated_class: int
    observed_total_misses: float
    calibration_table: dict

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "estimated_class": self.estimated_class,
                "observed_total_misses": self.observed_total_misses,
                "calibration_table": {str(k): v for k, v in sorted(self.calibration_table.items())}}


def build_calibration_table(totals: dict[int, list[float]], min_runs: int = 3) -> dict[int, float]:
    if not totals:
        raise EmptyCalibration("no calibration runs")
    short = sorted(k for k, v in totals.items() if len(v) < min_runs)
    if short:
        raise TrainingDataInsufficient(f"fewer than {min_runs} calibration runs for sizes {short}")
    return {int(k): float(np.mean(v)) for k, v in sorted(totals.items())}


def estimate_hidden_neurons(mg_or_total, calibration_table: dict[int, float]) -> NeuronEstimate:
    if not calibration_table:
        raise EmptyCalibration("empty calibration table")
    total = float(mg_or_total.matrix.sum()) if isinstance(mg_or_total, Memorygram) else float(mg_or_total)
    best = min(sorted(calibration_table), key=lambda k: abs(total - calibration_table[k]))
    return NeuronEstimate(int(best), total, dict(calibration_table))


def temporal_autocorrelation(mg: Memorygram, skip_warmup: bool = True) -> np.ndarray:
    """Pearson correlation of the per-epoch miss totals with themselves at each lag."""
    x = mg.matrix.sum(axis=0).astype(np.float64)
    if skip_warmup:
        x = x[1:]
    out = np.zeros(max(len(x) - 1, 0))
    for lag in range(len(out)):
        a, b = x[:len(x) - lag], x[lag:]
        if len(a) < 2 or a.std() == 0 or b.std() == 0:
            continue
        out[lag] = np.corrcoef(a, b)[0, 1]
    return out


def autocorrelation_peak(ac: np.ndarray) -> int:
    """Lag of the highest correlation after the first non-positive value.

    Lags past three quarters of the series are ignored: their correlations
    rest on too few overlapping samples.
    """
    stop = (3 * (len(ac) + 1)) // 4 + 1
    neg = np.flatnonzero(ac[:stop] <= 0)
    if len(neg) == 0:
        return 0
    start = int(neg[0])
    return start + int(np.argmax(ac[start:stop]))


# --- end-to-end runs ------------------------------------------------------

@dataclass(frozen=True)
class MonitorConfig:
    monitored_sets: int = 64
    num_epochs: int | None = 32
    epoch_cycles: int = 50000
    noise_intensity: float = 0.0
    exclusive: bool = False
    selection: str = "spread"  # or "first": the first sets in enumeration order

    def __post_init__(self):
        if self.selection not in ("spread", "first"):
            raise ValueError(f"unknown set selection {self.selection!r}")
        if self.monitored_sets < 1 or self.epoch_cycles < 1:
            raise ValueError("monitored_sets and epoch_cycles must be positive")


def choose_sets(pool: list[EvictionSet], count: int, selection: str = "spread") -> list[int]:
    """Indices into ``pool``: evenly spaced, or simply the first ``count``."""
    if count > len(pool):
        raise ValueError(f"asked for {count} monitored sets, only {len(pool)} known")
    if selection == "first":
        return list(range(count))
    return [i * len(pool) // count for i in range(count)]


def record_workload(spec: WorkloadSpec, noise_seed: int = 0, monitor: MonitorConfig = MonitorConfig(),
                    layout: Layout = Layout(), topology: Topology | None = None,
                    latency: LatencyModel | None = None, setup_latency: LatencyModel | None = None) -> Memorygram:
    """Memorygram of one victim run on the layout's target GPU.

    Eviction sets come from a cached setup world under ``setup_latency``.
    """
    world = build_world(layout, topology, latency, noise_seed=noise_seed)
    pool = spy_sets(layout, topology, world.sim.caches[layout.target_gpu].config.num_sets,
                    latency=setup_latency)
    ids = choose_sets(pool, monitor.monitored_sets, monitor.selection)
    thr = spy_thresholds(world, probe_config_for(world))
    world.sim.flush_caches()
    sim = world.sim
    victim = sim.new_session(layout.target_gpu, start_cycle=world.spy.cycles)
    agents = [victim_agent(victim, spec, daemon=monitor.num_epochs is not None)]
    if monitor.noise_intensity > 0:
        ns = sim.new_session(layout.target_gpu, start_cycle=world.spy.cycles)
        agents.append(noise_agent(ns, monitor.noise_intensity, noise_seed))
    victim.wait_until(world.spy.cycles)
    return collect_memorygram(world.spy, [pool[i] for i in ids], monitor.num_epochs, monitor.epoch_cycles,
                              thr, agents, OccupancyPolicy(monitor.exclusive), ids)
