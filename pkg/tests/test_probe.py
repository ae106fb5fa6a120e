import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuleak.probe import (
    CalibrationFailed,
    EvictionSet,
    IncompleteSet,
    LatencyThresholds,
    ProbeConfig,
    calibrate_latencies,
    discover_eviction_set,
    dump_eviction_sets,
    enumerate_unique_sets,
    evicts_target,
    kmeans_1d,
    load_eviction_sets,
    measure_associativity,
    test_alias as alias_check,
    thresholds_from_samples,
)
from gpuleak.scenario import build_world, spy_thresholds
from gpuleak.simcore import LatencyModel

from conftest import SMALL_LAYOUT, SMALL_PROBE, small_topology


@pytest.fixture
def small_thr(small_world):
    return spy_thresholds(small_world, SMALL_PROBE)


def oracle_set_of(world, es):
    return {world.sim.oracle_set(v) for v in [es.target_vaddr, *es.member_vaddrs]}


# --- thresholds -----------------------------------------------------------

def test_thresholds_validate():
    with pytest.raises(ValueError):
        LatencyThresholds((300, 290, 700), (270, 470, 650, 850))
    with pytest.raises(ValueError):
        LatencyThresholds((500, 560, 750), (270, 470, 650, 850))


def test_threshold_classify_and_roundtrip():
    t = LatencyThresholds((370, 560, 750), (270, 470, 650, 850))
    assert t.classify([270, 370, 371, 700, 900]).tolist() == [0, 0, 1, 2, 3]
    assert t.miss_threshold(True) == 750 and t.miss_threshold(False) == 370
    assert LatencyThresholds.from_dict(t.to_dict()) == t


def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(m, 5, 200) for m in (100, 300, 500, 700)])
    centres, stds, counts = kmeans_1d(x, 4)
    assert np.allclose(centres, [100, 300, 500, 700], atol=2)
    assert counts.tolist() == [200] * 4 and (stds < 8).all()


def test_calibration_fails_on_three_clusters():
    x = np.repeat([270.0, 470.0, 650.0], 100)
    with pytest.raises(CalibrationFailed):
        thresholds_from_samples(x)


def test_calibration_needs_samples(small_world):
    with pytest.raises(ValueError):
        calibrate_latencies(small_world.spy, small_world.spy_local, small_world.spy_remote, samples=10)


def test_calibration_orders_clusters(small_thr):
    m = small_thr.means
    assert m[0] < m[1] < m[2] < m[3]
    assert all(abs(a - b) < 10 for a, b in zip(m, LatencyModel().means))


# --- eviction sets --------------------------------------------------------

def test_eviction_set_json_roundtrip():
    sets = [EvictionSet(1, [2, 3, 4], 7), EvictionSet(10, [11, 12])]
    text = dump_eviction_sets(sets)
    assert load_eviction_sets(text) == sets
    buf = io.StringIO()
    dump_eviction_sets(sets, buf)
    buf.seek(0)
    assert load_eviction_sets(buf) == sets


def test_eviction_set_rejects_duplicates():
    with pytest.raises(ValueError):
        EvictionSet(0, [1, 1])


@pytest.mark.parametrize("offset", [0, 128 * 7, 1024 * 33 + 256])
def test_discovery_oracle_sound(small_world, small_thr, offset):
    es = discover_eviction_set(small_world.spy, small_world.spy_remote, offset, small_thr, SMALL_PROBE)
    assert len(es) == 4
    assert len(oracle_set_of(small_world, es)) == 1
    assert evicts_target(small_world.spy, es, small_thr)
    assert not evicts_target(small_world.spy, es, small_thr, k=3)


def test_discovery_budget_exhausted(small_world, small_thr):
    cfg = ProbeConfig(set_size=4, page_bytes=1024, search_budget=16)
    with pytest.raises(IncompleteSet) as err:
        discover_eviction_set(small_world.spy, small_world.spy_remote, 0, small_thr, cfg)
    assert err.value.found_count < 4


def test_default_discovery_and_policy(default_world):
    w = default_world
    thr = spy_thresholds(w)
    es = discover_eviction_set(w.spy, w.spy_remote, 0, thr, ProbeConfig())
    assert len(es) == 16 and len(oracle_set_of(w, es)) == 1
    rep = measure_associativity(w.spy, es, thr, trials=3)
    assert (rep.inferred_ways, rep.eviction_period, rep.policy_label) == (16, 16, "LRU-like")


def test_random_policy_detected():
    w = build_world(SMALL_LAYOUT, small_topology("random"))
    thr = spy_thresholds(w, SMALL_PROBE)
    set_id = w.sim.oracle_set(w.spy_remote.base_vaddr)[1]
    lines = w.sim.oracle_lines_in_set(w.spy_remote, set_id, 10)
    # random replacement needs about twice the associativity before eviction is certain
    es = EvictionSet(lines[0], lines[1:])
    rep = measure_associativity(w.spy, es, thr, trials=10)
    assert rep.policy_label == "random-like"


def test_alias_symmetric(small_world, small_thr):
    w = small_world
    alloc = w.spy_remote
    a = EvictionSet(*_split(w.sim.oracle_lines_in_set(alloc, 3, 5)))
    b = EvictionSet(*_split(w.sim.oracle_lines_in_set(alloc, 3, 10)[5:]))
    c = EvictionSet(*_split(w.sim.oracle_lines_in_set(alloc, 9, 5)))
    for x, y, want in ((a, b, True), (a, c, False), (b, c, False)):
        assert alias_check(w.spy, x, y, small_thr) == want
        assert alias_check(w.spy, y, x, small_thr) == want


def _split(lines):
    return lines[0], lines[1:]


def test_enumerate_small_all_sets(small_world, small_thr):
    sets = enumerate_unique_sets(small_world.spy, small_world.spy_remote, 64, small_thr, SMALL_PROBE)
    phys = [oracle_set_of(small_world, es) for es in sets]
    assert all(len(p) == 1 for p in phys)
    assert len({next(iter(p)) for p in phys}) == 64


def test_enumerate_one(small_world, small_thr):
    sets = enumerate_unique_sets(small_world.spy, small_world.spy_remote, 1, small_thr, SMALL_PROBE)
    assert len(sets) == 1
    assert enumerate_unique_sets(small_world.spy, small_world.spy_remote, 0, small_thr, SMALL_PROBE) == []


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2047))
def test_discovery_sound_for_random_targets(line):
    w = build_world(SMALL_LAYOUT, small_topology())
    thr = LatencyThresholds((370.0, 560.0, 750.0), (270.0, 470.0, 650.0, 850.0))
    es = discover_eviction_set(w.spy, w.spy_remote, line * 128, thr, SMALL_PROBE)
    assert len(oracle_set_of(w, es)) == 1
