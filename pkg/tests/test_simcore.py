import os
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuleak import _kernels
from gpuleak.simcore import (
    AccessClass,
    Agent,
    CacheConfig,
    LatencyModel,
    NoNvlinkPath,
    OccupancyPolicy,
    PermissionViolation,
    Simulator,
    UnmappedAddress,
    ZERO_NOISE,
    build_topology,
    run_agents,
    set_index,
    symmetric,
)
from gpuleak.simcore.topology import DGX1_LINKS

from conftest import small_topology


def ref_lru(lines, num_sets, ways):
    """Independent reference: one recency-ordered dict per set."""
    sets = [OrderedDict() for _ in range(num_sets)]
    hits = []
    for line in lines:
        s = sets[line % num_sets]
        if line in s:
            s.move_to_end(line)
            hits.append(True)
        else:
            if len(s) == ways:
                s.popitem(last=False)
            s[line] = None
            hits.append(False)
    return hits, [list(reversed(s)) for s in sets]


def run_kernel(fn, lines, num_sets=8, ways=4, policy=0, remote=False, sigma=0.0, seed=1):
    tags = np.full((num_sets, ways), -1, dtype=np.int64)
    stamps = np.zeros((num_sets, ways), dtype=np.int64)
    clock = np.zeros(1, dtype=np.int64)
    lines = np.asarray(lines, dtype=np.int64)
    cyc = np.empty(len(lines), dtype=np.int64)
    cls = np.empty(len(lines), dtype=np.int8)
    means = np.array([270.0, 470.0, 650.0, 850.0])
    sigmas = np.full(4, sigma)
    repl = np.array([seed], dtype=np.uint64)
    rng = np.array([seed + 1], dtype=np.uint64)
    total = fn(tags, stamps, clock, lines, num_sets, policy, repl, remote, means, sigmas, 0.0, rng, cyc, cls)
    return total, tags, stamps, cyc, cls, repl, rng


# --- topology and config --------------------------------------------------

def test_dgx1_degree_four():
    topo = build_topology()
    assert all(topo.degree(g) == 4 for g in topo.gpu_ids)
    assert topo.adjacent(0, 1) and not topo.adjacent(0, 5)


def test_symmetric_links():
    links = symmetric(DGX1_LINKS)
    assert all((b, a) in links for a, b in links)


@pytest.mark.parametrize("kw", [dict(num_sets=100), dict(line_bytes=96), dict(ways=0), dict(policy="fifo")])
def test_cache_config_rejects(kw):
    with pytest.raises(ValueError):
        CacheConfig(**kw)


def test_set_index_linear():
    cfg = CacheConfig()
    assert set_index(0, cfg) == 0
    assert set_index(128 * 2049, cfg) == 1


def test_latency_model_scaled():
    m = LatencyModel().scaled(0.5, 0.0)
    assert m.sigmas == (6.0, 12.5, 10.0, 15.0)
    assert m.extra_sigma(16) == 0.0
    assert LatencyModel().extra_sigma(3) == 16.0


# --- kernel ---------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 63), min_size=1, max_size=200))
def test_kernel_matches_reference_lru(lines):
    _, tags, stamps, _, cls, _, _ = run_kernel(_kernels.chase, lines)
    hits, contents = ref_lru(lines, 8, 4)
    assert [c == AccessClass.LOCAL_L2_HIT for c in cls] == hits
    for s in range(8):
        order = np.argsort(-stamps[s], kind="stable")
        assert [int(tags[s, w]) for w in order if tags[s, w] != -1] == contents[s]


@pytest.mark.skipif(_kernels.compiled_chase is None, reason="compiled core not built")
@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=150), st.sampled_from([0, 1]),
       st.booleans(), st.integers(0, 2**32))
def test_backends_bit_identical(lines, policy, remote, seed):
    a = run_kernel(_kernels.python_chase, lines, policy=policy, remote=remote, sigma=25.0, seed=seed)
    b = run_kernel(_kernels.compiled_chase, lines, policy=policy, remote=remote, sigma=25.0, seed=seed)
    assert a[0] == b[0]
    for x, y in zip(a[1:], b[1:]):
        assert np.array_equal(x, y)


def test_random_policy_keeps_set_full():
    lines = list(range(0, 8 * 40, 8))  # all in set 0
    _, tags, _, _, cls, _, _ = run_kernel(_kernels.chase, lines, policy=1)
    assert (tags[0] != -1).all() and (cls == 1).all()


def test_latency_floor_and_truncation():
    _, _, _, cyc, _, _, _ = run_kernel(_kernels.chase, list(range(2000)), num_sets=4096, ways=1, sigma=25.0)
    assert cyc.min() >= 470 - 4 * 25 and cyc.max() <= 470 + 4 * 25


# --- simulator ------------------------------------------------------------

def test_remote_access_caches_at_home_only():
    sim = Simulator(latency=ZERO_NOISE)
    s = sim.new_session(1)
    s.enable_peer_access(0)
    alloc = s.allocate(0, 1 << 16)
    before = sim.caches[1].snapshot()
    b = s.access_many(alloc.base_vaddr + np.arange(64) * 128)
    assert (b.true_class == AccessClass.REMOTE_DRAM).all()
    assert all(np.array_equal(x, y) for x, y in zip(before, sim.caches[1].snapshot()))
    assert s.access(alloc.base_vaddr).true_class == AccessClass.REMOTE_L2_HIT


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 511)), min_size=1, max_size=120))
def test_numa_only_home_cache_mutates(ops):
    sim = Simulator(small_topology(), ZERO_NOISE)
    s = sim.new_session(1)
    s.enable_peer_access(0)
    local = s.allocate(1, 1 << 16)
    remote = s.allocate(0, 1 << 16)
    for is_remote, line in ops:
        alloc = remote if is_remote else local
        snap = {g: sim.caches[g].snapshot() for g in sim.caches if g != alloc.owner_gpu}
        s.access(alloc.base_vaddr + line * 128)
        for g, (t, st_) in snap.items():
            assert np.array_equal(t, sim.caches[g].tags) and np.array_equal(st_, sim.caches[g].stamps)
        assert sim.caches[alloc.owner_gpu].contains(int(sim._lines(alloc, np.array([line * 128]))[0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.permutations(range(4)))
def test_primed_lines_hit_in_any_order(k, perm):
    sim = Simulator(small_topology(), ZERO_NOISE)
    s = sim.new_session(0)
    alloc = s.allocate(0, 1 << 18)
    lines = sim.oracle_lines_in_set(alloc, 5, 4)[:k]
    s.access_many(lines)
    again = [lines[i] for i in perm if i < k]
    assert (s.access_many(again).true_class == AccessClass.LOCAL_L2_HIT).all()


def test_latency_separability():
    sim = Simulator(seed=3)
    s = sim.new_session(1)
    s.enable_peer_access(0)
    local = s.allocate(1, 1 << 22)
    remote = s.allocate(0, 1 << 22)
    cyc, cls = [], []
    for alloc in (local, remote):
        va = alloc.base_vaddr + np.arange(alloc.length // 128) * 128
        for _ in range(2):  # miss pass, then hit pass (32 Ki lines fit in L2)
            b = s.access_many(va)
            cyc.append(b.cycles)
            cls.append(b.true_class)
    cyc, cls = np.concatenate(cyc), np.concatenate(cls)
    assert len(cyc) >= 10**5
    pred = np.searchsorted(np.array(LatencyModel().midpoints()), cyc, side="left")
    assert np.mean(pred == cls) >= 0.999


def test_permissions():
    sim = Simulator()
    a = sim.new_session(0)
    b = sim.new_session(0)
    alloc = a.allocate(0, 4096)
    with pytest.raises(PermissionViolation):
        b.access(alloc.base_vaddr)
    with pytest.raises(PermissionViolation):
        a.allocate(1, 4096)
    with pytest.raises(NoNvlinkPath):
        a.enable_peer_access(5)
    with pytest.raises(UnmappedAddress):
        a.access(alloc.base_vaddr + alloc.length)
    assert a.spawn().access(alloc.base_vaddr).true_class == AccessClass.LOCAL_DRAM


def test_flush():
    sim = Simulator(latency=ZERO_NOISE)
    s = sim.new_session(0)
    alloc = s.allocate(0, 4096)
    pages = alloc.page_map.copy()
    s.access(alloc.base_vaddr)
    s.flush_caches()
    s.flush_caches()
    assert s.access(alloc.base_vaddr).true_class == AccessClass.LOCAL_DRAM
    assert np.array_equal(pages, alloc.page_map)


def test_same_seed_same_frames():
    f = [Simulator(seed=7).new_session(0).allocate(0, 1 << 20).page_map for _ in range(2)]
    assert np.array_equal(*f)
    assert not np.array_equal(f[0], Simulator(seed=8).new_session(0).allocate(0, 1 << 20).page_map)


def _pingpong(seed):
    sim = Simulator(small_topology(), seed=seed)
    agents = []
    for g in (0, 0, 1):
        s = sim.new_session(g)
        alloc = s.allocate(g, 1 << 15)

        def prog(sess, alloc=alloc):
            for i in range(40):
                sess.access_many(alloc.base_vaddr + (np.arange(8) + i) * 128)
                yield
        agents.append(Agent(s, prog))
    return run_agents(agents)


def test_scheduler_deterministic():
    a, b = _pingpong(4), _pingpong(4)
    assert a.trace == b.trace and a.end_cycle == b.end_cycle
    assert len(a.trace) == 3 * 40 * 8
    assert not a.trace == _pingpong(5).trace


def test_scheduler_daemon_and_occupancy():
    sim = Simulator(small_topology())
    calls = {"noise": 0}
    s1, s2 = sim.new_session(0), sim.new_session(0)

    def finite(s):
        for _ in range(5):
            s.burn(1000)
            yield

    def forever(s):
        while True:
            calls["noise"] += 1
            s.burn(500)
            yield

    res = run_agents([Agent(s1, finite), Agent(s2, forever, kind="noise", daemon=True)])
    assert res.finished == [s1.agent_id] and calls["noise"] > 0
    calls["noise"] = 0
    run_agents([Agent(sim.new_session(0), finite), Agent(sim.new_session(0), forever, kind="noise", daemon=True)],
               occupancy=OccupancyPolicy(exclusive=True))
    assert calls["noise"] == 0


def test_trace_csv():
    res = _pingpong(1)
    text = res.trace.to_csv()
    assert text.splitlines()[0].startswith("agent_id,timestamp,vaddr,cycles")
    assert len(text.splitlines()) == len(res.trace) + 1


def test_fallback_selected_by_env():
    import subprocess
    import sys
    env = {**os.environ, "GPULEAK_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from gpuleak import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
