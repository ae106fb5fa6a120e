import sys

import pytest

from gpuleak.probe import ProbeConfig
from gpuleak.scenario import Layout, build_world
from gpuleak.simcore import CacheConfig, build_topology

SMALL_CACHE = CacheConfig(line_bytes=128, num_sets=64, ways=4)
SMALL_PAGE = 1024


def small_topology(policy: str = "lru"):
    cache = CacheConfig(128, 64, 4, policy)
    return build_topology(cache=cache, dram_bytes=1 << 26, page_bytes=SMALL_PAGE)


SMALL_LAYOUT = Layout(alloc_bytes=256 * 1024)
SMALL_PROBE = ProbeConfig(set_size=4, page_bytes=SMALL_PAGE)


@pytest.fixture
def small_world():
    return build_world(SMALL_LAYOUT, small_topology())


@pytest.fixture(scope="session")
def default_world():
    return build_world()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
