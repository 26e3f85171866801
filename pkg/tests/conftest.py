import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedtrajrec.roadnet import RoadNetwork, generate_grid_network

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_network(rng, max_nodes=25, p_edge=0.2, extent=1000.0):
    """Random directed planar graph; may be disconnected."""
    n = int(rng.integers(2, max_nodes + 1))
    xy = rng.uniform(0, extent, size=(n, 2))
    edges = [(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < p_edge]
    if not edges:
        edges = [(0, 1)]
    return RoadNetwork(xy, edges)


@pytest.fixture
def lattice():
    return generate_grid_network(3, 3, 100.0, 0)


@pytest.fixture
def line_forward():
    # A(0,0) -> B(100,0) -> C(200,0), forward edges only
    return RoadNetwork([(0, 0), (100, 0), (200, 0)], [(0, 1), (1, 2)])


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record a PASS/FAIL line for an acceptance criterion.

    Usage: ``with acceptance(3, "aggregation oracle"): ...``
    """
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    class _Check:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"{status} criterion {self.number:>2}: {self.title}"
            if self.detail:
                line += f" ({self.detail})"
            if exc_type is not None and exc is not None:
                line += f" -- {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
            lines.append((self.number, line))
            print(line)
            return False

    return _Check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
