import numpy as np
import pytest

from pscsb.sem_core import AdjacencyMatrix, DistSegment, Scenario


def make_scenario(K=4, T=200, m=2, mu=None, graphs=None, dist=None, grouping=None,
                  noise_scale=0.0, c=None):
    """Small hand-built scenario; ``dist`` is a list of (start, mu)."""
    if graphs is None:
        graphs = [(1, AdjacencyMatrix.zeros(K))]
    if dist is None:
        dist = [(1, np.linspace(0.2, 0.8, K) if mu is None else mu)]
    if grouping is None:
        grouping = (tuple(range(K)),)
    return Scenario(
        K=K, T=T, m=m,
        c=np.ones(K) if c is None else np.asarray(c, dtype=float),
        graph_segments=tuple(graphs),
        dist_segments=tuple(DistSegment(s, np.asarray(v, dtype=float), noise_scale) for s, v in dist),
        grouping=tuple(tuple(g) for g in grouping),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one verdict line; all lines are repeated in the terminal summary."""
    lines = request.config.acceptance_lines

    def emit(line):
        lines.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
