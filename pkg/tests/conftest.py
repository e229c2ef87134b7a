import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mpssm.graph import Graph, gen_graph

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def graphs(draw, min_n=1, max_n=12, connected=False):
    """Random simple graphs; with ``connected`` a random spanning tree is added first."""
    n = draw(st.integers(min_n, max_n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    if connected and n > 1:
        parents = draw(st.lists(st.integers(0, n), min_size=n - 1, max_size=n - 1))
        edges = edges + [(p % (i + 1), i + 1) for i, p in enumerate(parents)]
    return Graph.from_edges(n, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    return gen_graph("erdos_renyi", 7, require_connected=True, n=10, p=0.3)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
