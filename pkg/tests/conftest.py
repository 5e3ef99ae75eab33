import pytest

from cy2mixer.topology import build_graph


@pytest.fixture
def triangle():
    return build_graph(3, [(0, 1, 1), (1, 2, 1), (2, 0, 1)])


@pytest.fixture
def k4():
    return build_graph(4, [(u, v, 1) for u in range(4) for v in range(u + 1, 4)])


@pytest.fixture
def ring6():
    return build_graph(6, [(i, (i + 1) % 6, 1.0) for i in range(6)])
