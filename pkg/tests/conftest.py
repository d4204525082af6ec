import numpy as np
import pytest

from polyagg.graph import Graph


def random_graph(rng, n, p=0.4, connected=False):
    """Erdos-Renyi graph; with ``connected`` a random spanning path is added."""
    a = np.triu(rng.random((n, n)) < p, 1)
    if connected:
        order = rng.permutation(n)
        a[np.minimum(order[:-1], order[1:]), np.maximum(order[:-1], order[1:])] = True
    i, j = np.nonzero(a)
    return Graph.from_edges(n, np.column_stack([i, j]))


def dense_adjacency(g):
    return g.adjacency.toarray()


def two_cliques(k, bridge=True):
    """Two K_k joined by a single bridge edge (nodes 0..k-1 and k..2k-1)."""
    edges = [(i, j) for i in range(k) for j in range(i + 1, k)]
    edges += [(i + k, j + k) for i, j in edges]
    if bridge:
        edges.append((k - 1, k))
    return Graph.from_edges(2 * k, edges)


def path_graph(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle_graph(n):
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def lattice_graph(rows, cols):
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return Graph.from_edges(rows * cols, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------------------
_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, ok, detail):
        status = "N/A " if ok is None else ("PASS" if ok else "FAIL")
        lines[number] = f"criterion {number:>2}: {status}  {detail}"
        print(lines[number])
        assert ok is None or ok, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
