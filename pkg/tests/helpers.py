"""Random model and graph builders shared by the test modules."""

import numpy as np

from trwgp.dual import DualState
from trwgp.model import Graph, PairwiseMRF


def random_tree_edges(n, rng):
    """Uniformly attached random tree: vertex i > 0 hooks onto a random earlier vertex."""
    edges = []
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges.append((min(i, j), max(i, j)))
    return sorted(edges)


def random_connected_graph(n, rng, extra=2):
    """Random spanning tree plus up to ``extra`` additional edges."""
    edges = set(random_tree_edges(n, rng))
    candidates = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in edges]
    if candidates and extra:
        pick = rng.choice(len(candidates), size=min(extra, len(candidates)), replace=False)
        edges.update(candidates[k] for k in pick)
    return Graph(n, sorted(edges))


def random_mrf(graph, rng, cards=2, scale=2.0):
    """Potentials drawn from U[-scale, scale]; ``cards`` is an int or a per-vertex sequence."""
    if isinstance(cards, int):
        cards = [cards] * graph.n
    node = [rng.uniform(-scale, scale, size=k) for k in cards]
    edge = [rng.uniform(-scale, scale, size=(cards[u], cards[v])) for u, v in graph.edges]
    return PairwiseMRF(graph, node, edge)


def random_state(mrf, ep, rng, scale=1.0):
    st = DualState(mrf, ep)
    for e in range(mrf.graph.m):
        st.set_beta(e, rng.normal(scale=scale, size=st.beta[e].shape))
    return st
