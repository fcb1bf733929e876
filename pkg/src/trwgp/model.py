"""Pairwise MRF data model, Ising grid generation and the TRWMRF text format.

All potentials are natural-log tables (float64).  Edges are stored in
canonical orientation ``(u, v)`` with ``u < v``; an edge table is indexed
``[x_u, x_v]``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Graph",
    "PairwiseMRF",
    "IsingSpec",
    "ModelFormatError",
    "grid_graph",
    "gen_ising_grid",
    "assignment_score",
    "validate_model",
    "parse_model",
    "serialize_model",
    "read_model",
    "write_model",
    "fmt_float",
]


def fmt_float(x: float) -> str:
    """17 significant digits; enough for an exact float64 round-trip."""
    return format(float(x), ".17g")


class ModelFormatError(ValueError):
    """Raised for malformed TRWMRF text; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Graph:
    """Undirected simple graph with canonical edge list and adjacency.

    ``adjacency[i]`` is a list of ``(neighbor, edge_index)`` pairs in edge
    order.  Structural problems (self-loops, duplicates, bad indices,
    non-canonical orientation) raise ``ValueError``; connectivity is checked
    separately because a disconnected graph is still a valid object to
    report on.
    """

    def __init__(self, n: int, edges):
        n = int(n)
        if n < 1:
            raise ValueError("graph needs at least one vertex")
        self.n = n
        self.edges: list[tuple[int, int]] = []
        self.edge_index: dict[tuple[int, int], int] = {}
        self.adjacency: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) has a vertex outside [0, {n})")
            if u == v:
                raise ValueError(f"self-loop at vertex {u}")
            if u > v:
                raise ValueError(f"edge ({u}, {v}) not in canonical orientation")
            if (u, v) in self.edge_index:
                raise ValueError(f"duplicate edge ({u}, {v})")
            e = len(self.edges)
            self.edges.append((u, v))
            self.edge_index[(u, v)] = e
            self.adjacency[u].append((v, e))
            self.adjacency[v].append((u, e))

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def find_edge(self, a: int, b: int) -> int:
        """Index of the undirected edge {a, b}; KeyError if absent."""
        return self.edge_index[(a, b) if a < b else (b, a)]

    def has_edge(self, a: int, b: int) -> bool:
        return ((a, b) if a < b else (b, a)) in self.edge_index

    def components(self) -> list[list[int]]:
        seen = [False] * self.n
        comps = []
        for s in range(self.n):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [], deque([s])
            while queue:
                i = queue.popleft()
                comp.append(i)
                for j, _ in self.adjacency[i]:
                    if not seen[j]:
                        seen[j] = True
                        queue.append(j)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) == 1

    def __eq__(self, other):
        return isinstance(other, Graph) and self.n == other.n and self.edges == other.edges

    def __repr__(self):
        return f"Graph(n={self.n}, m={self.m})"


@dataclass
class PairwiseMRF:
    """Graph plus log-domain node and edge potential tables."""

    graph: Graph
    node_pot: list[np.ndarray]
    edge_pot: list[np.ndarray]
    cards: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        g = self.graph
        if len(self.node_pot) != g.n:
            raise ValueError(f"expected {g.n} node tables, got {len(self.node_pot)}")
        if len(self.edge_pot) != g.m:
            raise ValueError(f"expected {g.m} edge tables, got {len(self.edge_pot)}")
        self.node_pot = [np.asarray(t, dtype=np.float64).reshape(-1) for t in self.node_pot]
        self.edge_pot = [np.asarray(t, dtype=np.float64) for t in self.edge_pot]
        self.cards = tuple(len(t) for t in self.node_pot)
        for e, (u, v) in enumerate(g.edges):
            shape = (self.cards[u], self.cards[v])
            if self.edge_pot[e].shape != shape:
                raise ValueError(
                    f"edge ({u}, {v}) table has shape {self.edge_pot[e].shape}, expected {shape}"
                )

    @property
    def n(self) -> int:
        return self.graph.n

    @classmethod
    def zeros(cls, graph: Graph, cards) -> "PairwiseMRF":
        if isinstance(cards, int):
            cards = [cards] * graph.n
        node = [np.zeros(k) for k in cards]
        edge = [np.zeros((cards[u], cards[v])) for u, v in graph.edges]
        return cls(graph, node, edge)

    def edge_table(self, a: int, b: int) -> np.ndarray:
        """Edge potential indexed ``[x_a, x_b]`` regardless of storage order."""
        t = self.edge_pot[self.graph.find_edge(a, b)]
        return t if a < b else t.T


@dataclass(frozen=True)
class IsingSpec:
    rows: int
    cols: int
    alpha_field: float
    alpha_inter: float
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError("grid needs rows, cols >= 1 and at least two vertices")
        if self.alpha_field < 0 or self.alpha_inter < 0:
            raise ValueError("alpha ranges must be non-negative")


def grid_graph(rows: int, cols: int) -> Graph:
    """4-neighbour grid; vertex ``r * cols + c``, edges sorted lexicographically."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return Graph(rows * cols, sorted(edges))


# state 0 -> spin +1, state 1 -> spin -1
_SPIN = np.array([1.0, -1.0])


def gen_ising_grid(spec: IsingSpec) -> PairwiseMRF:
    """Random-field, random-coupling Ising model on a grid.

    Draws come from ``numpy.random.Generator(PCG64(seed))``: first the
    ``rows*cols`` fields ``h ~ U[-alpha_field, alpha_field]`` in vertex order,
    then one coupling ``w ~ U[-alpha_inter, alpha_inter]`` per edge in
    canonical edge order.  Tables are ``theta_i = h_i * s`` and
    ``theta_uv = w_uv * s s^T`` with ``s = (+1, -1)``.
    """
    g = grid_graph(spec.rows, spec.cols)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h = rng.uniform(-spec.alpha_field, spec.alpha_field, size=g.n)
    w = rng.uniform(-spec.alpha_inter, spec.alpha_inter, size=g.m)
    node = [hi * _SPIN for hi in h]
    edge = [wi * np.outer(_SPIN, _SPIN) for wi in w]
    return PairwiseMRF(g, node, edge)


def assignment_score(mrf: PairwiseMRF, x) -> float:
    """Unnormalized log-probability of the full assignment ``x``."""
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (mrf.n,):
        raise ValueError(f"assignment must have {mrf.n} entries")
    for i, (xi, k) in enumerate(zip(x, mrf.cards)):
        if not 0 <= xi < k:
            raise ValueError(f"state {xi} out of range for vertex {i} (k={k})")
    s = math.fsum(mrf.node_pot[i][x[i]] for i in range(mrf.n))
    s += math.fsum(mrf.edge_pot[e][x[u], x[v]] for e, (u, v) in enumerate(mrf.graph.edges))
    return s


def validate_model(mrf: PairwiseMRF) -> list[str]:
    """Every violated model invariant, as readable strings. Empty means valid."""
    report = []
    g = mrf.graph
    for i, t in enumerate(mrf.node_pot):
        if t.size < 2:
            report.append(f"vertex {i}: cardinality {t.size} < 2")
        for idx in np.flatnonzero(~np.isfinite(t)):
            report.append(f"nodepot {i}[{idx}] is not finite ({t[idx]})")
    for e, (u, v) in enumerate(g.edges):
        t = mrf.edge_pot[e]
        for a, b in zip(*np.nonzero(~np.isfinite(t))):
            report.append(f"edgepot ({u}, {v})[{a}, {b}] is not finite ({t[a, b]})")
    comps = g.components()
    if len(comps) > 1:
        report.append(f"disconnected: {len(comps)} components")
    return report


# ---------------------------------------------------------------------------
# TRWMRF text format


def serialize_model(mrf: PairwiseMRF) -> str:
    g = mrf.graph
    out = ["TRWMRF 1", f"nodes {g.n}", "cards " + " ".join(str(k) for k in mrf.cards)]
    out.append(f"edges {g.m}")
    out.extend(f"{u} {v}" for u, v in g.edges)
    for i, t in enumerate(mrf.node_pot):
        out.append(f"nodepot {i} " + " ".join(fmt_float(x) for x in t))
    for e, (u, v) in enumerate(g.edges):
        vals = " ".join(fmt_float(x) for x in mrf.edge_pot[e].ravel())
        out.append(f"edgepot {u} {v} {vals}")
    return "\n".join(out) + "\n"


def _content_lines(text: str):
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield no, s.split()


def _ints(tokens, no):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ModelFormatError(f"expected integers, got {' '.join(tokens)!r}", no) from None


def _floats(tokens, no):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ModelFormatError(f"expected numbers, got {' '.join(tokens)!r}", no) from None
    if not all(math.isfinite(x) for x in vals):
        raise ModelFormatError("non-finite value", no)
    return vals


def parse_model(text) -> PairwiseMRF:
    """Parse TRWMRF text (str or bytes) into a validated model."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    lines = list(_content_lines(text))
    pos = 0

    def take(keyword):
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"unexpected end of input, expected {keyword!r}")
        no, tok = lines[pos]
        pos += 1
        if keyword is not None and tok[0] != keyword:
            raise ModelFormatError(f"expected {keyword!r}, got {tok[0]!r}", no)
        return no, tok

    no, tok = take("TRWMRF")
    if tok != ["TRWMRF", "1"]:
        raise ModelFormatError("malformed header, expected 'TRWMRF 1'", no)
    no, tok = take("nodes")
    if len(tok) != 2:
        raise ModelFormatError("malformed 'nodes' line", no)
    (n,) = _ints(tok[1:], no)
    if n < 1:
        raise ModelFormatError("node count must be positive", no)
    no, tok = take("cards")
    cards = _ints(tok[1:], no)
    if len(cards) != n:
        raise ModelFormatError(f"expected {n} cardinalities, got {len(cards)}", no)
    if any(k < 2 for k in cards):
        raise ModelFormatError("cardinalities must be >= 2", no)
    no, tok = take("edges")
    if len(tok) != 2:
        raise ModelFormatError("malformed 'edges' line", no)
    (m,) = _ints(tok[1:], no)
    if m < 0:
        raise ModelFormatError("edge count must be non-negative", no)

    edges, edge_lines = [], []
    for _ in range(m):
        no, tok = take(None)
        if len(tok) != 2:
            raise ModelFormatError("edge line must be 'u v'", no)
        u, v = _ints(tok, no)
        if not (0 <= u < n and 0 <= v < n):
            raise ModelFormatError(f"edge ({u}, {v}) out of range", no)
        if u == v:
            raise ModelFormatError(f"self-loop at vertex {u}", no)
        if u > v:
            raise ModelFormatError(f"edge ({u}, {v}) not in canonical orientation", no)
        if (u, v) in edges:
            raise ModelFormatError(f"duplicate edge ({u}, {v})", no)
        edges.append((u, v))
        edge_lines.append(no)
    graph = Graph(n, edges)
    if not graph.is_connected():
        raise ModelFormatError("graph is disconnected", edge_lines[-1] if edge_lines else no)

    node_pot = []
    for i in range(n):
        no, tok = take("nodepot")
        if len(tok) < 2 or _ints(tok[1:2], no)[0] != i:
            raise ModelFormatError(f"expected 'nodepot {i} ...'", no)
        vals = _floats(tok[2:], no)
        if len(vals) != cards[i]:
            raise ModelFormatError(f"nodepot {i}: expected {cards[i]} values, got {len(vals)}", no)
        node_pot.append(np.array(vals))

    edge_pot = []
    for u, v in edges:
        no, tok = take("edgepot")
        if len(tok) < 3 or _ints(tok[1:3], no) != [u, v]:
            raise ModelFormatError(f"expected 'edgepot {u} {v} ...'", no)
        vals = _floats(tok[3:], no)
        if len(vals) != cards[u] * cards[v]:
            raise ModelFormatError(
                f"edgepot {u} {v}: expected {cards[u] * cards[v]} values, got {len(vals)}", no
            )
        edge_pot.append(np.array(vals).reshape(cards[u], cards[v]))

    if pos != len(lines):
        raise ModelFormatError("trailing content", lines[pos][0])
    return PairwiseMRF(graph, node_pot, edge_pot)


def read_model(path) -> PairwiseMRF:
    with open(path, "rb") as fh:
        return parse_model(fh.read())


def write_model(mrf: PairwiseMRF, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_model(mrf))
