"""Root and directed-edge probabilities of a distribution over directed spanning trees.

Storage convention: directed edges are keyed ``(parent, child)``.  For the
canonical edge ``e = (u, v)``:

* ``rho_fwd[e]`` is the probability of the directed edge ``u -> v``
  (parent ``u``, child ``v``), written rho_{v|u} in the literature;
* ``rho_bwd[e]`` is the probability of ``v -> u`` (rho_{u|v}).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import Graph, ModelFormatError, fmt_float

__all__ = [
    "EdgeProbabilities",
    "DirectedTree",
    "TreeEnumerationTooLarge",
    "enumerate_directed_trees",
    "uniform_tree_probs",
    "probs_from_trees",
    "validate_probs",
    "parse_rho",
    "serialize_rho",
    "read_rho",
    "write_rho",
]

MAX_ENUM_VERTICES = 12


class TreeEnumerationTooLarge(ValueError):
    pass


@dataclass
class EdgeProbabilities:
    graph: Graph
    rho_root: np.ndarray
    rho_fwd: np.ndarray
    rho_bwd: np.ndarray

    def __post_init__(self):
        self.rho_root = np.asarray(self.rho_root, dtype=np.float64)
        self.rho_fwd = np.asarray(self.rho_fwd, dtype=np.float64)
        self.rho_bwd = np.asarray(self.rho_bwd, dtype=np.float64)
        if self.rho_root.shape != (self.graph.n,):
            raise ValueError("rho_root has wrong shape")
        if self.rho_fwd.shape != (self.graph.m,) or self.rho_bwd.shape != (self.graph.m,):
            raise ValueError("directed edge arrays have wrong shape")

    def dir(self, parent: int, child: int) -> float:
        """Probability that ``parent -> child`` appears in a tree (rho_{child|parent})."""
        e = self.graph.find_edge(parent, child)
        return float(self.rho_fwd[e] if parent < child else self.rho_bwd[e])

    def undirected(self) -> np.ndarray:
        """Edge appearance probability rho_{i|j} + rho_{j|i} per canonical edge."""
        return self.rho_fwd + self.rho_bwd

    def directed_items(self):
        """Yield ``(parent, child, value)`` for every directed edge."""
        for e, (u, v) in enumerate(self.graph.edges):
            yield u, v, float(self.rho_fwd[e])
            yield v, u, float(self.rho_bwd[e])


@dataclass(frozen=True)
class DirectedTree:
    """Spanning arborescence: ``parent[root] == -1``."""

    root: int
    parent: tuple[int, ...]

    def arcs(self):
        """``(parent, child)`` pairs."""
        return [(p, c) for c, p in enumerate(self.parent) if p >= 0]

    def is_valid(self, g: Graph) -> bool:
        n = g.n
        if len(self.parent) != n or not 0 <= self.root < n or self.parent[self.root] != -1:
            return False
        if sum(p >= 0 for p in self.parent) != n - 1:
            return False
        for c, p in enumerate(self.parent):
            if c != self.root and not (0 <= p < n and g.has_edge(p, c)):
                return False
        for c in range(n):
            seen, i = 0, c
            while i != self.root:
                i = self.parent[i]
                seen += 1
                if seen > n:
                    return False
        return True


def _orient(n: int, tree_edges, root: int) -> DirectedTree:
    adj = [[] for _ in range(n)]
    for a, b in tree_edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = [-1] * n
    stack, seen = [root], {root}
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                parent[j] = i
                stack.append(j)
    return DirectedTree(root, tuple(parent))


def _undirected_spanning_trees(g: Graph):
    """Brute force over (n-1)-edge subsets, keeping the acyclic ones."""
    n = g.n
    for subset in itertools.combinations(range(g.m), n - 1):
        comp = list(range(n))

        def find(a):
            while comp[a] != a:
                comp[a] = comp[comp[a]]
                a = comp[a]
            return a

        ok = True
        for e in subset:
            a, b = (find(x) for x in g.edges[e])
            if a == b:
                ok = False
                break
            comp[a] = b
        if ok:
            yield [g.edges[e] for e in subset]


def enumerate_directed_trees(g: Graph) -> list[DirectedTree]:
    """All directed spanning trees: every undirected spanning tree at every root."""
    if g.n > MAX_ENUM_VERTICES:
        raise TreeEnumerationTooLarge(f"refusing to enumerate trees of a {g.n}-vertex graph")
    if not g.is_connected():
        raise ValueError("graph is disconnected")
    trees = []
    for und in _undirected_spanning_trees(g):
        trees.extend(_orient(g.n, und, r) for r in range(g.n))
    return trees


def uniform_tree_probs(g: Graph) -> EdgeProbabilities:
    """rho for the uniform distribution over directed spanning trees.

    For each root r, the out-arborescence Laplacian L (``L[i, i]`` = in-degree,
    ``L[j, i] = -1`` per arc j->i) with row/column r removed has determinant
    equal to the number of arborescences at r, and the marginal of arc j->i is
    ``d log det / d w_ji = inv[i, i] - inv[i, j]`` (second term dropped when
    j is the root).  Every undirected tree yields exactly one arborescence per
    root, so averaging the per-root marginals with weight 1/n gives the
    uniform distribution over all directed trees.
    """
    if not g.is_connected():
        raise ValueError("graph is disconnected")
    n, m = g.n, g.m
    us = np.array([u for u, _ in g.edges], dtype=np.int64)
    vs = np.array([v for _, v in g.edges], dtype=np.int64)
    lap = np.zeros((n, n))
    lap[us, vs] = -1.0
    lap[vs, us] = -1.0
    lap[np.arange(n), np.arange(n)] = [len(a) for a in g.adjacency]

    fwd = np.zeros(m)
    bwd = np.zeros(m)
    for r in range(n):
        keep = np.array([i for i in range(n) if i != r], dtype=np.int64)
        minor = lap[np.ix_(keep, keep)]
        cond = np.linalg.cond(minor) if n > 1 else 1.0
        if cond > 1e12:
            warnings.warn(f"Laplacian minor for root {r} is ill-conditioned (cond={cond:.3g})")
        inv = np.zeros((n, n))
        if n > 1:
            inv[np.ix_(keep, keep)] = np.linalg.inv(minor)
        # rows/cols of the root are zero, so the root cases need no branching:
        # child == r gives 0, parent == r drops the off-diagonal term.
        fwd += inv[vs, vs] - inv[vs, us]
        bwd += inv[us, us] - inv[us, vs]
    fwd /= n
    bwd /= n
    return EdgeProbabilities(g, np.full(n, 1.0 / n), fwd, bwd)


def probs_from_trees(g: Graph, weighted_trees) -> EdgeProbabilities:
    """rho of an explicit distribution given as ``(DirectedTree, weight)`` pairs."""
    weighted_trees = list(weighted_trees)
    weights = np.array([w for _, w in weighted_trees], dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("tree weights must be non-negative")
    if abs(math.fsum(weights) - 1.0) > 1e-12:
        raise ValueError(f"tree weights sum to {math.fsum(weights)!r}, not 1")
    root = np.zeros(g.n)
    fwd = np.zeros(g.m)
    bwd = np.zeros(g.m)
    for t, w in weighted_trees:
        if len(t.parent) != g.n:
            raise ValueError("tree does not span the graph")
        root[t.root] += w
        for p, c in t.arcs():
            if not g.has_edge(p, c):
                raise ValueError(f"tree arc {p}->{c} is not a graph edge")
            e = g.find_edge(p, c)
            if p < c:
                fwd[e] += w
            else:
                bwd[e] += w
    return EdgeProbabilities(g, root, fwd, bwd)


def validate_probs(ep: EdgeProbabilities, g: Graph | None = None, strict_positive: bool = False) -> list[str]:
    """Report violated invariants of ``ep``; empty means valid.

    With ``strict_positive`` every root and arc probability must be > 0, which
    the dual objective needs since it divides by them.
    """
    g = ep.graph if g is None else g
    report = []
    if ep.rho_root.shape != (g.n,) or ep.rho_fwd.shape != (g.m,):
        return ["shape mismatch between probabilities and graph"]
    vals = np.concatenate([ep.rho_root, ep.rho_fwd, ep.rho_bwd])
    if not np.all(np.isfinite(vals)):
        report.append("non-finite probability")
    for i, r in enumerate(ep.rho_root):
        if r < 0:
            report.append(f"root {i}: negative probability {r!r}")
        elif strict_positive and not r > 0:
            report.append(f"root {i}: probability {r!r} is not strictly positive")
    for p, c, r in ep.directed_items():
        if r < 0:
            report.append(f"dir {p} {c}: negative probability {r!r}")
        elif strict_positive and not r > 0:
            report.append(f"dir {p} {c}: probability {r!r} is not strictly positive")
    mass = math.fsum(ep.rho_root)
    if abs(mass - 1.0) > 1e-12:
        report.append(f"root mass {mass:.12g} != 1")
    for i in range(g.n):
        total = ep.rho_root[i]
        for j, e in g.adjacency[i]:
            total += ep.rho_fwd[e] if j < i else ep.rho_bwd[e]
        if abs(total - 1.0) > 1e-10:
            report.append(f"vertex {i}: root + incoming probability {total:.12g} != 1")
    for e, (u, v) in enumerate(g.edges):
        if ep.rho_fwd[e] + ep.rho_bwd[e] > 1.0 + 1e-12:
            report.append(f"edge ({u}, {v}): both orientations sum to {ep.rho_fwd[e] + ep.rho_bwd[e]:.12g} > 1")
    return report


# ---------------------------------------------------------------------------
# TRWRHO text format


def serialize_rho(ep: EdgeProbabilities) -> str:
    out = ["TRWRHO 1"]
    out.extend(f"root {i} {fmt_float(r)}" for i, r in enumerate(ep.rho_root))
    out.extend(f"dir {p} {c} {fmt_float(r)}" for p, c, r in ep.directed_items())
    return "\n".join(out) + "\n"


def parse_rho(text, g: Graph) -> EdgeProbabilities:
    """Parse TRWRHO text against ``g``; every root and arc must appear exactly once."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    root = {}
    arcs = {}
    header = False
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if not header:
            if tok != ["TRWRHO", "1"]:
                raise ModelFormatError("malformed header, expected 'TRWRHO 1'", no)
            header = True
            continue
        try:
            if tok[0] == "root" and len(tok) == 3:
                key, val, table = int(tok[1]), float(tok[2]), root
                if not 0 <= key < g.n:
                    raise ModelFormatError(f"root {key} out of range", no)
            elif tok[0] == "dir" and len(tok) == 4:
                key, val, table = (int(tok[1]), int(tok[2])), float(tok[3]), arcs
                if not g.has_edge(*key):
                    raise ModelFormatError(f"dir {key[0]} {key[1]} is not a graph edge", no)
            else:
                raise ModelFormatError(f"unrecognised line {s!r}", no)
        except ValueError as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"bad number in {s!r}", no) from None
        if key in table:
            raise ModelFormatError(f"duplicate entry {s!r}", no)
        if not math.isfinite(val):
            raise ModelFormatError("non-finite value", no)
        table[key] = val
    if not header:
        raise ModelFormatError("empty input, expected 'TRWRHO 1'")
    missing = [i for i in range(g.n) if i not in root]
    if missing:
        raise ModelFormatError(f"missing 'root {missing[0]}' entry")
    fwd = np.zeros(g.m)
    bwd = np.zeros(g.m)
    for e, (u, v) in enumerate(g.edges):
        for p, c, arr in ((u, v, fwd), (v, u, bwd)):
            if (p, c) not in arcs:
                raise ModelFormatError(f"missing 'dir {p} {c}' entry")
            arr[e] = arcs[(p, c)]
    return EdgeProbabilities(g, np.array([root[i] for i in range(g.n)]), fwd, bwd)


def read_rho(path, g: Graph) -> EdgeProbabilities:
    with open(path, "rb") as fh:
        return parse_rho(fh.read(), g)


def write_rho(ep: EdgeProbabilities, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_rho(ep))
