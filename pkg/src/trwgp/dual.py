"""Dual of the tree-reweighted free energy and the primal-side evaluators.

Conventions, for canonical edge ``e = (u, v)``:

* ``beta[e]`` is a ``(k_u, k_v)`` table.  The sign attached to beta is
  ``+1`` for the copy conditioned on ``v`` and ``-1`` for the copy
  conditioned on ``u``.
* "forward" objects belong to the arc ``u -> v``: ``rho_fwd``, the
  conditional ``mu_{v|u}(x_v | x_u)`` (rows ``x_u``) and its log-normalizer
  ``lambda_{v|u}(x_u)``.  "backward" objects belong to ``v -> u``.
* Each directed copy carries half of the edge potential, so the two copies
  together account for ``theta_uv`` exactly once.  Any other split differs
  by a translation of beta; the half split makes ``beta = 0`` the symmetric
  starting point.

Dual objective::

    F_D(beta) = sum_i rho_o[i] * lse_{x_i}((theta_i - sum_k lambda_{k|i}) / rho_o[i])
    lambda_{v|u}(x_u) = -rho_fwd * lse_{x_v}((theta_uv / 2 - beta) / rho_fwd)
    lambda_{u|v}(x_v) = -rho_bwd * lse_{x_u}((theta_uv / 2 + beta) / rho_bwd)

``F_D(beta) >= log Z`` for every beta, with equality at the optimum on trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Graph, PairwiseMRF
from .spanning import DirectedTree, EdgeProbabilities

__all__ = [
    "lse",
    "DualState",
    "PrimalMarginals",
    "lambda_table",
    "dual_objective",
    "dual_gradient",
    "to_primal",
    "copy_discrepancy",
    "optimality_residual",
    "primal_objective",
    "tree_entropy",
    "consistency_check",
    "entropy",
]


def lse(a: np.ndarray, axis=None, keepdims: bool = False):
    """log-sum-exp with the maximum subtracted first."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]
    return out


class DualState:
    """Dual variables beta with cached lambda tables.

    ``set_beta`` is the only mutation path; it refreshes both lambda tables
    of the edge.  ``verify_cache`` recomputes everything from scratch.
    ``beta``, ``lam_fwd`` and ``lam_bwd`` are views into flat buffers, so
    write into them (``beta[e][...] = t``) rather than rebinding entries.
    """

    def __init__(self, mrf: PairwiseMRF, ep: EdgeProbabilities, beta=None):
        if ep.graph is not mrf.graph and ep.graph != mrf.graph:
            raise ValueError("probabilities and model are defined on different graphs")
        vals = np.concatenate([ep.rho_root, ep.rho_fwd, ep.rho_bwd])
        if not np.all(vals > 0):
            raise ValueError("the dual needs strictly positive root and arc probabilities")
        self.mrf = mrf
        self.ep = ep
        self.graph = g = mrf.graph
        self.rho_o = ep.rho_root
        self.rho_f = ep.rho_fwd
        self.rho_b = ep.rho_bwd
        self.theta_half = [0.5 * t for t in mrf.edge_pot]

        # Flat storage shared with the compiled sweep; the per-edge lists hold views.
        cards = mrf.cards
        sizes = [cards[u] * cards[v] for u, v in g.edges]
        self.edge_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.lf_off = np.concatenate([[0], np.cumsum([cards[u] for u, _ in g.edges])]).astype(np.int64)
        self.lb_off = np.concatenate([[0], np.cumsum([cards[v] for _, v in g.edges])]).astype(np.int64)
        self.beta_flat = np.zeros(self.edge_off[-1])
        self.lam_fwd_flat = np.zeros(self.lf_off[-1])
        self.lam_bwd_flat = np.zeros(self.lb_off[-1])
        self.beta = [self.beta_flat[self.edge_off[e]:self.edge_off[e + 1]].reshape(cards[u], cards[v])
                     for e, (u, v) in enumerate(g.edges)]
        self.lam_fwd = [self.lam_fwd_flat[self.lf_off[e]:self.lf_off[e + 1]] for e in range(g.m)]
        self.lam_bwd = [self.lam_bwd_flat[self.lb_off[e]:self.lb_off[e + 1]] for e in range(g.m)]
        if beta is not None:
            if len(beta) != g.m:
                raise ValueError("one beta table per edge required")
            for e, b in enumerate(beta):
                b = np.asarray(b, dtype=np.float64)
                if b.shape != self.beta[e].shape:
                    raise ValueError("beta table shape mismatch")
                self.beta[e][...] = b
        for e in range(g.m):
            self._refresh(e)

    def _lambdas(self, e: int, beta_e: np.ndarray):
        th = self.theta_half[e]
        rf, rb = self.rho_f[e], self.rho_b[e]
        lf = -rf * lse((th - beta_e) / rf, axis=1)
        lb = -rb * lse((th + beta_e) / rb, axis=0)
        return lf, lb

    def _refresh(self, e: int):
        self.lam_fwd[e][...], self.lam_bwd[e][...] = self._lambdas(e, self.beta[e])

    def set_beta(self, e: int, table) -> None:
        table = np.asarray(table, dtype=np.float64)
        if table.shape != self.beta[e].shape:
            raise ValueError("beta table shape mismatch")
        if not np.all(np.isfinite(table)):
            raise FloatingPointError(f"non-finite beta for edge {self.graph.edges[e]}")
        self.beta[e][...] = table
        self._refresh(e)

    def copy(self) -> "DualState":
        return DualState(self.mrf, self.ep, beta=self.beta)

    def lam_into(self, i: int, e: int) -> np.ndarray:
        """The lambda table of edge ``e`` that lives on vertex ``i``."""
        return self.lam_fwd[e] if self.graph.edges[e][0] == i else self.lam_bwd[e]

    def node_field(self, i: int) -> np.ndarray:
        """theta_i(x_i) - sum_k lambda_{k|i}(x_i)."""
        a = self.mrf.node_pot[i].copy()
        for _, e in self.graph.adjacency[i]:
            a -= self.lam_into(i, e)
        return a

    def node_term(self, i: int) -> float:
        r = self.rho_o[i]
        return float(r * lse(self.node_field(i) / r))

    def log_node_marginal(self, i: int) -> np.ndarray:
        s = self.node_field(i) / self.rho_o[i]
        return s - lse(s)

    def log_conditionals(self, e: int):
        """``(log mu_{v|u}[x_u, x_v], log mu_{u|v}[x_u, x_v])`` via the cached normalizers."""
        th, b = self.theta_half[e], self.beta[e]
        rf, rb = self.rho_f[e], self.rho_b[e]
        log_cf = (th - b) / rf + self.lam_fwd[e][:, None] / rf
        log_cb = (th + b) / rb + self.lam_bwd[e][None, :] / rb
        return log_cf, log_cb

    def log_joints(self, e: int):
        """Log of both joint copies of edge ``e`` in ``[x_u, x_v]`` layout."""
        u, v = self.graph.edges[e]
        log_cf, log_cb = self.log_conditionals(e)
        return self.log_node_marginal(u)[:, None] + log_cf, self.log_node_marginal(v)[None, :] + log_cb

    def verify_cache(self, atol: float = 0.0) -> bool:
        for e in range(self.graph.m):
            lf, lb = self._lambdas(e, self.beta[e])
            if np.max(np.abs(lf - self.lam_fwd[e])) > atol or np.max(np.abs(lb - self.lam_bwd[e])) > atol:
                return False
        return True

    def flat_beta(self) -> np.ndarray:
        return self.beta_flat.copy()

    def set_flat_beta(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.beta_flat.shape:
            raise ValueError("flat beta has the wrong length")
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite beta")
        self.beta_flat[...] = x
        for e in range(self.graph.m):
            self._refresh(e)


def lambda_table(state: DualState, parent: int, child: int) -> np.ndarray:
    """lambda for the arc ``parent -> child``, a table over the parent's states.

    In subscript notation this is lambda_{child|parent}(x_parent); it uses the
    arc probability rho_{child|parent} and the conditional mu_{child|parent}.
    """
    e = state.graph.find_edge(parent, child)
    return (state.lam_fwd[e] if parent < child else state.lam_bwd[e]).copy()


def dual_objective(state: DualState) -> float:
    return math.fsum(state.node_term(i) for i in range(state.graph.n))


@dataclass
class PrimalMarginals:
    """Singleton tables and both directed conditionals per edge.

    ``cond_fwd[e][x_u, x_v] = mu_{v|u}(x_v | x_u)`` and
    ``cond_bwd[e][x_v, x_u] = mu_{u|v}(x_u | x_v)``; rows are conditioned on
    the parent and sum to one.
    """

    graph: Graph
    mu_node: list[np.ndarray]
    cond_fwd: list[np.ndarray]
    cond_bwd: list[np.ndarray]

    def cond(self, parent: int, child: int) -> np.ndarray:
        """mu_{child|parent}, rows indexed by the parent's state."""
        e = self.graph.find_edge(parent, child)
        return self.cond_fwd[e] if parent < child else self.cond_bwd[e]

    def joint_fwd(self, e: int) -> np.ndarray:
        """mu_{v|u}(x_v|x_u) mu_u(x_u), layout ``[x_u, x_v]``."""
        u, _ = self.graph.edges[e]
        return self.mu_node[u][:, None] * self.cond_fwd[e]

    def joint_bwd(self, e: int) -> np.ndarray:
        """mu_{u|v}(x_u|x_v) mu_v(x_v), layout ``[x_u, x_v]``."""
        _, v = self.graph.edges[e]
        return (self.mu_node[v][:, None] * self.cond_bwd[e]).T

    def joint_arc(self, parent: int, child: int) -> np.ndarray:
        """Joint copy of the arc, layout ``[x_parent, x_child]``."""
        return self.mu_node[parent][:, None] * self.cond(parent, child)

    def copy(self) -> "PrimalMarginals":
        return PrimalMarginals(
            self.graph,
            [t.copy() for t in self.mu_node],
            [t.copy() for t in self.cond_fwd],
            [t.copy() for t in self.cond_bwd],
        )

    def min_entry(self) -> float:
        tabs = self.mu_node + self.cond_fwd + self.cond_bwd
        return min(float(t.min()) for t in tabs)


def to_primal(state: DualState) -> PrimalMarginals:
    g = state.graph
    mu = [np.exp(state.log_node_marginal(i)) for i in range(g.n)]
    cf, cb = [], []
    for e in range(g.m):
        th, b = state.theta_half[e], state.beta[e]
        sf = (th - b) / state.rho_f[e]
        sb = ((th + b) / state.rho_b[e]).T
        pf = np.exp(sf - sf.max(axis=1, keepdims=True))
        pb = np.exp(sb - sb.max(axis=1, keepdims=True))
        cf.append(pf / pf.sum(axis=1, keepdims=True))
        cb.append(pb / pb.sum(axis=1, keepdims=True))
    return PrimalMarginals(g, mu, cf, cb)


def copy_discrepancy(m: PrimalMarginals) -> list[np.ndarray]:
    """``joint_bwd - joint_fwd`` per edge; zero everywhere at the dual optimum."""
    return [m.joint_bwd(e) - m.joint_fwd(e) for e in range(m.graph.m)]


def dual_gradient(state: DualState) -> list[np.ndarray]:
    """dF_D / dbeta_uv(x_u, x_v) = mu_{u|v} mu_v - mu_{v|u} mu_u."""
    return copy_discrepancy(to_primal(state))


def optimality_residual(m: PrimalMarginals) -> float:
    d = copy_discrepancy(m)
    return max((float(np.max(np.abs(t))) for t in d), default=0.0)


def consistency_check(m: PrimalMarginals) -> float:
    """Largest violation of the directed consistency constraints."""
    worst = 0.0
    for t in m.mu_node:
        worst = max(worst, abs(float(t.sum()) - 1.0), float(np.max(-t, initial=0.0)))
    for e, (u, v) in enumerate(m.graph.edges):
        jf, jb = m.joint_fwd(e), m.joint_bwd(e)
        worst = max(
            worst,
            float(np.max(np.abs(jf - jb))),
            float(np.max(np.abs(jf.sum(axis=1) - m.mu_node[u]))),
            float(np.max(np.abs(jb.sum(axis=0) - m.mu_node[v]))),
            float(np.max(-jf, initial=0.0)),
            float(np.max(-jb, initial=0.0)),
        )
    return worst


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _cond_entropy(weights: np.ndarray, cond: np.ndarray) -> float:
    """sum_a weights[a] * H(cond[a, :])."""
    return math.fsum(w * entropy(row) for w, row in zip(weights, cond))


def _mutual_information(joint: np.ndarray) -> float:
    return entropy(joint.sum(axis=1)) + entropy(joint.sum(axis=0)) - entropy(joint)


def tree_entropy(m: PrimalMarginals, t: DirectedTree, form: str = "conditional") -> float:
    """Entropy of the tree-structured distribution built from ``m``.

    ``conditional``: H(X_root) + sum over arcs p->c of H(X_c | X_p), each
    conditional entropy read from its own joint copy.
    ``mutual_info``: sum_i H(X_i) - sum over arcs of I(X_p; X_c), with the
    joint reconstructed as mu_{c|p} mu_p.
    The two agree on consistent marginals.
    """
    if form == "conditional":
        h = entropy(m.mu_node[t.root])
        for p, c in t.arcs():
            h += _cond_entropy(m.mu_node[p], m.cond(p, c))
        return h
    if form == "mutual_info":
        h = math.fsum(entropy(mu) for mu in m.mu_node)
        for p, c in t.arcs():
            h -= _mutual_information(m.joint_arc(p, c))
        return h
    raise ValueError(f"unknown entropy form {form!r}")


def _check_shapes(m: PrimalMarginals, mrf: PairwiseMRF):
    if len(m.mu_node) != mrf.n or len(m.cond_fwd) != mrf.graph.m or len(m.cond_bwd) != mrf.graph.m:
        raise ValueError("marginals do not match the model")
    for i, k in enumerate(mrf.cards):
        if m.mu_node[i].shape != (k,):
            raise ValueError(f"mu_node[{i}] has shape {m.mu_node[i].shape}, expected ({k},)")
    for e, (u, v) in enumerate(mrf.graph.edges):
        ku, kv = mrf.cards[u], mrf.cards[v]
        if m.cond_fwd[e].shape != (ku, kv) or m.cond_bwd[e].shape != (kv, ku):
            raise ValueError(f"conditional tables of edge ({u}, {v}) have the wrong shape")


def primal_objective(
    m: PrimalMarginals, ep: EdgeProbabilities, mrf: PairwiseMRF, entropy_form: str = "conditional"
) -> float:
    """Tree-reweighted free energy of (possibly inconsistent) marginals.

    The energy term pairs theta_uv with the average of the two joint copies.
    ``conditional`` uses root entropies and arc-weighted conditional entropies;
    ``mutual_info`` uses singleton entropies minus edge-weighted mutual information of
    the averaged joint.  At the optimum this equals ``-F_D``.
    """
    _check_shapes(m, mrf)
    energy = [float(mrf.node_pot[i] @ m.mu_node[i]) for i in range(mrf.n)]
    jbar = [0.5 * (m.joint_fwd(e) + m.joint_bwd(e)) for e in range(mrf.graph.m)]
    energy += [float(np.sum(mrf.edge_pot[e] * jbar[e])) for e in range(mrf.graph.m)]
    if entropy_form == "conditional":
        ent = [ep.rho_root[i] * entropy(m.mu_node[i]) for i in range(mrf.n)]
        for e, (u, v) in enumerate(mrf.graph.edges):
            ent.append(ep.rho_fwd[e] * _cond_entropy(m.mu_node[u], m.cond_fwd[e]))
            ent.append(ep.rho_bwd[e] * _cond_entropy(m.mu_node[v], m.cond_bwd[e]))
    elif entropy_form == "mutual_info":
        ent = [entropy(mu) for mu in m.mu_node]
        rho_edge = ep.undirected()
        ent += [-rho_edge[e] * _mutual_information(jbar[e]) for e in range(mrf.graph.m)]
    else:
        raise ValueError(f"unknown entropy form {entropy_form!r}")
    return -math.fsum(energy) - math.fsum(ent)
