"""Compiled TRW-GP sweep over the flat buffers of a DualState.

Mirrors ``solver.update_edge_beta`` entry for entry; the numpy path is the
reference and the tests hold the two together.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


class KernelArrays:
    """Read-only flat views of a model/probabilities pair for the kernel."""

    def __init__(self, state):
        g, mrf = state.graph, state.mrf
        cards = np.array(mrf.cards, dtype=np.int64)
        self.kmax = int(cards.max())
        self.node_off = np.concatenate([[0], np.cumsum(cards)]).astype(np.int64)
        self.theta_node = np.concatenate(mrf.node_pot)
        self.theta_half = (
            np.concatenate([t.ravel() for t in state.theta_half]) if g.m else np.zeros(0)
        )
        self.eu = np.array([u for u, _ in g.edges], dtype=np.int64)
        self.ev = np.array([v for _, v in g.edges], dtype=np.int64)
        ptr, adj_e, adj_u = [0], [], []
        for i in range(g.n):
            for _, e in g.adjacency[i]:
                adj_e.append(e)
                adj_u.append(g.edges[e][0] == i)
            ptr.append(len(adj_e))
        self.adj_ptr = np.array(ptr, dtype=np.int64)
        self.adj_edge = np.array(adj_e, dtype=np.int64)
        self.adj_is_u = np.array(adj_u, dtype=np.bool_)
        self.rho_o = np.ascontiguousarray(state.rho_o, dtype=np.float64)
        self.rho_f = np.ascontiguousarray(state.rho_f, dtype=np.float64)
        self.rho_b = np.ascontiguousarray(state.rho_b, dtype=np.float64)


@njit(cache=True)
def _node_field(i, out, theta_node, node_off, adj_ptr, adj_edge, adj_is_u, lam_f, lf_off, lam_b, lb_off):
    k = node_off[i + 1] - node_off[i]
    for a in range(k):
        out[a] = theta_node[node_off[i] + a]
    for p in range(adj_ptr[i], adj_ptr[i + 1]):
        e = adj_edge[p]
        if adj_is_u[p]:
            for a in range(k):
                out[a] -= lam_f[lf_off[e] + a]
        else:
            for a in range(k):
                out[a] -= lam_b[lb_off[e] + a]
    return k


@njit(cache=True)
def _scaled_lse(x, k, rho):
    """rho * lse(x / rho) over the first k entries."""
    m = -np.inf
    for a in range(k):
        if x[a] / rho > m:
            m = x[a] / rho
    s = 0.0
    for a in range(k):
        s += math.exp(x[a] / rho - m)
    return rho * (math.log(s) + m)


@njit(cache=True)
def _refresh_lambdas(e, ku, kv, th, beta, eoff, rf, rb, lam_f, lf_off, lam_b, lb_off):
    base = eoff[e]
    for a in range(ku):
        m = -np.inf
        for b in range(kv):
            z = (th[base + a * kv + b] - beta[base + a * kv + b]) / rf
            if z > m:
                m = z
        s = 0.0
        for b in range(kv):
            s += math.exp((th[base + a * kv + b] - beta[base + a * kv + b]) / rf - m)
        lam_f[lf_off[e] + a] = -rf * (math.log(s) + m)
    for b in range(kv):
        m = -np.inf
        for a in range(ku):
            z = (th[base + a * kv + b] + beta[base + a * kv + b]) / rb
            if z > m:
                m = z
        s = 0.0
        for a in range(ku):
            s += math.exp((th[base + a * kv + b] + beta[base + a * kv + b]) / rb - m)
        lam_b[lb_off[e] + b] = -rb * (math.log(s) + m)


@njit(cache=True)
def sweep(
    order, eps, kmax,
    theta_node, node_off, th, eoff, eu, ev,
    adj_ptr, adj_edge, adj_is_u,
    rho_o, rho_f, rho_b,
    beta, lam_f, lf_off, lam_b, lb_off,
    deltas, residuals,
):
    """One update per edge in ``order``; fills ``deltas`` and pre-update ``residuals``.

    Returns 0 on success, or ``1 + position`` of the first non-finite update.
    """
    fu = np.empty(kmax)
    fv = np.empty(kmax)
    lmu_u = np.empty(kmax)
    lmu_v = np.empty(kmax)
    for pos in range(order.shape[0]):
        e = order[pos]
        u = eu[e]
        v = ev[e]
        ku = _node_field(u, fu, theta_node, node_off, adj_ptr, adj_edge, adj_is_u, lam_f, lf_off, lam_b, lb_off)
        kv = _node_field(v, fv, theta_node, node_off, adj_ptr, adj_edge, adj_is_u, lam_f, lf_off, lam_b, lb_off)
        tu = _scaled_lse(fu, ku, rho_o[u])
        tv = _scaled_lse(fv, kv, rho_o[v])
        for a in range(ku):
            lmu_u[a] = (fu[a] - tu) / rho_o[u]
        for b in range(kv):
            lmu_v[b] = (fv[b] - tv) / rho_o[v]
        rf = rho_f[e]
        rb = rho_b[e]
        base = eoff[e]
        res = 0.0
        for a in range(ku):
            for b in range(kv):
                idx = base + a * kv + b
                ljf = lmu_u[a] + (th[idx] - beta[idx]) / rf + lam_f[lf_off[e] + a] / rf
                ljb = lmu_v[b] + (th[idx] + beta[idx]) / rb + lam_b[lb_off[e] + b] / rb
                step = ljf - ljb
                if not math.isfinite(step):
                    return 1 + pos
                d = abs(math.exp(ljf) - math.exp(ljb))
                if d > res:
                    res = d
                beta[idx] += eps[e] * step
        _refresh_lambdas(e, ku, kv, th, beta, eoff, rf, rb, lam_f, lf_off, lam_b, lb_off)
        _node_field(u, fu, theta_node, node_off, adj_ptr, adj_edge, adj_is_u, lam_f, lf_off, lam_b, lb_off)
        _node_field(v, fv, theta_node, node_off, adj_ptr, adj_edge, adj_is_u, lam_f, lf_off, lam_b, lb_off)
        deltas[pos] = (tu + tv) - (_scaled_lse(fu, ku, rho_o[u]) + _scaled_lse(fv, kv, rho_o[v]))
        residuals[pos] = res
    return 0


def run_sweep(state, arrays: KernelArrays, eps: np.ndarray, order: np.ndarray):
    deltas = np.empty(order.shape[0])
    residuals = np.empty(order.shape[0])
    status = sweep(
        order, eps, arrays.kmax,
        arrays.theta_node, arrays.node_off, arrays.theta_half, state.edge_off, arrays.eu, arrays.ev,
        arrays.adj_ptr, arrays.adj_edge, arrays.adj_is_u,
        arrays.rho_o, arrays.rho_f, arrays.rho_b,
        state.beta_flat, state.lam_fwd_flat, state.lf_off, state.lam_bwd_flat, state.lb_off,
        deltas, residuals,
    )
    if status:
        u, v = state.graph.edges[order[status - 1]]
        raise FloatingPointError(f"non-finite update on edge ({u}, {v})")
    return deltas, residuals
