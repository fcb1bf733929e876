"""TRW-GP: monotone single-edge coordinate updates of the dual.

Each update moves ``beta_uv`` by ``eps * (log joint_fwd - log joint_bwd)``,
i.e. along the log-ratio of the two joint copies of the edge, with
``eps = eps_factor * min(rho_o[u], rho_o[v], rho_fwd, rho_bwd)``.  For
``0 < eps_factor < 1`` the dual objective never increases.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dual import (
    DualState,
    PrimalMarginals,
    dual_objective,
    lse,
    optimality_residual,
    primal_objective,
    to_primal,
)
from .model import PairwiseMRF, fmt_float
from .spanning import EdgeProbabilities, validate_probs

__all__ = [
    "GpConfig",
    "SolveTrace",
    "MonotonicityError",
    "step_size",
    "update_edge_beta",
    "update_edge_marginal_form",
    "initial_marginals",
    "reparam_product",
    "solve",
    "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("update", "sweep", "edge_u", "edge_v", "dual_obj", "primal_obj", "residual", "delta", "elapsed_ns")

MONOTONE_SLACK = 1e-12


class MonotonicityError(RuntimeError):
    """An update increased the dual objective; indicates a bug, not bad input."""


@dataclass
class GpConfig:
    eps_factor: float = 0.5
    tol: float = 1e-8
    max_sweeps: int = 10000
    primal_eval_every: int = 1
    check_monotone: bool = True
    entropy_form: str = "conditional"
    drift_tol: float = 1e-9
    # sweeps between exact objective/residual evaluations (and convergence checks)
    check_every: int = 1
    # keep one trace row per edge update; long runs can turn this off
    record_updates: bool = True

    def __post_init__(self):
        if not 0.0 < self.eps_factor < 1.0:
            raise ValueError("eps_factor must lie strictly between 0 and 1")
        if self.max_sweeps < 0 or self.primal_eval_every < 0:
            raise ValueError("sweep counts must be non-negative")
        if self.check_every < 1:
            raise ValueError("check_every must be at least 1")


@dataclass
class SolveTrace:
    """Per-update rows plus per-sweep summaries.

    Per-update ``residual`` is the edge's own copy discrepancy before the
    update; the per-sweep ``residual`` is the global max over all edges.
    """

    rows: list = field(default_factory=list)
    sweep_index: list = field(default_factory=list)
    sweep_dual: list = field(default_factory=list)
    sweep_primal: list = field(default_factory=list)
    sweep_residual: list = field(default_factory=list)
    status: str = "running"
    sweeps: int = 0
    updates: int = 0
    min_delta: float = math.inf

    @property
    def deltas(self) -> np.ndarray:
        return np.array([r[7] for r in self.rows])

    @property
    def dual_values(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    @property
    def final_dual(self) -> float:
        return self.sweep_dual[-1]

    @property
    def final_residual(self) -> float:
        return self.sweep_residual[-1]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_csv(self, fh=None, with_timing: bool = True) -> str | None:
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for upd, sw, u, v, dual, primal, res, delta, ns in self.rows:
            w.writerow([
                upd, sw, u, v,
                "" if dual is None else fmt_float(dual),
                "" if primal is None else fmt_float(primal),
                fmt_float(res),
                "" if delta is None else fmt_float(delta),
                ns if with_timing else 0,
            ])
        return buf.getvalue() if fh is None else None


def step_size(ep: EdgeProbabilities, edge, eps_factor: float = 0.5) -> float:
    """``eps_factor * min(rho_o[u], rho_o[v], rho_{v|u}, rho_{u|v})`` for an edge index or pair."""
    e = edge if isinstance(edge, (int, np.integer)) else ep.graph.find_edge(*edge)
    u, v = ep.graph.edges[e]
    lo = min(ep.rho_root[u], ep.rho_root[v], ep.rho_fwd[e], ep.rho_bwd[e])
    if not lo > 0:
        raise ValueError(f"edge ({u}, {v}) has a zero root or arc probability")
    return eps_factor * float(lo)


def update_edge_beta(state: DualState, e: int, eps: float) -> tuple[float, float]:
    """Apply one update to edge ``e`` in place.

    Returns ``(delta, residual)``: the decrease ``F_D(before) - F_D(after)``,
    computed from the two node terms that change, and the edge's copy
    discrepancy (max norm) before the update.
    """
    u, v = state.graph.edges[e]
    before = state.node_term(u) + state.node_term(v)
    log_jf, log_jb = state.log_joints(e)
    step = log_jf - log_jb
    if not np.all(np.isfinite(step)):
        raise FloatingPointError(f"non-finite update on edge ({u}, {v})")
    residual = float(np.max(np.abs(np.exp(log_jf) - np.exp(log_jb))))
    state.set_beta(e, state.beta[e] + eps * step)
    after = state.node_term(u) + state.node_term(v)
    return before - after, residual


def _log_normalize(a: np.ndarray, axis=None) -> np.ndarray:
    return a - lse(a, axis=axis, keepdims=True)


def update_edge_marginal_form(m: PrimalMarginals, ep: EdgeProbabilities, e: int, eps: float) -> PrimalMarginals:
    """The same update expressed purely on marginals; returns a new object.

    Singletons and both conditionals of the edge are recomputed from the
    pre-update tables; everything else is shared with ``m``.
    """
    g = m.graph
    u, v = g.edges[e]
    tabs = [m.mu_node[u], m.mu_node[v], m.cond_fwd[e], m.cond_bwd[e]]
    if any(np.any(t <= 0) for t in tabs):
        raise FloatingPointError(f"zero marginal entry on edge ({u}, {v})")
    lmu_u, lmu_v = np.log(m.mu_node[u]), np.log(m.mu_node[v])
    lcf = np.log(m.cond_fwd[e])              # [x_u, x_v]: log mu_{v|u}
    lcb = np.log(m.cond_bwd[e]).T            # [x_u, x_v]: log mu_{u|v}
    ljf = lmu_u[:, None] + lcf
    ljb = lmu_v[None, :] + lcb
    ro_u, ro_v = ep.rho_root[u], ep.rho_root[v]
    rf, rb = ep.rho_fwd[e], ep.rho_bwd[e]

    # mu_u <- mu_u * (sum_{x_v} mu_{v|u} (J_bwd / J_fwd)^(eps/rf))^(rf/ro_u)
    new_u = lmu_u + (rf / ro_u) * lse(lcf + (eps / rf) * (ljb - ljf), axis=1)
    new_v = lmu_v + (rb / ro_v) * lse(lcb + (eps / rb) * (ljf - ljb), axis=0)
    # mu_{v|u} <- mu_{v|u}^(1 - eps/rf) * (J_bwd / mu_u)^(eps/rf), normalized over x_v
    new_cf = (1 - eps / rf) * lcf + (eps / rf) * (ljb - lmu_u[:, None])
    new_cb = (1 - eps / rb) * lcb + (eps / rb) * (ljf - lmu_v[None, :])

    out = PrimalMarginals(g, list(m.mu_node), list(m.cond_fwd), list(m.cond_bwd))
    out.mu_node[u] = np.exp(_log_normalize(new_u))
    out.mu_node[v] = np.exp(_log_normalize(new_v))
    out.cond_fwd[e] = np.exp(_log_normalize(new_cf, axis=1))
    out.cond_bwd[e] = np.exp(_log_normalize(new_cb, axis=0)).T
    return out


def initial_marginals(mrf: PairwiseMRF, ep: EdgeProbabilities) -> PrimalMarginals:
    """Marginals at beta = 0: mu_i from theta_i / rho_o and conditionals from the edge halves."""
    return to_primal(DualState(mrf, ep))


def reparam_product(m: PrimalMarginals, ep: EdgeProbabilities, x) -> float:
    """log of prod_i mu_i^rho_o[i] times prod over both arcs of each edge mu_{c|p}^rho_{c|p}.

    Along a TRW-GP run this equals ``assignment_score(x) - F_D(beta)``, so its
    difference from the score is independent of ``x``.
    """
    g = m.graph
    x = np.asarray(x, dtype=np.int64)
    terms = []
    for i in range(g.n):
        p = m.mu_node[i][x[i]]
        if not p > 0:
            raise FloatingPointError(f"zero singleton entry at vertex {i}")
        terms.append(ep.rho_root[i] * math.log(p))
    for e, (u, v) in enumerate(g.edges):
        pf, pb = m.cond_fwd[e][x[u], x[v]], m.cond_bwd[e][x[v], x[u]]
        if not (pf > 0 and pb > 0):
            raise FloatingPointError(f"zero conditional entry on edge ({u}, {v})")
        terms.append(ep.rho_fwd[e] * math.log(pf))
        terms.append(ep.rho_bwd[e] * math.log(pb))
    return math.fsum(terms)


def solve(mrf: PairwiseMRF, ep: EdgeProbabilities, cfg: GpConfig | None = None, callback=None,
          backend: str = "compiled"):
    """Round-robin TRW-GP from beta = 0.

    Stops when the global copy discrepancy drops below ``cfg.tol`` (checked
    before the first sweep and after every ``cfg.check_every`` sweeps, and
    after the last) or after ``cfg.max_sweeps``.
    ``callback(sweep, state, trace)`` runs after every checked sweep.  ``backend`` is
    ``"compiled"`` (numba sweep over the state's flat buffers) or ``"numpy"``
    (one ``update_edge_beta`` call per edge); both perform identical
    arithmetic up to rounding.

    Returns ``(state, marginals, trace)``.
    """
    cfg = GpConfig() if cfg is None else cfg
    if backend not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    report = validate_probs(ep, mrf.graph, strict_positive=True)
    if report:
        raise ValueError("invalid tree probabilities: " + "; ".join(report))
    state = DualState(mrf, ep)
    trace = SolveTrace()
    g = mrf.graph
    eps = np.array([step_size(ep, e, cfg.eps_factor) for e in range(g.m)])
    order = np.arange(g.m, dtype=np.int64)
    if backend == "compiled":
        from ._kernel import KernelArrays, run_sweep

        arrays = KernelArrays(state)
    t0 = time.perf_counter_ns()

    fd = dual_objective(state)
    marg = to_primal(state)
    res = optimality_residual(marg)
    _record_sweep(trace, 0, fd, marg, ep, mrf, res, cfg)

    update = 0
    sweep = 0
    while res >= cfg.tol and sweep < cfg.max_sweeps:
        sweep += 1
        if backend == "compiled":
            deltas, local = run_sweep(state, arrays, eps, order)
            stamps = [time.perf_counter_ns() - t0] * g.m
        else:
            deltas, local, stamps = np.empty(g.m), np.empty(g.m), []
            for e in order:
                deltas[e], local[e] = update_edge_beta(state, e, eps[e])
                stamps.append(time.perf_counter_ns() - t0)
        if cfg.check_monotone and g.m and deltas.min() < -MONOTONE_SLACK:
            bad = int(np.argmin(deltas))
            raise MonotonicityError(
                f"dual objective increased by {-deltas[bad]:.3e} on edge {g.edges[bad]} (sweep {sweep})"
            )
        if g.m:
            trace.min_delta = min(trace.min_delta, float(deltas.min()))
        if cfg.record_updates:
            for e in range(g.m):
                fd -= deltas[e]
                u, v = g.edges[e]
                trace.rows.append((update + e + 1, sweep, u, v, fd, None, float(local[e]), float(deltas[e]), stamps[e]))
        else:
            fd -= math.fsum(deltas)
        update += g.m
        if sweep % cfg.check_every and sweep < cfg.max_sweeps:
            continue
        exact = dual_objective(state)
        if abs(exact - fd) > cfg.drift_tol * max(1, sweep // cfg.check_every):
            log.warning("incremental dual objective drifted by %.3e at sweep %d", exact - fd, sweep)
        fd = exact
        marg = to_primal(state)
        res = optimality_residual(marg)
        primal = _record_sweep(trace, sweep, fd, marg, ep, mrf, res, cfg)
        if primal is not None and cfg.record_updates and trace.rows:
            trace.rows[-1] = trace.rows[-1][:5] + (primal,) + trace.rows[-1][6:]
        if callback is not None:
            callback(sweep, state, trace)

    trace.sweeps = sweep
    trace.updates = update
    trace.status = "converged" if res < cfg.tol else "max_sweeps"
    return state, marg, trace


def _record_sweep(trace, sweep, fd, marg, ep, mrf, res, cfg):
    primal = None
    if cfg.primal_eval_every and sweep % cfg.primal_eval_every == 0:
        primal = primal_objective(marg, ep, mrf, cfg.entropy_form)
    trace.sweep_index.append(sweep)
    trace.sweep_dual.append(fd)
    trace.sweep_primal.append(primal)
    trace.sweep_residual.append(res)
    return primal
