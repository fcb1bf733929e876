"""Comparison solvers and the brute-force oracle.

TRW-MP follows the tree-reweighted message passing updates of Wainwright,
Jaakkola and Willsky (2005) with edge appearance probabilities
``rho_e = rho_fwd + rho_bwd``.  Messages are kept in the log domain and
normalized so that each message has log-sum-exp zero.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dual import DualState, PrimalMarginals, dual_gradient, dual_objective, lse, primal_objective
from .model import PairwiseMRF, assignment_score
from .solver import SolveTrace
from .spanning import EdgeProbabilities, validate_probs

__all__ = [
    "MessageSet",
    "MpConfig",
    "MpResult",
    "trw_mp_sweep",
    "trw_mp_beliefs",
    "solve_trw_mp",
    "solve_gradient_descent",
    "LineSearchError",
    "EnumerationTooLarge",
    "exact_log_partition",
    "exact_marginals",
    "NON_SETTLING_SWEEPS",
    "NON_SETTLING_CHANGE",
]

MAX_ASSIGNMENTS = 2 ** 20

# undamped runs still moving by more than this after this many sweeps are "non-settling"
NON_SETTLING_SWEEPS = 500
NON_SETTLING_CHANGE = 1e-3


class EnumerationTooLarge(ValueError):
    pass


class LineSearchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# TRW message passing


class MessageSet:
    """Log messages; ``log_fwd[e]`` is u -> v (table over x_v), ``log_bwd[e]`` is v -> u."""

    def __init__(self, mrf: PairwiseMRF, log_fwd=None, log_bwd=None):
        g = mrf.graph
        self.graph = g
        if log_fwd is None:
            log_fwd = [np.full(mrf.cards[v], -math.log(mrf.cards[v])) for _, v in g.edges]
        if log_bwd is None:
            log_bwd = [np.full(mrf.cards[u], -math.log(mrf.cards[u])) for u, _ in g.edges]
        self.log_fwd = [np.array(t, dtype=np.float64) for t in log_fwd]
        self.log_bwd = [np.array(t, dtype=np.float64) for t in log_bwd]

    @classmethod
    def uniform(cls, mrf: PairwiseMRF) -> "MessageSet":
        return cls(mrf)

    def into(self, i: int, e: int) -> np.ndarray:
        """Log message arriving at ``i`` along edge ``e``."""
        return self.log_bwd[e] if self.graph.edges[e][0] == i else self.log_fwd[e]

    def out_of(self, i: int, e: int) -> np.ndarray:
        """Log message leaving ``i`` along edge ``e``."""
        return self.log_fwd[e] if self.graph.edges[e][0] == i else self.log_bwd[e]

    def copy(self) -> "MessageSet":
        new = object.__new__(MessageSet)
        new.graph = self.graph
        new.log_fwd = [t.copy() for t in self.log_fwd]
        new.log_bwd = [t.copy() for t in self.log_bwd]
        return new


@dataclass
class MpConfig:
    damping: float = 0.5
    tol: float = 1e-10
    max_sweeps: int = 5000
    entropy_form: str = "conditional"
    primal_eval_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


def _weighted_incoming(mrf, msgs, rho_edge, j, exclude_edge):
    """theta_j + sum_{k in N(j), edge != exclude} rho_kj log M_kj - (1 - rho) log M_{ij}."""
    h = mrf.node_pot[j].copy()
    for _, e in mrf.graph.adjacency[j]:
        if e == exclude_edge:
            h -= (1.0 - rho_edge[e]) * msgs.into(j, e)
        else:
            h += rho_edge[e] * msgs.into(j, e)
    return h


def _new_message(mrf, msgs, rho_edge, e, sender):
    """Undamped, normalized log message from ``sender`` across edge ``e``."""
    u, v = mrf.graph.edges[e]
    th = mrf.edge_pot[e] / rho_edge[e]               # [x_u, x_v]
    h = _weighted_incoming(mrf, msgs, rho_edge, sender, e)
    if sender == u:
        out = lse(th + h[:, None], axis=0)           # over x_u -> table over x_v
    else:
        out = lse(th + h[None, :], axis=1)
    return out - lse(out)


def _stacked(mrf: PairwiseMRF, ep: EdgeProbabilities):
    """Edge-stacked arrays for the vectorized sweep, or None for mixed cardinalities."""
    g = mrf.graph
    if g.m == 0 or len(set(mrf.cards)) != 1:
        return None
    rho = ep.undirected()
    eu = np.array([u for u, _ in g.edges])
    ev = np.array([v for _, v in g.edges])
    th = np.stack(mrf.edge_pot) / rho[:, None, None]
    return eu, ev, rho, th, np.stack(mrf.node_pot)


def _sweep_stacked(msgs, arrays):
    eu, ev, rho, th, node = arrays
    f, b = np.stack(msgs.log_fwd), np.stack(msgs.log_bwd)
    s = node.copy()
    np.add.at(s, eu, rho[:, None] * b)
    np.add.at(s, ev, rho[:, None] * f)
    # excluding the reverse message with weight (1 - rho) leaves s - reverse
    hu, hv = s[eu] - b, s[ev] - f
    new_f = lse(th + hu[:, :, None], axis=1)
    new_b = lse(th + hv[:, None, :], axis=2)
    return new_f, new_b


def trw_mp_sweep(msgs: MessageSet, mrf: PairwiseMRF, ep: EdgeProbabilities, cfg: MpConfig,
                 vectorized: bool = True, _arrays=None):
    """One synchronous sweep over all directed messages.

    Returns ``(new_messages, max_abs_log_change)``.  With damping ``a`` the
    stored message is ``a * old + (1 - a) * new`` in the log domain,
    renormalized.  ``vectorized`` stacks all edges into arrays when every
    vertex has the same number of states; otherwise (or when False) messages
    are computed edge by edge.
    """
    rho_edge = ep.undirected()
    if not np.all(rho_edge > 0):
        raise ValueError("TRW-MP needs every edge appearance probability to be positive")
    a = cfg.damping
    arrays = None
    if vectorized:
        arrays = _stacked(mrf, ep) if _arrays is None else _arrays
    if arrays is not None:
        new_f, new_b = _sweep_stacked(msgs, arrays)
        out = []
        for m, old in ((new_f, np.stack(msgs.log_fwd)), (new_b, np.stack(msgs.log_bwd))):
            m = m - lse(m, axis=1, keepdims=True)
            if a:
                m = a * old + (1.0 - a) * m
                m = m - lse(m, axis=1, keepdims=True)
            out.append(m)
        change = float(max(np.max(np.abs(out[0] - np.stack(msgs.log_fwd))),
                           np.max(np.abs(out[1] - np.stack(msgs.log_bwd)))))
        return MessageSet(mrf, list(out[0]), list(out[1])), change
    new = msgs.copy()
    change = 0.0
    for e, (u, v) in enumerate(mrf.graph.edges):
        for sender, old, store in ((u, msgs.log_fwd[e], new.log_fwd), (v, msgs.log_bwd[e], new.log_bwd)):
            m = _new_message(mrf, msgs, rho_edge, e, sender)
            if a:
                m = a * old + (1.0 - a) * m
                m = m - lse(m)
            change = max(change, float(np.max(np.abs(m - old))))
            store[e] = m
    return new, change


def trw_mp_beliefs(msgs: MessageSet, mrf: PairwiseMRF, ep: EdgeProbabilities) -> PrimalMarginals:
    """Pseudomarginals from messages; both conditionals come from the pairwise belief.

    Singleton: ``theta_i + sum_k rho_ki log M_ki``.  Pairwise:
    ``theta_uv / rho_uv`` plus each endpoint's incoming messages with the
    cross message weighted by ``rho - 1``, as in the sweep.
    """
    rho_edge = ep.undirected()
    g = mrf.graph
    mu = []
    for i in range(g.n):
        h = mrf.node_pot[i].copy()
        for _, e in g.adjacency[i]:
            h += rho_edge[e] * msgs.into(i, e)
        mu.append(np.exp(h - lse(h)))
    cf, cb = [], []
    for e, (u, v) in enumerate(g.edges):
        hu = _weighted_incoming(mrf, msgs, rho_edge, u, e)
        hv = _weighted_incoming(mrf, msgs, rho_edge, v, e)
        lj = mrf.edge_pot[e] / rho_edge[e] + hu[:, None] + hv[None, :]
        cf.append(np.exp(lj - lse(lj, axis=1, keepdims=True)))
        cb.append(np.exp(lj - lse(lj, axis=0, keepdims=True)).T)
    return PrimalMarginals(g, mu, cf, cb)


@dataclass
class MpResult:
    messages: MessageSet
    marginals: PrimalMarginals
    trace: SolveTrace
    status: str            # converged | max_sweeps | non-settling
    changes: list

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def solve_trw_mp(mrf: PairwiseMRF, ep: EdgeProbabilities, cfg: MpConfig | None = None) -> MpResult:
    """Iterate synchronous sweeps until the max log-message change is below ``cfg.tol``.

    The trace holds one row per sweep with the message change in the
    residual column and the primal objective of the beliefs.  An undamped run
    that stops without converging is labelled ``non-settling`` if its change
    after ``NON_SETTLING_SWEEPS`` sweeps still exceeds ``NON_SETTLING_CHANGE``.
    """
    cfg = MpConfig() if cfg is None else cfg
    msgs = MessageSet.uniform(mrf)
    trace = SolveTrace()
    changes = []
    t0 = time.perf_counter_ns()
    status = "max_sweeps"
    g = mrf.graph
    arrays = _stacked(mrf, ep)
    for sweep in range(1, cfg.max_sweeps + 1):
        msgs, change = trw_mp_sweep(msgs, mrf, ep, cfg, _arrays=arrays)
        changes.append(change)
        primal = None
        if cfg.primal_eval_every and sweep % cfg.primal_eval_every == 0:
            primal = primal_objective(trw_mp_beliefs(msgs, mrf, ep), ep, mrf, cfg.entropy_form)
        trace.rows.append((sweep, sweep, -1, -1, None, primal, change, None, time.perf_counter_ns() - t0))
        trace.sweep_index.append(sweep)
        trace.sweep_dual.append(None)
        trace.sweep_primal.append(primal)
        trace.sweep_residual.append(change)
        if change < cfg.tol:
            status = "converged"
            break
    trace.sweeps = len(changes)
    if status != "converged" and cfg.damping == 0 and _non_settling(changes):
        status = "non-settling"
    trace.status = status
    return MpResult(msgs, trw_mp_beliefs(msgs, mrf, ep), trace, status, changes)


def _non_settling(changes) -> bool:
    return len(changes) >= NON_SETTLING_SWEEPS and changes[NON_SETTLING_SWEEPS - 1] > NON_SETTLING_CHANGE


# ---------------------------------------------------------------------------
# Gradient descent on the dual


# Relative objective change treated as rounding noise by the line search.
ROUNDING_SLACK = 1e-14


def _flat_gradient(state: DualState) -> np.ndarray:
    return np.concatenate([t.ravel() for t in dual_gradient(state)])


def solve_gradient_descent(
    mrf: PairwiseMRF, ep: EdgeProbabilities, tol: float = 1e-8, max_iters: int = 100000, armijo: float = 1e-4
):
    """Full-gradient descent with backtracking (halving) line search.

    Each trial step is the Barzilai-Borwein length ``s.y / y.y`` from the
    previous step (twice the last accepted step when that is not positive),
    halved until the Armijo condition holds.  Close to the optimum the
    required decrease falls below the rounding of F_D; there a step whose
    objective change is at rounding level is also accepted when the
    directional derivative satisfies the approximate Armijo test of Hager and
    Zhang.  Stops once the gradient max-norm is below ``tol``.
    Returns ``(state, trace)``.
    """
    report = validate_probs(ep, mrf.graph, strict_positive=True)
    if report:
        raise ValueError("invalid tree probabilities: " + "; ".join(report))
    state = DualState(mrf, ep)
    trace = SolveTrace()
    t0 = time.perf_counter_ns()
    x = state.flat_beta()
    f = dual_objective(state)
    grad = _flat_gradient(state) if mrf.graph.m else np.zeros(0)
    gnorm = float(np.max(np.abs(grad), initial=0.0))
    trace.sweep_index.append(0)
    trace.sweep_dual.append(f)
    trace.sweep_primal.append(None)
    trace.sweep_residual.append(gnorm)
    step = 1.0
    it = 0
    while gnorm >= tol and it < max_iters:
        it += 1
        g2 = float(grad @ grad)
        if it > 1 and sy > 0:
            step = sy / yy
        else:
            step *= 2.0
        for _ in range(60):
            state.set_flat_beta(x - step * grad)
            f_new = dual_objective(state)
            if f_new <= f - armijo * step * g2:
                grad_new = _flat_gradient(state)
                break
            if f_new <= f + ROUNDING_SLACK * abs(f):
                grad_new = _flat_gradient(state)
                if -float(grad @ grad_new) <= (1.0 - 2.0 * armijo) * g2:
                    break
            step *= 0.5
        else:
            state.set_flat_beta(x)
            raise LineSearchError(f"no decrease after 60 halvings at iteration {it}")
        x_new = state.flat_beta()
        delta = f - f_new
        f = f_new
        sv, yv = x_new - x, grad_new - grad
        sy, yy = float(sv @ yv), float(yv @ yv)
        x, grad = x_new, grad_new
        gnorm = float(np.max(np.abs(grad)))
        trace.rows.append((it, it, -1, -1, f, None, gnorm, delta, time.perf_counter_ns() - t0))
        trace.sweep_index.append(it)
        trace.sweep_dual.append(f)
        trace.sweep_primal.append(None)
        trace.sweep_residual.append(gnorm)
    trace.sweeps = it
    trace.status = "converged" if gnorm < tol else "max_sweeps"
    return state, trace


# ---------------------------------------------------------------------------
# Exact inference by enumeration


def _check_size(mrf: PairwiseMRF):
    total = math.prod(mrf.cards)
    if total > MAX_ASSIGNMENTS:
        raise EnumerationTooLarge(f"{total} assignments exceed the enumeration limit of {MAX_ASSIGNMENTS}")


def _all_scores(mrf: PairwiseMRF):
    """Scores of every assignment in mixed-radix order (last vertex fastest)."""
    _check_size(mrf)
    grids = np.indices(mrf.cards).reshape(mrf.n, -1)
    s = np.zeros(grids.shape[1])
    for i in range(mrf.n):
        s += mrf.node_pot[i][grids[i]]
    for e, (u, v) in enumerate(mrf.graph.edges):
        s += mrf.edge_pot[e][grids[u], grids[v]]
    return grids, s


def exact_log_partition(mrf: PairwiseMRF) -> float:
    _, s = _all_scores(mrf)
    return float(logsumexp(s))


def exact_marginals(mrf: PairwiseMRF) -> PrimalMarginals:
    """Exact singleton marginals and pairwise conditionals by enumeration."""
    grids, s = _all_scores(mrf)
    p = np.exp(s - logsumexp(s))
    g = mrf.graph
    mu = [np.bincount(grids[i], weights=p, minlength=k) for i, k in enumerate(mrf.cards)]
    cf, cb = [], []
    for u, v in g.edges:
        ku, kv = mrf.cards[u], mrf.cards[v]
        joint = np.bincount(grids[u] * kv + grids[v], weights=p, minlength=ku * kv).reshape(ku, kv)
        cf.append(joint / joint.sum(axis=1, keepdims=True))
        cb.append((joint / joint.sum(axis=0, keepdims=True)).T)
    return PrimalMarginals(g, mu, cf, cb)


def brute_force_log_partition(mrf: PairwiseMRF) -> float:
    """Slow second route through ``assignment_score``; for cross-checks only."""
    _check_size(mrf)
    acc = -math.inf
    for x in itertools.product(*(range(k) for k in mrf.cards)):
        acc = np.logaddexp(acc, assignment_score(mrf, x))
    return float(acc)
