import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trwgp.baselines import exact_log_partition, exact_marginals
from trwgp.dual import DualState, dual_objective, optimality_residual, to_primal
from trwgp.model import Graph, IsingSpec, PairwiseMRF, assignment_score, gen_ising_grid
from trwgp.solver import (
    TRACE_COLUMNS,
    GpConfig,
    initial_marginals,
    reparam_product,
    solve,
    step_size,
    update_edge_beta,
    update_edge_marginal_form,
)
from trwgp.spanning import uniform_tree_probs

from helpers import random_connected_graph, random_mrf, random_state, random_tree_edges

K3 = Graph(3, [(0, 1), (0, 2), (1, 2)])
EDGE = Graph(2, [(0, 1)])
PATH3 = Graph(3, [(0, 1), (1, 2)])


def all_tables(m):
    return m.mu_node + m.cond_fwd + m.cond_bwd


class TestStepSize:
    def test_triangle(self):
        ep = uniform_tree_probs(K3)
        for e in range(3):
            assert step_size(ep, e) == pytest.approx(1 / 6, abs=1e-15)

    def test_single_edge(self):
        assert step_size(uniform_tree_probs(EDGE), (0, 1)) == pytest.approx(0.25, abs=1e-15)

    def test_path_factor(self):
        ep = uniform_tree_probs(PATH3)
        assert step_size(ep, (1, 0), 0.999) == pytest.approx(0.999 / 3, abs=1e-15)

    @pytest.mark.parametrize("factor", [0.0, 1.0, -0.2, 1.5])
    def test_config_rejects_factor(self, factor):
        with pytest.raises(ValueError):
            GpConfig(eps_factor=factor)


class TestUpdate:
    def test_zero_model_fixed_point(self):
        g = random_connected_graph(5, np.random.default_rng(0), extra=2)
        ep = uniform_tree_probs(g)
        st_ = DualState(PairwiseMRF.zeros(g, 2), ep)
        for e in range(g.m):
            delta, res = update_edge_beta(st_, e, step_size(ep, e))
            assert abs(delta) < 1e-15 and res < 1e-15
            np.testing.assert_allclose(st_.beta[e], 0.0, atol=1e-15)

    def test_symmetric_pair_fixed_point(self):
        mrf = PairwiseMRF(EDGE, [np.zeros(2), np.zeros(2)], [np.array([[2.0, -2.0], [-2.0, 2.0]])])
        ep = uniform_tree_probs(EDGE)
        st_ = DualState(mrf, ep)
        delta, res = update_edge_beta(st_, 0, step_size(ep, 0))
        assert abs(delta) < 1e-15 and res < 1e-15
        np.testing.assert_allclose(st_.beta[0], 0.0, atol=1e-15)

    def test_delta_matches_recomputed_objective(self):
        rng = np.random.default_rng(1)
        mrf = gen_ising_grid(IsingSpec(3, 3, 1.0, 2.0, seed=4))
        ep = uniform_tree_probs(mrf.graph)
        st_ = random_state(mrf, ep, rng)
        for e in rng.permutation(mrf.graph.m):
            before = dual_objective(st_)
            delta, _ = update_edge_beta(st_, e, step_size(ep, e))
            after = dual_objective(st_)
            assert delta >= 0
            assert delta == pytest.approx(before - after, abs=1e-10)

    def test_positive_delta_iff_residual(self):
        rng = np.random.default_rng(2)
        mrf = random_mrf(random_connected_graph(6, rng, extra=3), rng, 3)
        ep = uniform_tree_probs(mrf.graph)
        st_ = random_state(mrf, ep, rng)
        for e in range(mrf.graph.m):
            delta, res = update_edge_beta(st_, e, step_size(ep, e))
            assert res > 1e-6 and delta > 0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), factor=st.floats(0.01, 0.99))
    def test_monotone(self, seed, factor):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(int(rng.integers(2, 7)), rng, extra=2)
        mrf = random_mrf(g, rng, [int(k) for k in rng.integers(2, 4, size=g.n)], scale=5.0)
        ep = uniform_tree_probs(g)
        st_ = random_state(mrf, ep, rng, scale=3.0)
        for e in list(range(g.m)) * 3:
            before = dual_objective(st_)
            update_edge_beta(st_, e, step_size(ep, e, factor))
            assert dual_objective(st_) <= before + 1e-12

    def test_locality(self):
        rng = np.random.default_rng(3)
        mrf = gen_ising_grid(IsingSpec(3, 4, 1.0, 3.0, seed=1))
        ep = uniform_tree_probs(mrf.graph)
        st_ = random_state(mrf, ep, rng)
        e = 7
        u, v = mrf.graph.edges[e]
        before = to_primal(st_)
        update_edge_beta(st_, e, step_size(ep, e))
        after = to_primal(st_)
        for i in range(mrf.n):
            if i not in (u, v):
                assert np.array_equal(before.mu_node[i], after.mu_node[i])
        for f in range(mrf.graph.m):
            if f != e:
                assert np.array_equal(before.cond_fwd[f], after.cond_fwd[f])
                assert np.array_equal(before.cond_bwd[f], after.cond_bwd[f])
        assert st_.verify_cache()


class TestMarginalForm:
    def test_zero_model_initial_marginals_fixed(self):
        g = PATH3
        ep = uniform_tree_probs(g)
        m = initial_marginals(PairwiseMRF.zeros(g, 3), ep)
        for e in range(g.m):
            out = update_edge_marginal_form(m, ep, e, step_size(ep, e))
            for a, b in zip(all_tables(m), all_tables(out)):
                np.testing.assert_allclose(a, b, atol=1e-15)

    def test_initial_marginals_follow_fields(self):
        rng = np.random.default_rng(4)
        mrf = random_mrf(PATH3, rng, 2)
        ep = uniform_tree_probs(PATH3)
        m = initial_marginals(mrf, ep)
        # at beta = 0 the singleton is proportional to exp((theta_i - sum lambda) / rho_o)
        st_ = DualState(mrf, ep)
        np.testing.assert_allclose(np.log(m.mu_node[0]), st_.log_node_marginal(0), atol=1e-14)

    def test_matches_beta_form(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 7))
            g = random_connected_graph(n, rng, extra=int(rng.integers(0, 3)))
            mrf = random_mrf(g, rng, [int(k) for k in rng.integers(2, 4, size=n)], scale=3.0)
            ep = uniform_tree_probs(g)
            st_ = random_state(mrf, ep, rng, scale=2.0)
            e = int(rng.integers(g.m))
            eps = step_size(ep, e, float(rng.uniform(0.1, 0.9)))
            via_marg = update_edge_marginal_form(to_primal(st_), ep, e, eps)
            update_edge_beta(st_, e, eps)
            via_beta = to_primal(st_)
            for a, b in zip(all_tables(via_marg), all_tables(via_beta)):
                worst = max(worst, float(np.max(np.abs(a - b))))
        assert worst <= 1e-10

    def test_rows_normalized(self):
        rng = np.random.default_rng(6)
        mrf = random_mrf(random_connected_graph(5, rng), rng, 3, scale=4.0)
        ep = uniform_tree_probs(mrf.graph)
        m = to_primal(random_state(mrf, ep, rng, scale=3.0))
        for e in range(mrf.graph.m):
            m = update_edge_marginal_form(m, ep, e, step_size(ep, e))
            u, v = mrf.graph.edges[e]
            assert m.mu_node[u].sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(m.cond_fwd[e].sum(axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(m.cond_bwd[e].sum(axis=1), 1.0, atol=1e-12)


class TestReparametrization:
    def test_zero_model_constant(self):
        g = PATH3
        ep = uniform_tree_probs(g)
        m = initial_marginals(PairwiseMRF.zeros(g, 2), ep)
        vals = {reparam_product(m, ep, x) for x in np.ndindex(2, 2, 2)}
        assert max(vals) - min(vals) < 1e-15

    def test_offset_is_dual_objective(self):
        rng = np.random.default_rng(7)
        mrf = random_mrf(random_connected_graph(6, rng, extra=3), rng, [2, 3, 2, 3, 2, 3])
        ep = uniform_tree_probs(mrf.graph)
        st_ = random_state(mrf, ep, rng)
        m = to_primal(st_)
        f = dual_objective(st_)
        for _ in range(20):
            x = [int(rng.integers(k)) for k in mrf.cards]
            assert assignment_score(mrf, x) - reparam_product(m, ep, x) == pytest.approx(f, abs=1e-10)

    def test_offset_tracks_delta(self):
        mrf = gen_ising_grid(IsingSpec(3, 3, 1.0, 2.0, seed=8))
        ep = uniform_tree_probs(mrf.graph)
        rng = np.random.default_rng(8)
        xs = [rng.integers(2, size=9) for _ in range(10)]
        offsets, cum = [], [0.0]

        def cb(sweep, state, trace):
            m = to_primal(state)
            offsets.append(np.mean([assignment_score(mrf, x) - reparam_product(m, ep, x) for x in xs]))
            cum.append(float(trace.deltas.sum()))

        solve(mrf, ep, GpConfig(max_sweeps=5), callback=cb)
        for k in range(1, len(offsets)):
            assert offsets[k] - offsets[k - 1] == pytest.approx(-(cum[k + 1] - cum[k]), abs=1e-9)


class TestSolve:
    def test_tree_exact(self):
        rng = np.random.default_rng(9)
        g = Graph(8, random_tree_edges(8, rng))
        mrf = random_mrf(g, rng, [int(k) for k in rng.integers(2, 4, size=8)])
        ep = uniform_tree_probs(g)
        state, marg, trace = solve(mrf, ep)
        assert trace.converged
        assert trace.final_dual == pytest.approx(exact_log_partition(mrf), abs=1e-6)
        exact = exact_marginals(mrf)
        for a, b in zip(marg.mu_node, exact.mu_node):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_grid_converges_to_upper_bound(self):
        mrf = gen_ising_grid(IsingSpec(3, 3, 1.0, 1.0, seed=0))
        ep = uniform_tree_probs(mrf.graph)
        state, marg, trace = solve(mrf, ep)
        assert trace.converged and trace.final_residual < 1e-8
        assert trace.final_dual >= exact_log_partition(mrf) - 1e-9
        assert optimality_residual(marg) == trace.final_residual
        assert marg.min_entry() > 0

    def test_dual_column_non_increasing(self):
        mrf = gen_ising_grid(IsingSpec(4, 4, 1.0, 9.0, seed=2))
        _, _, trace = solve(mrf, uniform_tree_probs(mrf.graph), GpConfig(max_sweeps=30))
        d = trace.dual_values
        assert np.all(np.diff(d) <= 1e-12)
        assert trace.deltas.min() >= -1e-12
        assert trace.min_delta == trace.deltas.min()

    def test_backends_agree(self):
        mrf = random_mrf(random_connected_graph(7, np.random.default_rng(10), extra=4),
                         np.random.default_rng(11), [2, 3, 2, 3, 2, 3, 4], scale=3.0)
        ep = uniform_tree_probs(mrf.graph)
        cfg = GpConfig(max_sweeps=40, eps_factor=0.7)
        sa, _, ta = solve(mrf, ep, cfg, backend="compiled")
        sb, _, tb = solve(mrf, ep, cfg, backend="numpy")
        np.testing.assert_allclose(sa.flat_beta(), sb.flat_beta(), atol=1e-11)
        np.testing.assert_allclose(ta.deltas, tb.deltas, atol=1e-11)
        np.testing.assert_allclose(ta.sweep_dual, tb.sweep_dual, atol=1e-11)

    def test_sparse_checking_matches_dense(self):
        mrf = gen_ising_grid(IsingSpec(3, 3, 1.0, 2.0, seed=5))
        ep = uniform_tree_probs(mrf.graph)
        sa, _, ta = solve(mrf, ep, GpConfig(max_sweeps=60))
        sb, _, tb = solve(mrf, ep, GpConfig(max_sweeps=60, check_every=25, record_updates=False))
        np.testing.assert_array_equal(sa.flat_beta(), sb.flat_beta())
        assert tb.rows == [] and tb.updates == ta.updates == 60 * mrf.graph.m
        assert tb.sweep_index == [0, 25, 50, 60]
        assert tb.final_dual == pytest.approx(ta.final_dual, abs=1e-12)
        assert tb.min_delta == ta.min_delta

    def test_zero_model_stops_immediately(self):
        g = random_connected_graph(4, np.random.default_rng(12))
        _, _, trace = solve(PairwiseMRF.zeros(g, 2), uniform_tree_probs(g))
        assert trace.converged and trace.sweeps == 0 and trace.rows == []

    def test_rejects_invalid_probabilities(self):
        ep = uniform_tree_probs(PATH3)
        ep.rho_root = ep.rho_root * 0.5
        with pytest.raises(ValueError, match="root mass"):
            solve(PairwiseMRF.zeros(PATH3, 2), ep)

    def test_cap_status(self):
        mrf = gen_ising_grid(IsingSpec(3, 3, 1.0, 3.0, seed=1))
        _, _, trace = solve(mrf, uniform_tree_probs(mrf.graph), GpConfig(max_sweeps=3))
        assert trace.status == "max_sweeps" and trace.sweeps == 3


class TestTraceCsv:
    def test_columns_and_rows(self):
        mrf = gen_ising_grid(IsingSpec(2, 3, 1.0, 2.0, seed=3))
        _, _, trace = solve(mrf, uniform_tree_probs(mrf.graph), GpConfig(max_sweeps=4, primal_eval_every=2))
        rows = list(csv.reader(io.StringIO(trace.to_csv())))
        assert tuple(rows[0]) == TRACE_COLUMNS
        body = rows[1:]
        assert len(body) == 4 * mrf.graph.m
        primal_rows = [r for r in body if r[5] != ""]
        assert [int(r[1]) for r in primal_rows] == [2, 4]
        for r in body:
            float(r[4]), float(r[6]), float(r[7])
            assert int(r[8]) >= 0
        # the 17-significant-digit format round-trips the stored values
        assert float(body[-1][4]) == trace.rows[-1][4]

    def test_timing_column_can_be_zeroed(self):
        mrf = gen_ising_grid(IsingSpec(2, 2, 1.0, 2.0, seed=3))
        ep = uniform_tree_probs(mrf.graph)
        a = solve(mrf, ep, GpConfig(max_sweeps=3))[2].to_csv(with_timing=False)
        b = solve(mrf, ep, GpConfig(max_sweeps=3))[2].to_csv(with_timing=False)
        assert a == b
