import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trwgp.model import (
    Graph,
    IsingSpec,
    ModelFormatError,
    PairwiseMRF,
    assignment_score,
    gen_ising_grid,
    grid_graph,
    parse_model,
    read_model,
    serialize_model,
    validate_model,
    write_model,
)

from helpers import random_connected_graph, random_mrf

TWO_NODE_ZERO = """TRWMRF 1
nodes 2
cards 2 2
edges 1
0 1
nodepot 0 0 0
nodepot 1 0 0
edgepot 0 1 0 0 0 0
"""


class TestGraph:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError, match="self-loop"):
            Graph(3, [(1, 1)])

    def test_rejects_duplicate(self):
        with pytest.raises(ValueError, match="duplicate"):
            Graph(3, [(0, 1), (0, 1)])

    def test_rejects_reversed_edge(self):
        with pytest.raises(ValueError):
            Graph(3, [(1, 0)])

    def test_find_edge_either_order(self):
        g = Graph(3, [(0, 1), (1, 2)])
        assert g.find_edge(2, 1) == g.find_edge(1, 2) == 1
        assert not g.has_edge(0, 2)

    def test_components(self):
        g = Graph(4, [(0, 1), (2, 3)])
        assert len(g.components()) == 2
        assert not g.is_connected()


class TestParse:
    def test_two_node_zero_model(self):
        mrf = parse_model(TWO_NODE_ZERO)
        assert mrf.n == 2
        assert mrf.graph.edges == [(0, 1)]
        np.testing.assert_array_equal(mrf.edge_pot[0], np.zeros((2, 2)))
        assert all(np.all(t == 0) for t in mrf.node_pot)

    def test_accepts_bytes_and_comments(self):
        text = "# header comment\n" + TWO_NODE_ZERO.replace("edges 1\n", "edges 1\n# the edge\n")
        assert parse_model(text.encode()).graph.m == 1

    def test_reversed_edge_line(self):
        bad = TWO_NODE_ZERO.replace("\n0 1\n", "\n1 0\n")
        with pytest.raises(ModelFormatError, match="not in canonical orientation") as exc:
            parse_model(bad)
        assert exc.value.line == 5

    def test_disconnected_rejected(self):
        text = (
            "TRWMRF 1\nnodes 3\ncards 2 2 2\nedges 1\n0 1\n"
            "nodepot 0 0 0\nnodepot 1 0 0\nnodepot 2 0 0\nedgepot 0 1 0 0 0 0\n"
        )
        with pytest.raises(ModelFormatError, match="disconnected"):
            parse_model(text)

    @pytest.mark.parametrize(
        "old,new,msg",
        [
            ("TRWMRF 1", "TRWMRF 2", "header"),
            ("cards 2 2", "cards 2", "cardinalities"),
            ("nodepot 1 0 0", "nodepot 1 0", "expected 2 values"),
            ("edgepot 0 1 0 0 0 0", "edgepot 0 1 0 0 0 nan", "non-finite"),
            ("edgepot 0 1 0 0 0 0", "edgepot 0 1 0 0 0 x", "expected numbers"),
        ],
    )
    def test_errors_carry_messages(self, old, new, msg):
        with pytest.raises(ModelFormatError, match=msg):
            parse_model(TWO_NODE_ZERO.replace(old, new))

    def test_truncated(self):
        with pytest.raises(ModelFormatError, match="unexpected end"):
            parse_model(TWO_NODE_ZERO.rsplit("\n", 2)[0])

    def test_trailing_content(self):
        with pytest.raises(ModelFormatError, match="trailing"):
            parse_model(TWO_NODE_ZERO + "nodepot 0 1 1\n")


class TestRoundTrip:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 7))
    def test_parse_serialize_identity(self, seed, n):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(n, rng)
        cards = [int(k) for k in rng.integers(2, 4, size=n)]
        mrf = random_mrf(g, rng, cards, scale=10.0 ** rng.uniform(-3, 3))
        back = parse_model(serialize_model(mrf))
        assert back.graph == mrf.graph
        assert back.cards == mrf.cards
        for a, b in zip(back.node_pot + back.edge_pot, mrf.node_pot + mrf.edge_pot):
            np.testing.assert_array_equal(a, b)

    def test_file_round_trip(self, tmp_path):
        mrf = gen_ising_grid(IsingSpec(3, 4, 1.0, 2.0, seed=5))
        write_model(mrf, tmp_path / "m.trwmrf")
        back = read_model(tmp_path / "m.trwmrf")
        assert serialize_model(back) == serialize_model(mrf)


class TestIsingGrid:
    def test_grid_counts(self):
        mrf = gen_ising_grid(IsingSpec(10, 10, 1.0, 9.0, seed=0))
        assert mrf.n == 100
        assert mrf.graph.m == 180
        assert mrf.graph.is_connected()

    def test_grid_edges_sorted(self):
        g = grid_graph(3, 4)
        assert g.edges == sorted(g.edges)
        assert (0, 1) in g.edges and (0, 4) in g.edges and (3, 4) not in g.edges

    def test_zero_ranges(self):
        mrf = gen_ising_grid(IsingSpec(3, 3, 0.0, 0.0, seed=3))
        assert all(np.all(t == 0) for t in mrf.node_pot + mrf.edge_pot)

    def test_deterministic(self):
        spec = IsingSpec(4, 5, 1.0, 9.0, seed=11)
        assert serialize_model(gen_ising_grid(spec)) == serialize_model(gen_ising_grid(spec))

    def test_seeds_differ(self):
        a = gen_ising_grid(IsingSpec(3, 3, 1.0, 1.0, seed=0))
        b = gen_ising_grid(IsingSpec(3, 3, 1.0, 1.0, seed=1))
        assert serialize_model(a) != serialize_model(b)

    def test_spin_encoding(self):
        mrf = gen_ising_grid(IsingSpec(2, 2, 1.0, 3.0, seed=2))
        for t in mrf.node_pot:
            assert t[0] == -t[1]
            assert abs(t[0]) <= 1.0
        for t in mrf.edge_pot:
            w = t[0, 0]
            np.testing.assert_array_equal(t, [[w, -w], [-w, w]])
            assert abs(w) <= 3.0

    def test_draw_order_fields_then_couplings(self):
        spec = IsingSpec(2, 3, 1.5, 4.0, seed=9)
        mrf = gen_ising_grid(spec)
        rng = np.random.Generator(np.random.PCG64(9))
        h = rng.uniform(-1.5, 1.5, size=6)
        w = rng.uniform(-4.0, 4.0, size=7)
        np.testing.assert_array_equal([t[0] for t in mrf.node_pot], h)
        np.testing.assert_array_equal([t[0, 0] for t in mrf.edge_pot], w)

    def test_uniform_deciles(self):
        mrf = gen_ising_grid(IsingSpec(250, 400, 2.0, 5.0, seed=4))
        h = np.array([t[0] for t in mrf.node_pot])
        w = np.array([t[0, 0] for t in mrf.edge_pot])
        for vals, a in ((h, 2.0), (w, 5.0)):
            assert vals.min() >= -a and vals.max() <= a
            counts, _ = np.histogram(vals, bins=10, range=(-a, a))
            n = len(vals)
            sigma = math.sqrt(n * 0.1 * 0.9)
            assert np.all(np.abs(counts - n / 10) <= 3 * sigma), counts

    @pytest.mark.parametrize("args", [(0, 3, 1, 1), (1, 1, 1, 1), (2, 2, -1, 1), (2, 2, 1, -0.5)])
    def test_invalid_parameters(self, args):
        with pytest.raises(ValueError):
            IsingSpec(*args)


class TestAssignmentScore:
    def test_zero_model(self):
        mrf = PairwiseMRF.zeros(grid_graph(2, 2), 3)
        assert assignment_score(mrf, [0, 2, 1, 1]) == 0.0

    def test_two_node_ising(self):
        g = Graph(2, [(0, 1)])
        mrf = PairwiseMRF(g, [np.zeros(2), np.zeros(2)], [np.array([[1.0, -1.0], [-1.0, 1.0]])])
        assert assignment_score(mrf, [0, 0]) == 1.0
        assert assignment_score(mrf, [0, 1]) == -1.0

    def test_matches_resummation(self):
        rng = np.random.default_rng(7)
        g = random_connected_graph(4, rng, extra=2)
        mrf = random_mrf(g, rng, [2, 3, 2, 3])
        for _ in range(20):
            x = [int(rng.integers(k)) for k in mrf.cards]
            ref = 0.0
            for i in range(4):
                ref += mrf.node_pot[i][x[i]]
            for (u, v), t in zip(g.edges, mrf.edge_pot):
                ref += t[x[u], x[v]]
            assert assignment_score(mrf, x) == pytest.approx(ref, abs=1e-12)

    def test_edge_order_invariance(self):
        rng = np.random.default_rng(8)
        mrf = random_mrf(random_connected_graph(6, rng, extra=4), rng, 3)
        x = [int(rng.integers(3)) for _ in range(6)]
        base = assignment_score(mrf, x)
        terms = [mrf.edge_pot[e][x[u], x[v]] for e, (u, v) in enumerate(mrf.graph.edges)]
        nodes = sum(mrf.node_pot[i][x[i]] for i in range(6))
        for _ in range(10):
            perm = rng.permutation(len(terms))
            total = nodes
            for k in perm:
                total += terms[k]
            assert abs(total - base) <= 1e-12

    def test_rejects_bad_state(self):
        mrf = PairwiseMRF.zeros(grid_graph(1, 2), 2)
        with pytest.raises(ValueError):
            assignment_score(mrf, [0, 2])


class TestValidate:
    def test_valid_grid(self):
        assert validate_model(gen_ising_grid(IsingSpec(4, 4, 1.0, 1.0))) == []

    def test_nan_entry_reported(self):
        mrf = gen_ising_grid(IsingSpec(2, 2, 1.0, 1.0))
        mrf.edge_pot[2][1, 0] = np.nan
        report = validate_model(mrf)
        assert len(report) == 1
        assert "edgepot (1, 3)[1, 0]" in report[0]

    def test_disconnected_reported(self):
        mrf = PairwiseMRF.zeros(Graph(4, [(0, 1), (2, 3)]), 2)
        assert any(r.startswith("disconnected") for r in validate_model(mrf))
