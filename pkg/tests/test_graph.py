import numpy as np
import pytest
from hypothesis import given, strategies as st

from gbd_agent import master as mst
from gbd_agent.engine import solve_classical
from gbd_agent.graph import (EDGE_ORDER, BipartiteGraph, encode, encode_normalized,
                             export_snapshot, normalize)
from gbd_agent.master import FeasibilityCut, MasterState, OptimalityCut
from gbd_agent.nlp import solve_subproblem
from gbd_agent.problem import SchemaMismatch


def test_binary_rows_only(nominal):
    state = MasterState.for_instance(nominal)
    g = encode(state, nominal)
    assert (g.n_var, g.n_con) == (5, 3)
    A = g.adjacency()
    expected = np.zeros((8, 8), dtype=np.int8)
    expected[:5, 5:] = (nominal.K != 0).T
    expected[5:, :5] = nominal.K != 0
    np.testing.assert_array_equal(A, expected)
    np.testing.assert_array_equal(g.x_con, nominal.b)


def test_zero_dual_cut_carries_costs(nominal):
    y = np.array([0, 1, 1, 1, 0.0])
    sol = solve_subproblem(nominal, y)
    sol.mu[:] = 0.0
    sol.cut_shift = 0.0
    state = MasterState.for_instance(nominal)
    mst.add_optimality_cut(state, sol, nominal)
    g = encode(state, nominal)
    first = g.con_idx == 0
    np.testing.assert_array_equal(g.var_idx[first], np.arange(5))
    np.testing.assert_allclose(g.x_edge[first], nominal.e)
    assert g.x_con[0] == pytest.approx(-nominal.convex.f(sol.x))


def test_edge_features_recomputed_from_duals(nominal):
    _, trace = solve_classical(nominal)
    state = MasterState.for_instance(nominal)
    for row in trace.rows:
        y = np.array(row["y"], float)
        sol = solve_subproblem(nominal, y)
        mst.add_optimality_cut(state, sol, nominal)
        coef = nominal.e + nominal.B.T @ sol.mu  # no equality rows in this model
        g = encode(state, nominal)
        k = len(state.opt_cuts) - 1
        sel = g.con_idx == k
        dense = np.zeros(5)
        dense[g.var_idx[sel]] = g.x_edge[sel]
        np.testing.assert_allclose(dense, coef, atol=1e-12)


def test_constraint_major_order():
    state = MasterState(np.array([[1.0, 0, 2]]), np.array([1.0]), np.zeros(3))
    state.opt_cuts.append(OptimalityCut(np.array([0.0, 3, 4]), 1.0))
    state.feas_cuts.append(FeasibilityCut(np.array([5.0, 0, 0]), -1.0))
    g = encode(state)
    assert g.con_idx.tolist() == [0, 0, 1, 2, 2]
    assert g.var_idx.tolist() == [1, 2, 0, 0, 2]
    assert g.x_edge.tolist() == [3, 4, 5, 1, 2]
    assert g.x_con.tolist() == [-1.0, 1.0, 1.0]


def test_normalize_examples():
    g = BipartiteGraph(1, 2, np.array([0, 1]), np.array([0, 0]), np.zeros(1),
                       np.array([2.0, -4.0]), np.array([0.0, 0.0]))
    n = normalize(g)
    np.testing.assert_array_equal(n.x_con, [0.5, -1.0])
    np.testing.assert_array_equal(n.x_edge, [0.0, 0.0])
    z = BipartiteGraph(1, 1, np.array([0]), np.array([0]), np.ones(1), np.zeros(1), np.array([3.0]))
    np.testing.assert_array_equal(normalize(z).x_con, [0.0])


@st.composite
def states(draw):
    m = draw(st.integers(1, 6))
    rng = np.random.default_rng(draw(st.integers(0, 2**31 - 1)))
    state = MasterState(rng.integers(-1, 2, (2, m)).astype(float), np.ones(2),
                        rng.integers(0, 2, m).astype(float))
    for _ in range(draw(st.integers(0, 5))):
        state.opt_cuts.append(OptimalityCut(rng.normal(0, 30, m), float(rng.normal(0, 100))))
    return state


@given(states())
def test_normalize_idempotent_and_bounded(state):
    n1 = normalize(encode(state))
    n2 = normalize(n1)
    np.testing.assert_array_equal(n1.x_con, n2.x_con)
    np.testing.assert_array_equal(n1.x_edge, n2.x_edge)
    assert np.all(np.abs(n1.x_con) <= 1) and np.all(np.abs(n1.x_edge) <= 1)
    np.testing.assert_array_equal(n1.x_var, state.y_prev)


@given(states(), st.integers(0, 2**31 - 1))
def test_permutation_preserves_adjacency_structure(state, seed):
    g = encode(state)
    perm = np.random.default_rng(seed).permutation(g.n_con)
    p = g.permute_constraints(perm)
    A, B = g.adjacency(), p.adjacency()
    full = np.concatenate([np.arange(g.n_var), g.n_var + perm])
    np.testing.assert_array_equal(B[np.ix_(full, full)], A)
    for i in range(g.n_con):
        assert p.x_con[perm[i]] == g.x_con[i]


def test_graph_grows_one_constraint_per_iteration(nominal):
    sizes = []

    def watch(state, res):
        sizes.append(encode_normalized(state, nominal).n_con)

    solve_classical(nominal, observer=watch)
    assert np.all(np.diff(sizes) == 1)
    assert sizes[0] == nominal.s + 1


def test_snapshot_round_trip(tmp_path, nominal):
    state = MasterState.for_instance(nominal, np.array([0, 1, 0, 0, 0.0]))
    mst.add_optimality_cut(state, solve_subproblem(nominal, state.y_prev), nominal)
    g = encode_normalized(state, nominal)
    export_snapshot(g, tmp_path / "g.json")
    import json
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["edge_order"] == EDGE_ORDER
    back = BipartiteGraph.from_dict(doc)
    np.testing.assert_array_equal(back.x_edge, g.x_edge)
    np.testing.assert_array_equal(back.con_idx, g.con_idx)
    with pytest.raises(SchemaMismatch):
        BipartiteGraph.from_dict({**doc, "edge_order": "var-major"})
