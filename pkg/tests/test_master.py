import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gbd_agent import master as mst
from gbd_agent.master import (NEG_INF, ContractViolation, FeasibilityCut, MasterState,
                              OptimalityCut, bound_from_json, bound_to_json, check_feasible,
                              eval_candidate_cost, solve_exact, solve_reduced)
from gbd_agent.nlp import SolveStatus, solve_subproblem
from gbd_agent.problem import SchemaMismatch, binary_points, brute_force_solve


@st.composite
def master_states(draw, max_m=8):
    m = draw(st.integers(1, max_m))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    s = draw(st.integers(0, 3))
    K = rng.integers(-1, 2, size=(s, m)).astype(float)
    b = rng.integers(0, 3, size=s).astype(float)
    state = MasterState(K.reshape(s, m), b, np.zeros(m))
    for _ in range(draw(st.integers(0, 6))):
        state.opt_cuts.append(OptimalityCut(rng.normal(0, 5, m), float(rng.normal(0, 5))))
    for _ in range(draw(st.integers(0, 3))):
        state.feas_cuts.append(FeasibilityCut(rng.normal(0, 2, m), float(rng.normal(0, 1))))
    return state


def naive_master(state, fixed=None):
    """Plain nested-loop oracle: (value, feasible points attaining it)."""
    best, arg = None, []
    for bits in itertools.product((0, 1), repeat=state.m):
        y = np.array(bits, float)
        if any(y[j] != v for j, v in (fixed or {}).items()):
            continue
        if np.any(state.K @ y > state.b + 1e-9):
            continue
        if any(c.v @ y + c.gamma > 1e-9 for c in state.feas_cuts):
            continue
        val = max((c.w @ y + c.beta for c in state.opt_cuts), default=state.mu_lo)
        if best is None or val < best - 1e-9:
            best, arg = val, [y]
        elif abs(val - best) <= 1e-9:
            arg.append(y)
    return best, arg


@given(master_states())
def test_exact_master_matches_naive_oracle(state):
    value, arg = naive_master(state)
    for method in ("enumerate", "bnb"):
        res = solve_exact(state, method)
        if value is None:
            assert res.infeasible
            continue
        assert res.optimal
        assert res.mu_b == pytest.approx(value, abs=1e-9)
        assert check_feasible(state, res.y)
        assert any(np.array_equal(res.y, y) for y in arg)


@given(master_states(max_m=12))
def test_enumeration_and_branch_and_bound_agree(state):
    a, b = solve_exact(state, "enumerate"), solve_exact(state, "bnb")
    assert a.optimal == b.optimal
    if a.optimal:
        assert a.mu_b == pytest.approx(b.mu_b, abs=1e-9)
        np.testing.assert_array_equal(a.y, b.y)


@given(master_states(), st.data())
def test_reduced_master_respects_fixings(state, data):
    fixed = data.draw(st.dictionaries(st.integers(0, state.m - 1), st.integers(0, 1), max_size=state.m))
    value, _ = naive_master(state, fixed)
    for method in ("enumerate", "bnb"):
        res = solve_reduced(state, fixed, method)
        if value is None:
            assert res.infeasible
        else:
            assert all(res.y[j] == v for j, v in fixed.items())
            assert res.mu_b == pytest.approx(value, abs=1e-9)


@given(master_states(), st.integers(0, 2**31 - 1))
def test_master_value_nondecreasing_as_cuts_grow(state, seed):
    rng = np.random.default_rng(seed)
    state.opt_cuts.append(OptimalityCut(rng.normal(0, 5, state.m), 0.0))
    prev = solve_exact(state)
    for _ in range(4):
        if rng.random() < 0.5:
            state.opt_cuts.append(OptimalityCut(rng.normal(0, 5, state.m), float(rng.normal())))
        else:
            state.feas_cuts.append(FeasibilityCut(rng.normal(0, 2, state.m), float(rng.normal())))
        cur = solve_exact(state)
        if prev.infeasible:
            assert cur.infeasible
        elif cur.optimal:
            assert cur.mu_b >= prev.mu_b - 1e-12
        prev = cur


def test_candidate_cost_and_empty_cuts():
    state = MasterState(np.zeros((0, 2)), np.zeros(0), np.zeros(2))
    assert eval_candidate_cost(state, [1, 0]) is NEG_INF
    state.opt_cuts += [OptimalityCut(np.array([1.0, 2.0]), 0.5), OptimalityCut(np.array([-1.0, 0]), 3)]
    assert eval_candidate_cost(state, [1, 1]) == pytest.approx(3.5)
    assert eval_candidate_cost(state, [0, 0]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        eval_candidate_cost(state, [1, 0, 0])


def test_empty_cut_master_returns_floor():
    state = MasterState(np.array([[1.0, 1.0]]), np.array([1.0]), np.zeros(2), mu_lo=-50.0)
    res = solve_exact(state)
    assert res.optimal and res.mu_b == -50.0
    np.testing.assert_array_equal(res.y, [0, 0])


def test_infeasible_binary_rows():
    state = MasterState(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]), np.zeros(1))
    assert solve_exact(state).infeasible
    assert solve_exact(state, "bnb").infeasible


def test_neg_inf_sentinel():
    assert NEG_INF < -1e308 and NEG_INF <= NEG_INF and not NEG_INF < NEG_INF
    assert not NEG_INF > -np.inf and max(NEG_INF, 3.0) == 3.0
    assert NEG_INF <= float("-inf")
    for op in (lambda: NEG_INF + 1, lambda: 1 - NEG_INF, lambda: -NEG_INF, lambda: float(NEG_INF)):
        with pytest.raises(TypeError):
            op()
    assert bound_from_json(bound_to_json(NEG_INF)) is NEG_INF
    assert bound_from_json(json.loads(json.dumps(bound_to_json(2.5)))) == 2.5
    import pickle
    assert pickle.loads(pickle.dumps(NEG_INF)) is NEG_INF


def _cut_pool(inst):
    out = []
    for y in binary_points(inst.m).astype(float):
        if inst.binary_feasible(y):
            out.append((y, solve_subproblem(inst, y)))
    return out


def test_optimality_cuts_tight_and_valid(nominal):
    bf = brute_force_solve(nominal)
    for y, sol in _cut_pool(nominal):
        cut = mst.optimality_cut_from(sol, nominal)
        assert cut.value(y) == pytest.approx(sol.objective, abs=1e-5)
        # a valid cut under-estimates the subproblem value everywhere
        for key, val in bf.values.items():
            assert cut.value(np.array(key, float)) <= val + 1e-6


def test_feasibility_cuts_violated_by_slack(toy):
    seen = 0
    for y, sol in _cut_pool(toy):
        if sol.status is SolveStatus.INFEASIBLE:
            cut = mst.feasibility_cut_from(sol, toy)
            assert cut.lhs(y) >= sol.objective - 1e-6
            seen += 1
            with pytest.raises(ContractViolation):
                mst.optimality_cut_from(sol, toy)
        else:
            with pytest.raises(ContractViolation):
                mst.feasibility_cut_from(sol, toy)
    assert seen


def test_feasibility_cuts_keep_feasible_patterns(toy):
    pool = _cut_pool(toy)
    cuts = [mst.feasibility_cut_from(s, toy) for _, s in pool if s.status is SolveStatus.INFEASIBLE]
    for y, sol in pool:
        if sol.feasible:
            assert all(c.lhs(y) <= 1e-6 for c in cuts)


def test_cut_dump_round_trip(tmp_path, nominal):
    state = MasterState.for_instance(nominal)
    for y, sol in _cut_pool(nominal)[:3]:
        mst.add_optimality_cut(state, sol, nominal)
    state.feas_cuts.append(FeasibilityCut(np.ones(5), -3.0))
    mst.dump_cuts(state, tmp_path / "cuts.json")
    back = mst.load_cuts(tmp_path / "cuts.json")
    a, b = solve_exact(state), solve_exact(back)
    assert a.mu_b == b.mu_b and np.array_equal(a.y, b.y)
    doc = mst.cuts_to_dict(state)
    with pytest.raises(SchemaMismatch):
        mst.state_from_dict({**doc, "schema_version": 7})
    doc["cuts"][0]["kind"] = "other"
    with pytest.raises(SchemaMismatch):
        mst.state_from_dict(doc)


def test_bad_fixings_and_methods():
    state = MasterState(np.zeros((0, 3)), np.zeros(0), np.zeros(3))
    with pytest.raises(ValueError):
        solve_reduced(state, {5: 1})
    with pytest.raises(ValueError):
        solve_reduced(state, {0: 2})
    with pytest.raises(ValueError):
        solve_exact(state, "simplex")
