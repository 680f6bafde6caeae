import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gbd_agent import nn
from gbd_agent.graph import BipartiteGraph
from gbd_agent.problem import SchemaMismatch
from gradcheck import check, jitter_biases, random_graph

SMALL = dict(hidden=4, filter_hidden=3, dense=5)


def dense_ecc_reference(P, prefix, g: BipartiteGraph, X):
    """Per-node loop over the full adjacency, materializing each edge filter."""
    d_in, d_out = X.shape[1], P[f"{prefix}.bias"].shape[0]
    N = g.n_nodes
    coef = np.zeros((N, N))
    A = np.zeros((N, N), bool)
    for c, v, w in zip(g.con_idx, g.var_idx, g.x_edge):
        i, j = v, g.n_var + c
        A[i, j] = A[j, i] = True
        coef[i, j] = coef[j, i] = w
    out = np.zeros((N, d_out))
    for i in range(N):
        nbrs = np.flatnonzero(A[i])
        acc = np.zeros(d_out)
        for j in nbrs:
            h = np.tanh(coef[i, j] * P[f"{prefix}.W1"][0] + P[f"{prefix}.b1"])
            theta = (h @ P[f"{prefix}.W2"] + P[f"{prefix}.b2"]).reshape(d_in, d_out)
            acc += X[j] @ theta
        out[i] = (acc / len(nbrs) if len(nbrs) else 0.0) + P[f"{prefix}.bias"]
    return out


def test_ecc_matches_dense_reference(rng):
    for _ in range(10):
        g = random_graph(rng)
        params = jitter_biases(nn.init_actor(g.n_var, rng, **SMALL), rng)
        batch = nn.GraphBatch([g])
        X = batch.x0
        for layer in range(2):
            got, _ = nn.ecc_forward(params.arrays, f"ecc{layer}", batch, X)
            ref = dense_ecc_reference(params.arrays, f"ecc{layer}", g, X)
            np.testing.assert_allclose(got, ref, atol=1e-9)
            X = np.maximum(got, 0)


def test_isolated_node_gets_bias(rng):
    g = BipartiteGraph(1, 0, np.zeros(0, int), np.zeros(0, int), np.ones(1), np.zeros(0), np.zeros(0))
    params = jitter_biases(nn.init_actor(1, rng), rng)
    out, _ = nn.ecc_forward(params.arrays, "ecc0", nn.GraphBatch([g]), np.ones((1, 1)))
    np.testing.assert_array_equal(out[0], params.arrays["ecc0.bias"])
    p = nn.actor_forward(params, g)
    assert p.shape == (1,) and 0 < p[0] < 1
    assert np.isfinite(nn.critic_forward(jitter_biases(nn.init_critic(1, rng), rng), g))


def test_unit_filter_copies_neighbor():
    g = BipartiteGraph(1, 1, np.array([0]), np.array([0]), np.array([0.7]), np.array([-0.2]),
                       np.array([1.0]))
    P = {"ecc0.W1": np.zeros((1, 1)), "ecc0.b1": np.zeros(1), "ecc0.W2": np.zeros((1, 1)),
         "ecc0.b2": np.ones(1), "ecc0.bias": np.zeros(1)}
    out, _ = nn.ecc_forward(P, "ecc0", nn.GraphBatch([g]), np.array([[0.7], [-0.2]]))
    np.testing.assert_allclose(out[:, 0], [-0.2, 0.7])


def test_zero_params():
    rng = np.random.default_rng(0)
    g = random_graph(rng, m=4)
    actor = nn.zero_params(nn.init_actor(4, rng))
    np.testing.assert_array_equal(nn.actor_forward(actor, g), np.full(4, 0.5))
    assert nn.critic_forward(nn.zero_params(nn.init_critic(4, rng)), g) == 0.0


@pytest.mark.parametrize("role", ["actor", "critic"])
def test_gradients_match_finite_differences(role, rng):
    for _ in range(5):
        g = random_graph(rng)
        params = jitter_biases(nn.init_params(role, g.n_var, rng, **SMALL), rng)
        errs = check(params, [g], rng)
        assert max(errs.values()) <= 1e-4, errs


def test_gradients_full_width_sampled(rng):
    graphs = [random_graph(rng, m=5) for _ in range(3)]
    params = jitter_biases(nn.init_actor(5, rng), rng)
    errs = check(params, graphs, rng, coords=25)
    assert max(errs.values()) <= 1e-4, errs


def test_logit_gradient_path(rng):
    g = random_graph(rng, m=3)
    params = jitter_biases(nn.init_actor(3, rng, **SMALL), rng)
    y = np.array([1.0, 0.0, 1.0])
    p, tape = nn.forward(params, g)
    via_logits = nn.backward(tape, (p - y) / 3, wrt="logits")
    p, tape = nn.forward(params, g)
    via_output = nn.backward(tape, nn.bce_grad(y, p))
    for k in via_logits:
        np.testing.assert_allclose(via_logits[k], via_output[k], rtol=1e-7, atol=1e-12)


def test_zero_upstream_and_double_backward(rng):
    g = random_graph(rng)
    params = jitter_biases(nn.init_actor(g.n_var, rng), rng)
    out, tape = nn.forward(params, g)
    grads = nn.backward(tape, np.zeros_like(out))
    assert all(not np.any(v) for v in grads.values())
    with pytest.raises(RuntimeError):
        nn.backward(tape, np.zeros_like(out))


def test_permutation_invariance(rng):
    for _ in range(10):
        g = random_graph(rng, n_con=5)
        params = jitter_biases(nn.init_actor(g.n_var, rng), rng)
        critic = jitter_biases(nn.init_critic(g.n_var, rng), rng)
        perm = rng.permutation(g.n_con)
        h = g.permute_constraints(perm)
        np.testing.assert_allclose(nn.actor_forward(params, g), nn.actor_forward(params, h), atol=1e-9)
        assert nn.critic_forward(critic, g) == pytest.approx(nn.critic_forward(critic, h), abs=1e-9)


def test_batch_equals_single(rng):
    graphs = [random_graph(rng, m=3) for _ in range(4)]
    params = jitter_biases(nn.init_actor(3, rng), rng)
    batched, _ = nn.forward(params, graphs)
    for i, g in enumerate(graphs):
        np.testing.assert_allclose(batched[i], nn.actor_forward(params, g), atol=1e-12)


def test_forward_bitwise_reproducible():
    g = random_graph(np.random.default_rng(3))
    a = nn.actor_forward(nn.init_actor(g.n_var, np.random.default_rng(5)), g)
    b = nn.actor_forward(nn.init_actor(g.n_var, np.random.default_rng(5)), g)
    assert a.tobytes() == b.tobytes()


def test_critic_finite_on_fuzzed_graphs(rng):
    critic = jitter_biases(nn.init_critic(4, rng), rng)
    for _ in range(1000):
        g = random_graph(rng, m=4, n_con=int(rng.integers(0, 8)))
        assert np.isfinite(nn.critic_forward(critic, g))


def test_non_finite_raises(rng):
    g = random_graph(rng, m=2)
    params = nn.init_actor(2, rng)
    params.arrays["head.b"][0] = np.nan
    with pytest.raises(nn.NumericalError):
        nn.actor_forward(params, g)


def test_role_and_shape_guards(rng):
    g = random_graph(rng, m=2)
    with pytest.raises(ValueError):
        nn.actor_forward(nn.init_critic(2, rng), g)
    with pytest.raises(ValueError):
        nn.actor_forward(nn.init_actor(3, rng), g)
    with pytest.raises(ValueError):
        nn.init_params("judge", 2, rng)


def test_bce_examples():
    assert nn.bce_loss([1, 0], [0.5, 0.5]) == pytest.approx(np.log(2))
    assert nn.bce_loss([1, 0], [1 - 1e-15, 1e-15]) < 1e-10
    # at the target, the gradient reaching the logits vanishes
    p = np.array([1 - 1e-12, 1e-12])
    np.testing.assert_allclose(nn.bce_grad([1, 0], p) * p * (1 - p), 0, atol=1e-9)


@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_bce_nonnegative(m, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, m)
    p = rng.random(m)
    assert nn.bce_loss(y, p) >= 0


def test_sampling_and_log_prob():
    rng = np.random.default_rng(2)
    p = np.full(4, 1 - 1e-12)
    a = nn.sample_action(p, rng)
    np.testing.assert_array_equal(a, 1)
    assert nn.log_prob(p, a) == pytest.approx(0, abs=1e-10)
    draws = nn.sample_action(np.full((100_000, 1), 0.3), rng)
    assert abs(draws.mean() - 0.3) <= 0.01
    q = np.array([0.2, 0.7, 0.4])
    total = sum(np.exp(nn.log_prob(q, a)) for a in itertools.product((0, 1), repeat=3))
    assert total == pytest.approx(1.0, abs=1e-12)
    A = np.array(list(itertools.product((0, 1), repeat=3)), float)
    np.testing.assert_allclose(nn.log_prob_batch(np.tile(q, (8, 1)), A),
                               [nn.log_prob(q, a) for a in A])


def test_adam_zero_grad_and_bowl(rng):
    params = nn.init_actor(2, rng)
    before = params.flat()
    nn.adam_step(params, {k: np.zeros_like(v) for k, v in params.arrays.items()}, nn.AdamState())
    np.testing.assert_array_equal(params.flat(), before)

    bowl = nn.NetParams("actor", {}, {"w": np.array([3.0, -2.0])})
    opt = nn.AdamState(lr=0.05)
    losses = []
    for _ in range(100):
        w = bowl.arrays["w"]
        losses.append(float(w @ w))
        nn.adam_step(bowl, {"w": 2 * w}, opt)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_deterministic():
    def run():
        params = nn.init_actor(2, np.random.default_rng(1))
        opt = nn.AdamState()
        g = random_graph(np.random.default_rng(4), m=2)
        for _ in range(5):
            p, tape = nn.forward(params, g)
            nn.adam_step(params, nn.backward(tape, p - np.array([1.0, 0.0]), wrt="logits"), opt)
        return params.flat()
    np.testing.assert_array_equal(run(), run())


def test_weights_round_trip_and_mismatch(tmp_path, rng):
    params = jitter_biases(nn.init_actor(5, rng), rng)
    nn.save_weights(params, tmp_path / "w.json")
    back = nn.load_weights(tmp_path / "w.json", {"role": "actor", "m": 5})
    np.testing.assert_array_equal(back.flat(), params.flat())
    assert list(back.arrays) == list(params.arrays)
    with pytest.raises(SchemaMismatch):
        nn.load_weights(tmp_path / "w.json", {"m": 4})
    doc = nn.params_to_dict(params)
    with pytest.raises(SchemaMismatch):
        nn.params_from_dict({**doc, "descriptor": {**doc["descriptor"], "edge_order": "x"}})
    with pytest.raises(SchemaMismatch):
        nn.params_from_dict({**doc, "descriptor": {**doc["descriptor"], "hidden": 8}})
    with pytest.raises(SchemaMismatch):
        nn.params_from_dict({**doc, "schema_version": 0})


def test_flat_round_trip(rng):
    params = nn.init_critic(3, rng)
    v = rng.normal(size=params.flat().size)
    params.set_flat(v)
    np.testing.assert_array_equal(params.flat(), v)
