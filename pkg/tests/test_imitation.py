import numpy as np
import pytest

from gbd_agent import nn
from gbd_agent.engine import solve_classical
from gbd_agent.imitation import (ExpertDataset, evaluate, expert_pairs_for, generate_expert_dataset,
                                 split_by_instance, train_bc)
from gbd_agent.problem import SchemaMismatch


@pytest.fixture(scope="module")
def small_dataset(cache):
    return generate_expert_dataset(12, seed=4, cache=cache)


def test_one_pair_per_iteration(nominal, cache):
    pairs = expert_pairs_for(nominal, 0, cache=cache)
    res, trace = solve_classical(nominal, cache=cache)
    # one pair per exact master solve; each solution seeds the next subproblem
    assert len(pairs) == res.exact_solves
    for pair, row in zip(pairs, trace.rows[1:]):
        np.testing.assert_array_equal(pair.label, row["y"])
        assert pair.graph.n_var == 5


def test_dataset_deterministic(small_dataset, cache):
    again = generate_expert_dataset(12, seed=4, cache=cache)
    assert again.digest() == small_dataset.digest()
    assert generate_expert_dataset(12, seed=5, cache=cache).digest() != small_dataset.digest()
    assert small_dataset.failures == 0
    assert len(generate_expert_dataset(12, seed=4, cache=cache, max_pairs=7)) == 7
    with pytest.raises(ValueError):
        generate_expert_dataset(0, seed=1)


def test_dataset_round_trip(tmp_path, small_dataset):
    small_dataset.save(tmp_path / "d.json")
    back = ExpertDataset.load(tmp_path / "d.json")
    assert back.digest() == small_dataset.digest() and back.m == 5
    import json
    doc = json.loads((tmp_path / "d.json").read_text())
    doc["schema_version"] = 99
    with pytest.raises(SchemaMismatch):
        ExpertDataset.from_dict(doc)


def test_split_keeps_instances_apart(small_dataset):
    train, val = split_by_instance(small_dataset, np.random.default_rng(0), 0.25)
    assert train and val
    assert not {p.instance_id for p in train} & {p.instance_id for p in val}
    assert len(train) + len(val) == len(small_dataset)


def test_memorizes_single_pair(small_dataset):
    one = ExpertDataset(5, small_dataset.pairs[:1])
    params = nn.init_actor(5, np.random.default_rng(0))
    res = train_bc(one, params, epochs=300, batch_size=1, adam=nn.AdamState(lr=1e-2))
    assert res.val_loss == [] and res.val_accuracy is None
    assert res.train_loss[-1] < 0.01
    assert evaluate(res.params, one.pairs)[0] < 0.01


def test_training_deterministic_and_improves(small_dataset):
    params = nn.init_actor(5, np.random.default_rng(0))
    a = train_bc(small_dataset, params, epochs=8, batch_size=8, rng=np.random.default_rng(1))
    b = train_bc(small_dataset, params, epochs=8, batch_size=8, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert a.train_loss == b.train_loss
    assert a.train_loss[-1] < a.initial_loss
    # the input parameters are left untouched
    np.testing.assert_array_equal(params.flat(), nn.init_actor(5, np.random.default_rng(0)).flat())


def test_train_guards(small_dataset):
    with pytest.raises(ValueError):
        train_bc(ExpertDataset(5, []), nn.init_actor(5, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        train_bc(small_dataset, nn.init_actor(4, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        train_bc(small_dataset, nn.init_critic(5, np.random.default_rng(0)))


def test_labels_are_binary(small_dataset):
    assert all(set(np.unique(p.label)) <= {0.0, 1.0} for p in small_dataset.pairs)
