"""Finite-difference helpers shared by the network tests."""
import numpy as np

from gbd_agent import nn
from gbd_agent.graph import BipartiteGraph

STEP = 1e-5


def random_graph(rng, m=None, n_con=None) -> BipartiteGraph:
    m = int(rng.integers(1, 6)) if m is None else m
    n_con = int(rng.integers(1, 6)) if n_con is None else n_con
    mask = rng.random((n_con, m)) < 0.6
    mask[:, rng.integers(0, m)] = True
    con, var = np.nonzero(mask)
    return BipartiteGraph(m, n_con, con, var, rng.integers(0, 2, m).astype(float),
                          rng.uniform(-1, 1, n_con), rng.uniform(-1, 1, len(con)))


def jitter_biases(params, rng, scale=0.3):
    """Nonzero biases keep ReLU inputs away from the kink at zero."""
    for k, a in params.arrays.items():
        if k.endswith((".b", ".b1", ".b2", ".bias")):
            params.arrays[k] = rng.normal(0.0, scale, a.shape)
    return params


def rel_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def check(params, graphs, rng, coords=None) -> dict[str, float]:
    """Relative error per parameter array for a random linear functional of the outputs."""
    out, tape = nn.forward(params, graphs)
    weights = rng.normal(size=out.shape)
    grads = nn.backward(tape, weights)

    def loss(p):
        return float(np.sum(weights * nn.forward(p, graphs)[0]))

    errors = {}
    for name, arr in params.arrays.items():
        idx = list(np.ndindex(arr.shape))
        if coords is not None and len(idx) > coords:
            pick = rng.choice(len(idx), coords, replace=False)
            idx = [idx[i] for i in pick]
        num = np.empty(len(idx))
        for j, ix in enumerate(idx):
            saved = arr[ix]
            arr[ix] = saved + STEP
            up = loss(params)
            arr[ix] = saved - STEP
            down = loss(params)
            arr[ix] = saved
            num[j] = (up - down) / (2 * STEP)
        ana = np.array([grads[name][ix] for ix in idx])
        errors[name] = rel_error(ana, num)
    return errors
