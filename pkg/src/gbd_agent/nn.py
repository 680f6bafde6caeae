"""Edge-conditioned graph network with hand-written reverse mode.

Stack: ECC -> ReLU -> ECC -> ReLU -> global sum pool -> dense -> ReLU -> head.
Each ECC layer turns the scalar feature of an edge into a ``d_in x d_out``
matrix with a small tanh MLP, multiplies the neighbour's features by it and
averages over the neighbourhood:

    out_i = mean_{j in N(i)} x_j @ Theta(e_ji) + bias

Edges of the bipartite graph are used in both directions.  Several graphs are
processed at once as a disjoint union; pooling keeps them apart.  Everything
is float64 and deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import EDGE_ORDER, BipartiteGraph
from .problem import SchemaMismatch

WEIGHTS_SCHEMA_VERSION = 1
PROB_CLAMP = 1e-12


class NumericalError(FloatingPointError):
    pass


@dataclass
class NetParams:
    role: str                      # "actor" or "critic"
    arch: dict                     # widths; part of the weights-file descriptor
    arrays: dict[str, np.ndarray]  # insertion order is the flattening order

    def copy(self) -> "NetParams":
        return NetParams(self.role, dict(self.arch), {k: v.copy() for k, v in self.arrays.items()})

    def descriptor(self) -> dict:
        return {"role": self.role, **self.arch, "edge_order": EDGE_ORDER}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, a in self.arrays.items():
            self.arrays[k] = np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape).copy()
            i += a.size

    @property
    def n_ecc(self) -> int:
        return self.arch["n_ecc"]

    @property
    def out_dim(self) -> int:
        return self.arch["m"] if self.role == "actor" else 1


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_params(role: str, m: int, rng: np.random.Generator, hidden: int = 32,
                filter_hidden: int = 16, dense: int = 64, n_ecc: int = 2) -> NetParams:
    if role not in ("actor", "critic"):
        raise ValueError(f"unknown role {role!r}")
    arch = {"m": int(m), "hidden": hidden, "filter_hidden": filter_hidden, "dense": dense,
            "n_ecc": n_ecc, "in_dim": 1}
    arrays = {}
    d_in = 1
    for layer in range(n_ecc):
        d_out = hidden
        arrays[f"ecc{layer}.W1"] = _glorot(rng, 1, filter_hidden)
        arrays[f"ecc{layer}.b1"] = np.zeros(filter_hidden)
        arrays[f"ecc{layer}.W2"] = _glorot(rng, filter_hidden, d_in * d_out)
        arrays[f"ecc{layer}.b2"] = np.zeros(d_in * d_out)
        arrays[f"ecc{layer}.bias"] = np.zeros(d_out)
        d_in = d_out
    arrays["dense.W"] = _glorot(rng, d_in, dense)
    arrays["dense.b"] = np.zeros(dense)
    out = m if role == "actor" else 1
    arrays["head.W"] = _glorot(rng, dense, out)
    arrays["head.b"] = np.zeros(out)
    return NetParams(role, arch, arrays)


def init_actor(m: int, rng: np.random.Generator, **kw) -> NetParams:
    return init_params("actor", m, rng, **kw)


def init_critic(m: int, rng: np.random.Generator, **kw) -> NetParams:
    return init_params("critic", m, rng, **kw)


def zero_params(like: NetParams) -> NetParams:
    out = like.copy()
    for k in out.arrays:
        out.arrays[k][...] = 0.0
    return out


class GraphBatch:
    """Disjoint union of graphs with precomputed sparse operators."""

    def __init__(self, graphs: list[BipartiteGraph]):
        if not graphs:
            raise ValueError("empty batch")
        feats, src, dst, efeat, owner = [], [], [], [], []
        offset = 0
        for gi, g in enumerate(graphs):
            v = offset + g.var_idx
            c = offset + g.n_var + g.con_idx
            src += [v, c]
            dst += [c, v]
            efeat += [g.x_edge, g.x_edge]
            feats.append(g.node_features)
            owner.append(np.full(g.n_nodes, gi))
            offset += g.n_nodes
        self.n_graphs = len(graphs)
        self.n_nodes = offset
        self.x0 = np.concatenate(feats, axis=0)
        self.src = np.concatenate(src).astype(int)
        self.dst = np.concatenate(dst).astype(int)
        self.efeat = np.concatenate(efeat).astype(float)
        n_e = len(self.src)
        deg = np.bincount(self.dst, minlength=self.n_nodes).astype(float)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        cols = np.arange(n_e)
        # (N x E): mean over incoming edges, and scatter back to sources
        self.mean_op = sp.csr_matrix((inv[self.dst], (self.dst, cols)), shape=(offset, n_e))
        self.src_op = sp.csr_matrix((np.ones(n_e), (self.src, cols)), shape=(offset, n_e))
        own = np.concatenate(owner)
        self.pool_op = sp.csr_matrix((np.ones(offset), (own, np.arange(offset))),
                                     shape=(self.n_graphs, offset))


def as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, BipartiteGraph):
        return GraphBatch([graphs])
    return GraphBatch(list(graphs))


@dataclass
class Tape:
    params: NetParams
    batch: GraphBatch
    cache: list = field(default_factory=list)
    out: np.ndarray | None = None
    used: bool = False


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values after {where}")


def ecc_forward(P: dict, prefix: str, batch: GraphBatch, X: np.ndarray):
    """One ECC layer; returns (output, cache).

    The per-edge filter ``Theta_e = reshape(H_e @ W2 + b2)`` is never formed:
    ``x_e @ Theta_e = (H_e outer x_e) @ W2' + x_e @ b2'`` with W2, b2 reshaped.
    """
    d_in = X.shape[1]
    d_out = P[f"{prefix}.bias"].shape[0]
    W2, b2 = P[f"{prefix}.W2"], P[f"{prefix}.b2"]
    if W2.shape[1] != d_in * d_out:
        raise ValueError(f"{prefix}: filter produces {W2.shape[1]} entries, need {d_in}x{d_out}")
    e = batch.efeat[:, None]
    H = np.tanh(e @ P[f"{prefix}.W1"] + P[f"{prefix}.b1"])
    xs = X[batch.src]
    U = (H[:, :, None] * xs[:, None, :]).reshape(len(xs), H.shape[1] * d_in)
    msg = U @ W2.reshape(-1, d_out) + xs @ b2.reshape(d_in, d_out)
    out = batch.mean_op @ msg + P[f"{prefix}.bias"]
    return out, (prefix, e, H, xs, U)


def ecc_backward(P: dict, batch: GraphBatch, cache, d_out: np.ndarray, grads: dict):
    prefix, e, H, xs, U = cache
    W2, b2 = P[f"{prefix}.W2"], P[f"{prefix}.b2"]
    n_h, d_in = H.shape[1], xs.shape[1]
    dd = d_out.shape[1]
    grads[f"{prefix}.bias"] = d_out.sum(axis=0)
    d_msg = batch.mean_op.T @ d_out
    grads[f"{prefix}.W2"] = (U.T @ d_msg).reshape(W2.shape)
    grads[f"{prefix}.b2"] = (xs.T @ d_msg).reshape(b2.shape)
    dU = (d_msg @ W2.reshape(-1, dd).T).reshape(-1, n_h, d_in)
    dH = np.einsum("eki,ei->ek", dU, xs)
    d_xs = np.einsum("eki,ek->ei", dU, H) + d_msg @ b2.reshape(d_in, dd).T
    d_pre = dH * (1.0 - H * H)
    grads[f"{prefix}.W1"] = e.T @ d_pre
    grads[f"{prefix}.b1"] = d_pre.sum(axis=0)
    return batch.src_op @ d_xs


def forward(params: NetParams, graphs) -> tuple[np.ndarray, Tape]:
    """Raw outputs (probabilities for the actor, values for the critic) per graph."""
    batch = as_batch(graphs)
    P = params.arrays
    tape = Tape(params, batch)
    X = batch.x0
    for layer in range(params.n_ecc):
        Z, cache = ecc_forward(P, f"ecc{layer}", batch, X)
        _check(Z, f"ecc layer {layer}")
        X = np.maximum(Z, 0.0)
        tape.cache.append((cache, Z))
    pooled = batch.pool_op @ X
    hz = pooled @ P["dense.W"] + P["dense.b"]
    h = np.maximum(hz, 0.0)
    logits = h @ P["head.W"] + P["head.b"]
    _check(logits, "head")
    tape.cache.append((X, pooled, hz, h, logits))
    if params.role == "actor":
        out = 1.0 / (1.0 + np.exp(-logits))
    else:
        out = logits[:, 0]
    tape.out = out
    return out, tape


def backward(tape: Tape, d_out: np.ndarray, wrt: str = "output") -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/d(output) or, for the actor, dLoss/d(logits)."""
    if tape.used:
        raise RuntimeError("backward already ran for this forward pass")
    tape.used = True
    params, batch = tape.params, tape.batch
    P = params.arrays
    X, pooled, hz, h, logits = tape.cache[-1]
    d = np.asarray(d_out, dtype=float)
    if params.role == "actor":
        d = d.reshape(logits.shape)
        if wrt == "output":
            d = d * tape.out * (1.0 - tape.out)
    else:
        d = d.reshape(-1, 1)
    grads: dict[str, np.ndarray] = {}
    grads["head.W"] = h.T @ d
    grads["head.b"] = d.sum(axis=0)
    dh = (d @ P["head.W"].T) * (hz > 0)
    grads["dense.W"] = pooled.T @ dh
    grads["dense.b"] = dh.sum(axis=0)
    dX = batch.pool_op.T @ (dh @ P["dense.W"].T)
    for layer in reversed(range(params.n_ecc)):
        cache, Z = tape.cache[layer]
        dZ = dX * (Z > 0)
        dX = ecc_backward(P, batch, cache, dZ, grads)
    return {k: grads[k] for k in P}


def actor_forward(params: NetParams, graph: BipartiteGraph) -> np.ndarray:
    if params.role != "actor":
        raise ValueError("actor_forward needs actor parameters")
    if graph.n_var != params.arch["m"]:
        raise ValueError(f"actor built for m={params.arch['m']}, graph has {graph.n_var}")
    return forward(params, graph)[0][0]


def critic_forward(params: NetParams, graph: BipartiteGraph) -> float:
    if params.role != "critic":
        raise ValueError("critic_forward needs critic parameters")
    return float(forward(params, graph)[0][0])


def bce_loss(y, p) -> float:
    y = np.asarray(y, dtype=float)
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


def bce_grad(y, p) -> np.ndarray:
    """d bce / d p, consistent with the clamp used in the loss."""
    y = np.asarray(y, dtype=float)
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (-y / p + (1.0 - y) / (1.0 - p)) / y.shape[-1]


def sample_action(p, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return (rng.random(p.shape) < p).astype(float)


def log_prob(p, a) -> float:
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    a = np.asarray(a, dtype=float)
    return float(np.sum(np.where(a > 0.5, np.log(p), np.log(1.0 - p)), axis=-1))


def log_prob_batch(p: np.ndarray, a: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.sum(np.where(a > 0.5, np.log(p), np.log(1.0 - p)), axis=-1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetParams, grads: dict, state: AdamState) -> NetParams:
    """In-place Adam update with bias correction; returns ``params``."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params.arrays[k] = params.arrays[k] - state.lr * (state.m[k] / c1) / (
            np.sqrt(state.v[k] / c2) + state.eps)
    return params


def clip_grads(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def params_to_dict(params: NetParams) -> dict:
    return {"schema_version": WEIGHTS_SCHEMA_VERSION, "kind": "net_weights",
            "descriptor": params.descriptor(),
            "params": {k: {"shape": list(a.shape), "data": a.ravel().tolist()}
                       for k, a in params.arrays.items()}}


def params_from_dict(doc: dict, expect: dict | None = None) -> NetParams:
    if doc.get("schema_version") != WEIGHTS_SCHEMA_VERSION or doc.get("kind") != "net_weights":
        raise SchemaMismatch("not a weights file of a supported version")
    desc = dict(doc["descriptor"])
    if desc.get("edge_order") != EDGE_ORDER:
        raise SchemaMismatch(f"weights use edge order {desc.get('edge_order')!r}")
    for k, v in (expect or {}).items():
        if desc.get(k) != v:
            raise SchemaMismatch(f"weights descriptor {k}={desc.get(k)!r}, expected {v!r}")
    role = desc.pop("role")
    desc.pop("edge_order")
    ref = init_params(role, desc["m"], np.random.default_rng(0), hidden=desc["hidden"],
                      filter_hidden=desc["filter_hidden"], dense=desc["dense"],
                      n_ecc=desc["n_ecc"])
    recs = doc["params"]
    if set(recs) != set(ref.arrays):
        raise SchemaMismatch("parameter names do not match the descriptor")
    # flattening order follows the descriptor, not the file's key order
    arrays = {k: np.array(recs[k]["data"], dtype=float).reshape(recs[k]["shape"])
              for k in ref.arrays}
    if any(ref.arrays[k].shape != arrays[k].shape for k in arrays):
        raise SchemaMismatch("parameter shapes do not match the descriptor")
    return NetParams(role, desc, arrays)


def save_weights(params: NetParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_weights(path, expect: dict | None = None) -> NetParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh), expect)
