"""Bipartite variable/constraint graph of a master problem.

Nodes ``0..m-1`` are binary variables; nodes ``m..`` are constraints in the
order optimality cuts, feasibility cuts, pure-binary rows.  The epigraph
variable mu_b gets no node.  Edges run constraint-major and, within a
constraint, by ascending variable index; saved weights depend on this order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .master import MasterState

EDGE_ORDER = "constraint-major/var-ascending"
GRAPH_SCHEMA_VERSION = 1
EDGE_EPS = 1e-12


@dataclass(frozen=True)
class BipartiteGraph:
    n_var: int
    n_con: int
    con_idx: np.ndarray   # edge -> constraint position (0-based within constraints)
    var_idx: np.ndarray   # edge -> variable index
    x_var: np.ndarray     # (n_var,) previous assignment
    x_con: np.ndarray     # (n_con,) constraint features
    x_edge: np.ndarray    # (n_edges,) coefficients

    @property
    def n_nodes(self) -> int:
        return self.n_var + self.n_con

    @property
    def n_edges(self) -> int:
        return len(self.var_idx)

    @property
    def node_features(self) -> np.ndarray:
        """X_f as an (n_nodes, 1) column."""
        return np.concatenate([self.x_var, self.x_con])[:, None]

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency A_d (for tests and export)."""
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int8)
        A[self.var_idx, self.n_var + self.con_idx] = 1
        A[self.n_var + self.con_idx, self.var_idx] = 1
        return A

    def permute_constraints(self, perm) -> "BipartiteGraph":
        """Graph with constraint node ``i`` moved to position ``perm[i]``."""
        perm = np.asarray(perm)
        return BipartiteGraph(self.n_var, self.n_con, perm[self.con_idx], self.var_idx.copy(),
                              self.x_var.copy(), self.x_con[np.argsort(perm)], self.x_edge.copy())

    def to_dict(self) -> dict:
        return {"schema_version": GRAPH_SCHEMA_VERSION, "edge_order": EDGE_ORDER,
                "n_var": self.n_var, "n_con": self.n_con,
                "edges": [[int(c), int(v), float(x)]
                          for c, v, x in zip(self.con_idx, self.var_idx, self.x_edge)],
                "x_var": self.x_var.tolist(), "x_con": self.x_con.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "BipartiteGraph":
        from .problem import SchemaMismatch
        if doc.get("schema_version") != GRAPH_SCHEMA_VERSION or doc.get("edge_order") != EDGE_ORDER:
            raise SchemaMismatch("graph snapshot schema or edge order differs")
        edges = np.array(doc["edges"], dtype=float).reshape(-1, 3)
        return cls(int(doc["n_var"]), int(doc["n_con"]), edges[:, 0].astype(int),
                   edges[:, 1].astype(int), np.array(doc["x_var"], float),
                   np.array(doc["x_con"], float), edges[:, 2].copy())


def constraint_rows(state: MasterState):
    """Coefficient matrix and node features of all constraint nodes, in order."""
    rows, feats = [], []
    for c in state.opt_cuts:
        rows.append(c.w)
        feats.append(-c.beta)
    for c in state.feas_cuts:
        rows.append(c.v)
        feats.append(-c.gamma)
    rows.extend(state.K)
    feats.extend(state.b)
    coef = np.array(rows, dtype=float).reshape(-1, state.m)
    return coef, np.array(feats, dtype=float)


def encode(state: MasterState, inst=None) -> BipartiteGraph:
    coef, feats = constraint_rows(state)
    con, var = np.nonzero(np.abs(coef) > EDGE_EPS)  # row-major = constraint-major
    return BipartiteGraph(n_var=state.m, n_con=coef.shape[0], con_idx=con, var_idx=var,
                          x_var=np.asarray(state.y_prev, float).copy(), x_con=feats,
                          x_edge=coef[con, var])


def _scaled(v: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(v), initial=0.0)
    return v / peak if peak > 0 else v.copy()


def normalize(graph: BipartiteGraph) -> BipartiteGraph:
    """Per-graph max-abs scaling of constraint and edge features separately."""
    return BipartiteGraph(graph.n_var, graph.n_con, graph.con_idx, graph.var_idx,
                          graph.x_var, _scaled(graph.x_con), _scaled(graph.x_edge))


def encode_normalized(state: MasterState, inst=None) -> BipartiteGraph:
    return normalize(encode(state, inst))


def export_snapshot(graph: BipartiteGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph.to_dict(), fh)
