"""Expert data from classical GBD runs and behavioral cloning of the actor."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import Limits, SolveFailure, solve_classical
from .graph import BipartiteGraph, encode_normalized
from .master import check_feasible
from .nlp import NumericalFailure, SubproblemCache
from .nn import AdamState, GraphBatch, NetParams, adam_step, backward, bce_loss, forward
from .problem import SchemaMismatch, build_case_study1, sample_coefficients

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExpertPair:
    graph: BipartiteGraph
    label: np.ndarray
    instance_id: int
    iteration: int

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "iteration": self.iteration,
                "label": self.label.astype(int).tolist(), "graph": self.graph.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExpertPair":
        return cls(BipartiteGraph.from_dict(doc["graph"]), np.array(doc["label"], float),
                   int(doc["instance_id"]), int(doc["iteration"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ExpertDataset:
    m: int
    pairs: list[ExpertPair]
    failures: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def digest(self) -> str:
        """Order-independent hash of the pairs."""
        h = hashlib.sha256()
        for d in sorted(p.digest() for p in self.pairs):
            h.update(d.encode())
        return h.hexdigest()

    def instance_ids(self) -> list[int]:
        return sorted({p.instance_id for p in self.pairs})

    def to_dict(self) -> dict:
        return {"schema_version": DATASET_SCHEMA_VERSION, "kind": "expert_dataset", "m": self.m,
                "failures": self.failures, "meta": self.meta, "digest": self.digest(),
                "pairs": [p.to_dict() for p in self.pairs]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExpertDataset":
        if doc.get("schema_version") != DATASET_SCHEMA_VERSION or doc.get("kind") != "expert_dataset":
            raise SchemaMismatch("not an expert dataset of a supported version")
        return cls(int(doc["m"]), [ExpertPair.from_dict(p) for p in doc["pairs"]],
                   int(doc.get("failures", 0)), doc.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ExpertDataset":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def case_study_sampler(rng: np.random.Generator):
    return build_case_study1(sample_coefficients(rng))


def expert_pairs_for(inst, instance_id: int, limits: Limits = Limits(),
                     cache: SubproblemCache | None = None) -> list[ExpertPair]:
    """One classical run; a (graph, exact master solution) pair per iteration."""
    pairs: list[ExpertPair] = []

    def observe(state, res):
        if res.infeasible:
            return
        assert check_feasible(state, res.y)
        pairs.append(ExpertPair(encode_normalized(state, inst), res.y.copy(), instance_id,
                                len(pairs)))

    solve_classical(inst, limits=limits, cache=cache, observer=observe)
    return pairs


def generate_expert_dataset(n_instances: int, seed: int, sampler=case_study_sampler,
                            limits: Limits = Limits(), cache: SubproblemCache | None = None,
                            max_pairs: int | None = None) -> ExpertDataset:
    if n_instances < 1:
        raise ValueError("need at least one instance")
    rng = np.random.default_rng(seed)
    cache = SubproblemCache() if cache is None else cache
    pairs: list[ExpertPair] = []
    failures = 0
    m = None
    for i in range(n_instances):
        inst = sampler(rng)
        m = inst.m
        try:
            pairs.extend(expert_pairs_for(inst, i, limits, cache))
        except (SolveFailure, NumericalFailure) as exc:
            failures += 1
            log.warning("instance %d skipped: %s", i, exc)
        if max_pairs is not None and len(pairs) >= max_pairs:
            pairs = pairs[:max_pairs]
            break
    return ExpertDataset(m, pairs, failures, {"seed": seed, "n_instances": n_instances})


def split_by_instance(dataset: ExpertDataset, rng: np.random.Generator, val_frac: float = 0.1):
    """Train/validation pairs with no instance on both sides."""
    ids = np.array(dataset.instance_ids())
    rng.shuffle(ids)
    n_val = int(round(val_frac * len(ids))) if len(ids) > 1 else 0
    if len(ids) > 1:
        n_val = max(n_val, 1)
    val_ids = set(ids[:n_val].tolist())
    train = [p for p in dataset.pairs if p.instance_id not in val_ids]
    val = [p for p in dataset.pairs if p.instance_id in val_ids]
    return train, val


@dataclass
class BCResult:
    params: NetParams
    initial_loss: float
    train_loss: list[float]
    val_loss: list[float]
    val_accuracy: float | None
    train_ids: list[int]
    val_ids: list[int]


def evaluate(params: NetParams, pairs: list[ExpertPair], chunk: int = 256):
    """Mean BCE and per-bit accuracy at threshold 0.5."""
    if not pairs:
        return float("nan"), float("nan")
    losses, hits, bits = [], 0, 0
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        p, _ = forward(params, GraphBatch([q.graph for q in part]))
        y = np.array([q.label for q in part])
        losses.extend(bce_loss(yi, pi) for yi, pi in zip(y, p))
        hits += int(np.sum((p >= 0.5) == (y > 0.5)))
        bits += y.size
    return float(np.mean(losses)), hits / bits


def train_bc(dataset: ExpertDataset, params: NetParams, epochs: int = 50, batch_size: int = 32,
             rng: np.random.Generator | None = None, val_frac: float = 0.1,
             adam: AdamState | None = None) -> BCResult:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if params.role != "actor" or params.arch["m"] != dataset.m:
        raise ValueError("parameters do not fit the dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    params = params.copy()
    adam = AdamState() if adam is None else adam
    train, val = split_by_instance(dataset, rng, val_frac)
    initial, _ = evaluate(params, train)
    curve, val_curve = [], []
    for _ in range(epochs):
        order = rng.permutation(len(train))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            part = [train[i] for i in order[start:start + batch_size]]
            p, tape = forward(params, GraphBatch([q.graph for q in part]))
            y = np.array([q.label for q in part])
            batch_losses.append(np.mean([bce_loss(yi, pi) for yi, pi in zip(y, p)]))
            # mean over the batch of the per-pair mean over bits, as logits gradient
            d_logits = (p - y) / (y.shape[0] * y.shape[1])
            adam_step(params, backward(tape, d_logits, wrt="logits"), adam)
        curve.append(float(np.mean(batch_losses)))
        if val:
            val_curve.append(evaluate(params, val)[0])
    acc = evaluate(params, val)[1] if val else None
    return BCResult(params, initial, curve, val_curve, acc,
                    sorted({p.instance_id for p in train}), sorted({p.instance_id for p in val}))
