"""Command-line front end: instance and data generation, training, solving, evaluation."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import nn
from .engine import (TRACE_SCHEMA_VERSION, GbdTrace, Limits, SolveFailure, solve_classical,
                     solve_hybrid, trace_violations)
from .imitation import DATASET_SCHEMA_VERSION, ExpertDataset, generate_expert_dataset, train_bc
from .master import NEG_INF
from .nlp import NumericalFailure, SubproblemCache
from .problem import (SCHEMA_VERSION, SchemaMismatch, ValidationError, build_case_study1,
                      instance_from_dict, sample_coefficients, sample_toy_facility)
from .rl import GbdEnv, RewardConfig, smoothed, train_rl
from .verifier import ConfidenceConfig, Mode

log = logging.getLogger("gbd_agent")

EXIT_OK, EXIT_SOLVE, EXIT_USAGE, EXIT_SCHEMA = 0, 1, 2, 3

SAMPLERS = {
    "case_study1": lambda rng: build_case_study1(sample_coefficients(rng)),
    "toy_facility": sample_toy_facility,
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# manifests and files

def _digest(obj) -> str:
    blob = obj if isinstance(obj, bytes) else json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _schemas() -> dict:
    return {"instance": SCHEMA_VERSION, "dataset": DATASET_SCHEMA_VERSION,
            "weights": nn.WEIGHTS_SCHEMA_VERSION, "trace": TRACE_SCHEMA_VERSION}


class Manifest:
    """Run record; its id is stamped into every file the run writes."""

    def __init__(self, command: str, args: argparse.Namespace):
        cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
               if k not in ("func", "verbose")}
        self.doc = {"tool": "gbd-agent", "version": __version__, "command": command,
                    "seed": cfg.get("seed"), "config": cfg, "schema_versions": _schemas()}
        # output locations do not enter the id, so reruns elsewhere give identical payloads
        self.run_id = _digest({**self.doc, "config": {k: v for k, v in cfg.items()
                                                      if k != "out"}})[:16]
        self.files: dict[str, str] = {}
        self.extra: dict = {}

    def write_json(self, path: Path, doc: dict) -> None:
        doc = {**doc, "manifest": self.run_id}
        data = json.dumps(doc, sort_keys=True).encode()
        self._write(path, data)

    def write_text(self, path: Path, text: str) -> None:
        self._write(path, text.encode())

    def write_csv(self, path: Path, header: list[str], rows: list[list]) -> None:
        lines = [",".join(header + ["manifest"])]
        for r in rows:
            lines.append(",".join(_csv_cell(v) for v in r) + "," + self.run_id)
        self._write(path, ("\n".join(lines) + "\n").encode())

    def _write(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files[str(path)] = _digest(data)

    def save(self, path: Path) -> None:
        doc = {**self.doc, "run_id": self.run_id, "files": self.files, **self.extra}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _csv_cell(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _read_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path} is not a structured document: {exc}") from None


def load_instance(path: Path):
    return instance_from_dict(_read_json(path))


def load_weights(path: Path, expect: dict | None = None) -> nn.NetParams:
    return nn.params_from_dict(_read_json(path), expect)


def weights_doc(params: nn.NetParams) -> dict:
    return nn.params_to_dict(params)


def result_doc(res, eps: float) -> dict:
    """Result summary; ``digest`` covers only the timing-free fields."""
    core = {"status": res.status, "converged": res.converged,
            "objective": res.objective if math.isfinite(res.objective) else "inf",
            "y": None if res.y is None else res.y.astype(int).tolist(),
            "iterations": res.iterations, "exact_solves": res.exact_solves,
            "reduced_solves": res.reduced_solves, "modes": dict(sorted(res.modes.items())),
            "eps": eps}
    return {**core, "x": None if res.x is None else res.x.tolist(),
            "total_time": res.total_time, "master_time": res.master_time,
            "subproblem_time": res.subproblem_time, "digest": _digest(core)}


def _limits(args) -> Limits:
    return Limits(eps=args.eps, max_iter=args.max_iter, max_seconds=args.max_seconds)


def _time_mode(args) -> str:
    return "newton" if args.deterministic_time else "wall"


# --------------------------------------------------------------------------
# commands

def cmd_gen_instances(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be nonnegative")
    man = Manifest("gen-instances", args)
    rng = np.random.default_rng(args.seed)
    digests = []
    for i in range(args.count):
        inst = SAMPLERS[args.family](rng)
        path = args.out / f"instance_{i:05d}.json"
        man.write_json(path, inst.to_dict())
        digests.append(_digest(inst.to_dict()))
    man.extra["content_digest"] = _digest(digests)
    man.extra["count"] = args.count
    man.save(args.out / "manifest.json")
    print(f"wrote {args.count} instances to {args.out} (content digest {man.extra['content_digest'][:16]})")
    return EXIT_OK


def cmd_gen_expert(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    man = Manifest("gen-expert", args)
    ds = generate_expert_dataset(args.count, args.seed, SAMPLERS[args.family], _limits(args),
                                 max_pairs=args.max_pairs)
    man.write_json(args.out, ds.to_dict())
    man.extra["dataset_digest"] = ds.digest()
    man.save(args.out.with_suffix(".manifest.json"))
    print(f"{len(ds)} pairs from {args.count} instances ({ds.failures} skipped), "
          f"digest {ds.digest()[:16]}")
    return EXIT_OK


def cmd_train_il(args) -> int:
    if args.dataset is None:
        raise UsageError("train il needs --dataset")
    man = Manifest("train-il", args)
    ds = ExpertDataset.from_dict(_read_json(args.dataset))
    rng = np.random.default_rng(args.seed)
    if args.init is not None:
        params = load_weights(args.init, {"role": "actor"})
        if params.arch["m"] != ds.m:
            raise SchemaMismatch(f"weights have m={params.arch['m']}, dataset has m={ds.m}")
    else:
        params = nn.init_actor(ds.m, rng)
    res = train_bc(ds, params, epochs=args.epochs, batch_size=args.batch_size, rng=rng,
                   val_frac=args.val_frac)
    man.write_json(args.out, weights_doc(res.params))
    val = res.val_loss or [float("nan")] * len(res.train_loss)
    man.write_csv(args.out.with_suffix(".loss.csv"), ["epoch", "train_loss", "val_loss"],
                  [[0, res.initial_loss, float("nan")]]
                  + [[i + 1, t, v] for i, (t, v) in enumerate(zip(res.train_loss, val))])
    man.extra["weights_digest"] = _digest(nn.params_to_dict(res.params))
    man.save(args.out.with_suffix(".manifest.json"))
    final = res.train_loss[-1] if res.train_loss else res.initial_loss
    print(f"bce {res.initial_loss:.4f} -> {final:.4f}; val accuracy {res.val_accuracy}")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    if args.init is None and not args.random_init:
        raise UsageError("train rl needs --init weights or --random-init")
    if args.init is not None and args.random_init:
        raise UsageError("--init and --random-init are exclusive")
    man = Manifest("train-rl", args)
    sampler = SAMPLERS[args.family]
    rng = np.random.default_rng(args.seed)
    m = sampler(np.random.default_rng(0)).m
    if args.random_init:
        actor = nn.init_actor(m, rng)
    else:
        actor = load_weights(args.init, {"role": "actor", "m": m})
    critic = (load_weights(args.critic, {"role": "critic", "m": m}) if args.critic
              else nn.init_critic(m, rng))
    cfg = RewardConfig(iter_cap=args.iter_cap, lr=args.lr)
    env = GbdEnv(sampler, cfg, eps=args.eps, time_mode=_time_mode(args), cache=SubproblemCache())

    def checkpoint(ep, row, learner):
        if args.checkpoint_every and (ep + 1) % args.checkpoint_every == 0:
            man.write_json(args.out.with_suffix(f".ep{ep + 1:06d}.json"),
                           weights_doc(learner.actor))

    res = train_rl(env, actor, critic, args.episodes, cfg, seed=args.seed, callback=checkpoint)
    man.write_json(args.out, weights_doc(res.actor))
    man.write_json(args.out.with_suffix(".critic.json"), weights_doc(res.critic))
    keys = ["episode", "reward", "r_feas", "r_gap", "r_time", "iterations", "accepted"]
    rows = [[r[k] for k in keys] for r in res.log if "reward" in r]
    man.write_csv(args.out.with_suffix(".rewards.csv"), keys + ["smoothed"],
                  [r + [s] for r, s in zip(rows, smoothed(res.rewards))])
    man.extra["weights_digest"] = _digest(nn.params_to_dict(res.actor))
    man.extra["bound_violations"] = res.bound_violations
    man.save(args.out.with_suffix(".manifest.json"))
    sm = smoothed(res.rewards)
    if len(sm):
        print(f"{len(res.rewards)} episodes; smoothed reward {sm[0]:.3f} -> {sm[-1]:.3f}")
    else:
        print("0 episodes; weights unchanged")
    return EXIT_OK


def _run_solver(inst, mode: str, actor, args, cache=None):
    kw = dict(limits=_limits(args), time_mode=_time_mode(args), cache=cache)
    if mode == "classical":
        return solve_classical(inst, **kw)
    cfg = ConfidenceConfig(args.delta1, args.delta2)
    return solve_hybrid(inst, None, actor, cfg, cost_margin=args.cost_margin,
                        lbd_rule=args.lbd_rule, **kw)


def cmd_solve(args) -> int:
    if args.mode == "hybrid" and args.weights is None:
        raise UsageError("hybrid mode needs --weights")
    man = Manifest(f"solve-{args.mode}", args)
    inst = load_instance(args.instance)
    actor = None
    if args.mode == "hybrid":
        actor = load_weights(args.weights, {"role": "actor", "m": inst.m})
    res, trace = _run_solver(inst, args.mode, actor, args)
    trace.meta["manifest"] = man.run_id
    man.write_text(args.out / "trace.jsonl", trace.to_jsonl())
    doc = result_doc(res, args.eps)
    man.write_json(args.out / "result.json", doc)
    man.extra["result_digest"] = doc["digest"]
    man.save(args.out / "manifest.json")
    print(f"{res.status}: objective {res.objective:.6f} y={None if res.y is None else res.y.astype(int).tolist()} "
          f"in {res.iterations} iterations ({res.exact_solves} exact master solves)")
    return EXIT_OK if res.status in ("converged", "infeasible") else EXIT_SOLVE


def _evaluate_one(job):
    """One instance under every method; returns {method: trace text}."""
    i, inst_doc, methods, ns = job
    inst = instance_from_dict(inst_doc)
    out = {}
    for name, weights in methods:
        actor = None if weights is None else nn.params_from_dict(weights)
        mode = "classical" if weights is None else "hybrid"
        # no subproblem cache here: every method pays for its own solves
        _, trace = _run_solver(inst, mode, actor, ns)
        trace.meta.update({"instance": i, "method": name})
        out[name] = trace.to_jsonl()
    return i, out


def cmd_evaluate(args) -> int:
    man = Manifest("evaluate", args)
    methods: list[tuple[str, dict | None]] = [("classical", None)]
    for item in args.weights or []:
        name, sep, path = item.partition("=")
        if not sep or not name or name == "classical":
            raise UsageError(f"--weights expects NAME=PATH, got {item!r}")
        methods.append((name, nn.params_to_dict(load_weights(Path(path), {"role": "actor"}))))
    rng = np.random.default_rng(args.seed)
    sampler = SAMPLERS[args.family]
    insts = [sampler(rng) for _ in range(args.count)]
    for _, w in methods[1:]:
        if insts and w["descriptor"]["m"] != insts[0].m:
            raise SchemaMismatch("weights do not fit the instance family")
    ns = argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "func"})
    jobs = [(i, inst.to_dict(), methods, ns) for i, inst in enumerate(insts)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]
    for i, traces in sorted(results):
        for name, text in traces.items():
            man.write_text(args.out / "traces" / name / f"instance_{i:05d}.jsonl", text)
    report = build_report(args.out / "traces")
    write_report(report, args.out, man)
    man.save(args.out / "manifest.json")
    print_report(report)
    return EXIT_OK


def cmd_replay(args) -> int:
    path = args.path
    if path.is_dir():
        report = build_report(path)
        if args.out is not None:
            man = Manifest("replay-trace", args)
            write_report(report, args.out, man)
            man.save(args.out / "manifest.json")
        print_report(report)
        bad = sum(r["bound_violations"] for r in report["summary"])
        return EXIT_OK if bad == 0 else EXIT_SOLVE
    try:
        trace = GbdTrace.from_jsonl(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    eps = trace.terminal.get("eps", 1e-4)
    problems = trace_violations(trace, eps)
    print(f"{trace.kind} trace, {len(trace.rows)} iterations, status {trace.terminal.get('status')}, "
          f"objective {trace.terminal.get('objective')}")
    for r in trace.rows:
        print(f"  {r['iter']:3d} y={r['y']} {r['cut']:<11} UBD={r['UBD']} LBD={r['LBD']} {r['mode']}")
    for p in problems:
        print(f"  violation: {p}")
    return EXIT_OK if not problems else EXIT_SOLVE


# --------------------------------------------------------------------------
# reporting: a pure fold over trace files

def _load_traces(root: Path) -> dict[str, dict[int, GbdTrace]]:
    out: dict[str, dict[int, GbdTrace]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(sub.glob("*.jsonl")):
            t = GbdTrace.from_jsonl(f.read_text())
            out.setdefault(sub.name, {})[int(t.meta.get("instance", f.stem.split("_")[-1]))] = t
    if "classical" not in out:
        raise UsageError(f"{root} holds no classical traces")
    return out


def _obj(t: GbdTrace) -> float:
    v = t.terminal.get("objective")
    return math.inf if v == "inf" else float(v)


def _gap_row(t: GbdTrace) -> list[float]:
    return [u - lo if (lo is not NEG_INF and math.isfinite(u)) else math.inf
            for u, lo in zip(t.ubd(), t.lbd())]


def build_report(root: Path) -> dict:
    traces = _load_traces(root)
    ref = traces["classical"]
    ref_master = np.mean([t.terminal["master_time"] for t in ref.values()])
    ref_total = np.mean([t.terminal["total_time"] for t in ref.values()])
    ref_iters = sum(t.terminal["iterations"] for t in ref.values())
    order = ["classical"] + sorted(k for k in traces if k != "classical")
    summary, modes, curves = [], [], []
    for name in order:
        ts = traces[name]
        master = np.array([t.terminal["master_time"] for t in ts.values()])
        total = np.array([t.terminal["total_time"] for t in ts.values()])
        gaps = []
        for i, t in ts.items():
            fc, fm = _obj(ref[i]), _obj(t)
            gaps.append(0.0 if fc == fm else abs(fm - fc) / max(abs(fc), 1e-12))
        iters = [t.terminal["iterations"] for t in ts.values()]
        exact = sum(t.terminal["exact_solves"] for t in ts.values())
        counts: dict[str, int] = {}
        fixed = bits = 0
        for t in ts.values():
            m = len(t.rows[0]["y"]) if t.rows else 0
            for r in t.rows:
                counts[r["mode"]] = counts.get(r["mode"], 0) + 1
                fixed += r["fixed_count"]
                bits += m
        n_rows = sum(counts.values())
        violations = sum(len(trace_violations(t, t.terminal.get("eps", 1e-4))) for t in ts.values())
        summary.append({
            "method": name, "instances": len(ts),
            "converged": sum(bool(t.terminal["converged"]) for t in ts.values()),
            "master_time_mean": float(master.mean()), "master_time_std": float(master.std()),
            "total_time_mean": float(total.mean()), "total_time_std": float(total.std()),
            "master_improvement_pct": float(100 * (ref_master - master.mean()) / ref_master),
            "total_improvement_pct": float(100 * (ref_total - total.mean()) / ref_total),
            "rel_gap_mean": float(np.mean(gaps)), "rel_gap_max": float(np.max(gaps)),
            "iterations": int(sum(iters)), "exact_solves": int(exact),
            "exact_ratio": float(exact / ref_iters) if ref_iters else math.nan,
            "full_accept_freq": counts.get(Mode.FULL_ACCEPTED.value, 0) / n_rows if n_rows else 0.0,
            "confident_share": fixed / bits if bits else 0.0,
            "bound_violations": violations,
        })
        for mode, c in sorted(counts.items()):
            modes.append({"method": name, "mode": mode, "count": c, "frequency": c / n_rows})
        med = int(sorted(iters)[(len(iters) - 1) // 2])
        rows = [_gap_row(t) for t in ts.values() if t.terminal["iterations"] == med]
        for k in range(med):
            curves.append({"method": name, "iter": k + 1, "instances": len(rows),
                           "median_gap": float(np.median([r[k] for r in rows]))})
    return {"summary": summary, "modes": modes, "curves": curves}


SUMMARY_COLUMNS = ["method", "instances", "converged", "master_time_mean", "master_time_std",
                   "total_time_mean", "total_time_std", "master_improvement_pct",
                   "total_improvement_pct", "rel_gap_mean", "rel_gap_max", "iterations",
                   "exact_solves", "exact_ratio", "full_accept_freq", "confident_share",
                   "bound_violations"]


def write_report(report: dict, out: Path, man: Manifest) -> None:
    man.write_csv(out / "report.csv", SUMMARY_COLUMNS,
                  [[r[c] for c in SUMMARY_COLUMNS] for r in report["summary"]])
    cols = ["method", "mode", "count", "frequency"]
    man.write_csv(out / "modes.csv", cols, [[r[c] for c in cols] for r in report["modes"]])
    cols = ["method", "iter", "instances", "median_gap"]
    man.write_csv(out / "gap_curves.csv", cols, [[r[c] for c in cols] for r in report["curves"]])


def print_report(report: dict) -> None:
    print(f"{'method':<14}{'conv':>8}{'master s':>12}{'total s':>12}{'gap max':>10}"
          f"{'exact/cls':>11}{'full acc':>10}{'viol':>6}")
    for r in report["summary"]:
        print(f"{r['method']:<14}{r['converged']:>4}/{r['instances']:<3}"
              f"{r['master_time_mean']:>12.4f}{r['total_time_mean']:>12.4f}"
              f"{r['rel_gap_max']:>10.1e}{r['exact_ratio']:>11.3f}"
              f"{r['full_accept_freq']:>10.3f}{r['bound_violations']:>6}")


# --------------------------------------------------------------------------
# argument parsing

def _add_limits(p, eps=True):
    if eps:
        p.add_argument("--eps", type=float, default=1e-4, help="Convergence tolerance on UBD-LBD.")
    p.add_argument("--max-iter", type=int, default=100, help="Iteration cap per solve.")
    p.add_argument("--max-seconds", type=float, default=300.0, help="Wall-clock cap per solve.")


def _add_hybrid(p):
    p.add_argument("--delta1", type=float, default=0.10, help="Probabilities at or below fix 0.")
    p.add_argument("--delta2", type=float, default=0.90, help="Probabilities at or above fix 1.")
    p.add_argument("--cost-margin", type=float, default=None,
                   help="Accept a candidate only if its cut value is this far below UBD (default eps).")
    p.add_argument("--lbd-rule", choices=("certified", "candidate"), default="certified",
                   help="Fold only exact master values into LBD, or accepted candidate costs too.")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gbd-agent", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-instances", help="Sample instance files.")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=sorted(SAMPLERS), default="case_study1")
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    p.set_defaults(func=cmd_gen_instances)

    p = sub.add_parser("gen-expert", help="Run classical GBD and record (graph, master solution) pairs.")
    p.add_argument("--count", type=int, required=True, help="Number of sampled instances.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=sorted(SAMPLERS), default="case_study1")
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="Dataset file.")
    _add_limits(p)
    p.set_defaults(func=cmd_gen_expert)

    p = sub.add_parser("train", help="Train the actor by imitation (il) or reinforcement (rl).")
    tsub = p.add_subparsers(dest="stage", required=True)
    q = tsub.add_parser("il", help="Behavioral cloning on an expert dataset.")
    q.add_argument("--dataset", type=Path, required=True)
    q.add_argument("--init", type=Path, default=None, help="Start from these actor weights.")
    q.add_argument("--epochs", type=int, default=50)
    q.add_argument("--batch-size", type=int, default=32)
    q.add_argument("--val-frac", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", type=Path, required=True, help="Actor weights file.")
    q.set_defaults(func=cmd_train_il)
    q = tsub.add_parser("rl", help="Policy optimisation inside the GBD environment.")
    q.add_argument("--init", type=Path, default=None, help="Initial actor weights (usually from il).")
    q.add_argument("--random-init", action="store_true", help="Start from a fresh random actor.")
    q.add_argument("--critic", type=Path, default=None, help="Initial critic weights.")
    q.add_argument("--episodes", type=int, default=1000)
    q.add_argument("--iter-cap", type=int, default=50, help="Iterations per episode.")
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--eps", type=float, default=1e-4)
    q.add_argument("--family", choices=sorted(SAMPLERS), default="case_study1")
    q.add_argument("--deterministic-time", action="store_true",
                   help="Charge Newton steps instead of wall time in the time penalty.")
    q.add_argument("--checkpoint-every", type=int, default=0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", type=Path, required=True, help="Actor weights file.")
    q.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("solve", help="Solve one instance file.")
    p.add_argument("mode", choices=("classical", "hybrid"))
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--weights", type=Path, default=None, help="Actor weights (hybrid only).")
    p.add_argument("--deterministic-time", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="Output directory.")
    _add_limits(p)
    _add_hybrid(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="Compare classical and agent-assisted GBD on fresh instances.")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=sorted(SAMPLERS), default="case_study1")
    p.add_argument("--weights", action="append", metavar="NAME=PATH",
                   help="Actor weights for one hybrid variant; repeatable.")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic-time", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    _add_limits(p)
    _add_hybrid(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay-trace", help="Check a trace file, or rebuild a report from a trace directory.")
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, default=None, help="Write the rebuilt report here.")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaMismatch as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SolveFailure, NumericalFailure) as exc:
        print(f"solve failure: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
