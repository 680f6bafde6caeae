"""GBD as an episodic environment and clipped-ratio policy optimisation.

One episode is one decomposition run on a freshly sampled instance.  The
agent proposes the whole binary vector each iteration; a proposal that is
infeasible for the master, or whose cut value exceeds the incumbent, is
replaced by the exact master solution and penalised.  Updates run once per
episode over the collected steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import master as mst
from .engine import GbdRun, Limits, SolveFailure
from .graph import BipartiteGraph, encode_normalized
from .master import NEG_INF
from .nlp import NumericalFailure, SubproblemCache
from .nn import (AdamState, GraphBatch, NetParams, adam_step, backward, clip_grads, forward,
                 log_prob, log_prob_batch, sample_action)


@dataclass(frozen=True)
class RewardConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.1
    beta1: float = 1.0
    beta2: float = 0.5
    tau: float = 1.0
    gamma_discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    update_epochs: int = 4
    minibatch: int = 64
    iter_cap: int = 50
    lr: float = 1e-3
    max_grad_norm: float | None = None

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "beta1", "beta2", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.gamma_discount < 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("discount must lie in [0,1) and lambda in [0,1]")


@dataclass(frozen=True)
class Bounds:
    """UBD/LBD before and after the step, and the reference gap."""
    ubd_prev: float
    lbd_prev: object
    ubd: float
    lbd: object
    gap0: float


def gap_of(ubd, lbd) -> float:
    if lbd is NEG_INF or ubd == math.inf:
        return math.inf
    return ubd - lbd


@dataclass(frozen=True)
class RewardParts:
    total: float
    r_feas: float
    r_gap: float
    r_time: float


def compute_reward(feasible: bool, bounds: Bounds, t_sp: float, cfg: RewardConfig) -> RewardParts:
    r_feas = cfg.beta2 if feasible else -cfg.beta1
    r_gap = 0.0
    g_prev, g_cur = gap_of(bounds.ubd_prev, bounds.lbd_prev), gap_of(bounds.ubd, bounds.lbd)
    if feasible and math.isfinite(g_prev) and math.isfinite(g_cur) and math.isfinite(bounds.gap0) \
            and bounds.gap0 != 0:
        r_gap = abs((g_prev - g_cur) / bounds.gap0)
    r_time = min(t_sp, cfg.tau)
    total = cfg.alpha1 * r_feas + cfg.alpha2 * r_gap - cfg.alpha3 * r_time
    return RewardParts(total, r_feas, r_gap, r_time)


@dataclass
class StepResult:
    graph: BipartiteGraph | None
    reward: RewardParts
    done: bool
    accepted: bool
    info: dict = field(default_factory=dict)
    truncated: bool = False   # stopped by the step cap rather than by the task


class GbdEnv:
    """Environment over classical-GBD bookkeeping with agent-chosen assignments."""

    def __init__(self, sampler, cfg: RewardConfig = RewardConfig(), eps: float = 1e-4,
                 time_mode: str = "newton", cache: SubproblemCache | None = None,
                 cost_margin: float | None = None):
        self.sampler = sampler
        self.margin = eps if cost_margin is None else cost_margin
        self.cfg = cfg
        self.limits = Limits(eps=eps, max_iter=cfg.iter_cap, max_seconds=math.inf)
        self.time_mode = time_mode
        self.cache = cache
        self.run: GbdRun | None = None
        self.gap0 = math.inf
        self.violations = 0

    def reset(self, rng: np.random.Generator) -> BipartiteGraph:
        inst = self.sampler(rng)
        self.run = GbdRun(inst, limits=self.limits, time_mode=self.time_mode, cache=self.cache)
        self.run.subproblem()
        self.gap0 = math.inf
        self.steps = 0
        return encode_normalized(self.run.state, inst)

    def _note_gap(self):
        g = self.run.gap()
        if not math.isfinite(self.gap0) and math.isfinite(g):
            self.gap0 = g

    def step(self, a) -> StepResult:
        run, cfg = self.run, self.cfg
        a = np.asarray(a, dtype=float)
        ubd_prev, lbd_prev = run.ubd, run.lbd
        had_cuts = bool(run.state.opt_cuts)
        accepted = False
        if mst.check_feasible(run.state, a):
            mu_hat = mst.eval_candidate_cost(run.state, a)
            accepted = mu_hat <= run.ubd - self.margin
        if accepted:
            y, mu_b = a, mu_hat
        else:
            res = mst.solve_exact(run.state)
            run.exact_solves += 1
            if res.infeasible:
                self.steps += 1
                parts = RewardParts(-cfg.alpha1 * cfg.beta1, -cfg.beta1, 0.0, 0.0)
                return StepResult(None, parts, True, False, {"master_infeasible": True})
            y, mu_b = res.y, res.mu_b
        # training bookkeeping replaces the bound (no max); the cost gate above
        # keeps it at or below the incumbent after the subproblem
        run.lbd = mu_b if had_cuts else NEG_INF
        run.y = y.copy()
        info = run.subproblem()
        run.record(info, "Agent" if accepted else "Solver", 0.0, int(not accepted), 0)
        self.steps += 1
        self._note_gap()
        if run.lbd is not NEG_INF and run.lbd > run.ubd + self.limits.eps:
            self.violations += 1
        parts = compute_reward(accepted, Bounds(ubd_prev, lbd_prev, run.ubd, run.lbd, self.gap0),
                               info["t_sp"], cfg)
        converged = run.done()
        if converged:
            run.status = "converged"
        done = converged or self.steps >= cfg.iter_cap
        graph = encode_normalized(run.state, run.inst)
        return StepResult(graph, parts, done, accepted,
                          {"converged": converged, "t_sp": info["t_sp"], "y": y},
                          truncated=done and not converged)


class BanditEnv:
    """Single-step two-armed toy: arm 1 pays 1, arm 0 pays 0."""

    def __init__(self):
        self.graph = BipartiteGraph(1, 1, np.array([0]), np.array([0]), np.zeros(1),
                                    np.ones(1), np.ones(1))

    def reset(self, rng) -> BipartiteGraph:
        return self.graph

    def step(self, a) -> StepResult:
        r = float(np.asarray(a)[0] > 0.5)
        return StepResult(self.graph, RewardParts(r, r, 0.0, 0.0), True, True, {})


@dataclass
class Experience:
    graph: BipartiteGraph
    action: np.ndarray
    log_prob_old: float
    reward: float
    next_graph: BipartiteGraph | None
    value: float
    done: bool
    advantage: float = 0.0
    ret: float = 0.0


def compute_gae(episode: list[Experience], last_value: float, gamma: float, lam: float) -> None:
    """Fill advantages and returns in place; ``last_value`` bootstraps a cut-off episode."""
    adv = 0.0
    for t in reversed(range(len(episode))):
        ex = episode[t]
        if ex.done:
            next_v, carry = 0.0, 0.0
        else:
            next_v = episode[t + 1].value if t + 1 < len(episode) else last_value
            carry = 1.0
        delta = ex.reward + gamma * next_v - ex.value
        adv = delta + gamma * lam * carry * adv
        ex.advantage = adv
        ex.ret = adv + ex.value


@dataclass
class Learner:
    actor: NetParams
    critic: NetParams
    actor_opt: AdamState
    critic_opt: AdamState

    @classmethod
    def create(cls, actor: NetParams, critic: NetParams, lr: float = 1e-3) -> "Learner":
        return cls(actor.copy(), critic.copy(), AdamState(lr=lr), AdamState(lr=lr))


def ppo_update(batch: list[Experience], learner: Learner, cfg: RewardConfig,
               rng: np.random.Generator) -> dict:
    if not batch:
        raise ValueError("empty batch")
    saved = (learner.actor.copy(), learner.critic.copy())
    surr_hist, vloss_hist, kl_hist = [], [], []
    for _ in range(cfg.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(order), cfg.minibatch):
            part = [batch[i] for i in order[start:start + cfg.minibatch]]
            gb = GraphBatch([ex.graph for ex in part])
            acts = np.array([ex.action for ex in part])
            adv = np.array([ex.advantage for ex in part])
            old = np.array([ex.log_prob_old for ex in part])
            rets = np.array([ex.ret for ex in part])
            n = len(part)

            p, tape = forward(learner.actor, gb)
            new = log_prob_batch(p, acts)
            ratio = np.exp(new - old)
            clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
            surr = np.minimum(ratio * adv, clipped * adv)
            # the unclipped branch is the one carrying gradient
            active = np.where(adv >= 0, ratio <= 1 + cfg.clip_eps, ratio >= 1 - cfg.clip_eps)
            coef = -(adv * ratio * active) / n
            d_logits = coef[:, None] * (acts - p)

            v, vtape = forward(learner.critic, gb)
            vloss = 0.5 * np.mean((v - rets) ** 2)
            if not (np.isfinite(surr).all() and np.isfinite(vloss)):
                learner.actor, learner.critic = saved
                return {"aborted": True}
            ga = backward(tape, d_logits, wrt="logits")
            gc = backward(vtape, (v - rets) / n)
            if cfg.max_grad_norm:
                ga, gc = clip_grads(ga, cfg.max_grad_norm), clip_grads(gc, cfg.max_grad_norm)
            if not all(np.isfinite(g).all() for g in list(ga.values()) + list(gc.values())):
                learner.actor, learner.critic = saved
                return {"aborted": True}
            adam_step(learner.actor, ga, learner.actor_opt)
            adam_step(learner.critic, gc, learner.critic_opt)
            surr_hist.append(float(surr.mean()))
            vloss_hist.append(float(vloss))
            kl_hist.append(float(np.mean(old - new)))
    return {"aborted": False, "surrogate": float(np.mean(surr_hist)),
            "value_loss": float(np.mean(vloss_hist)), "approx_kl": float(np.mean(kl_hist))}


def rollout(env, learner: Learner, rng: np.random.Generator, max_steps: int = 10_000):
    graph = env.reset(rng)
    episode: list[Experience] = []
    parts: list[RewardParts] = []
    accepted = 0
    last_value = 0.0
    for _ in range(max_steps):
        p = forward(learner.actor, graph)[0][0]
        value = float(forward(learner.critic, graph)[0][0])
        a = sample_action(p, rng)
        out = env.step(a)
        episode.append(Experience(graph, a, log_prob(p, a), out.reward.total, out.graph,
                                  value, out.done and not out.truncated))
        parts.append(out.reward)
        accepted += int(out.accepted)
        if out.done:
            if out.truncated:
                last_value = float(forward(learner.critic, out.graph)[0][0])
            break
        graph = out.graph
    return episode, parts, accepted, last_value


@dataclass
class RLResult:
    actor: NetParams
    critic: NetParams
    rewards: list[float]
    log: list[dict]
    bound_violations: int = 0


def smoothed(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty(len(v))
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def train_rl(env, actor: NetParams, critic: NetParams, n_episodes: int,
             cfg: RewardConfig = RewardConfig(), seed: int = 0, callback=None) -> RLResult:
    """Per-episode updates; ``env`` is a GbdEnv or any reset/step environment."""
    learner = Learner.create(actor, critic, cfg.lr)
    rng = np.random.default_rng(seed)
    rewards, log = [], []
    for ep in range(n_episodes):
        try:
            episode, parts, accepted, last_value = rollout(env, learner, rng)
        except (SolveFailure, NumericalFailure) as exc:
            log.append({"episode": ep, "skipped": str(exc)})
            continue
        compute_gae(episode, last_value, cfg.gamma_discount, cfg.gae_lambda)
        diag = ppo_update(episode, learner, cfg, rng)
        total = float(sum(ex.reward for ex in episode))
        rewards.append(total)
        row = {"episode": ep, "reward": total,
               "r_feas": float(sum(x.r_feas for x in parts)),
               "r_gap": float(sum(x.r_gap for x in parts)),
               "r_time": float(sum(x.r_time for x in parts)),
               "iterations": len(episode), "accepted": accepted, **diag}
        log.append(row)
        if callback is not None:
            callback(ep, row, learner)
    return RLResult(learner.actor, learner.critic, rewards, log,
                    getattr(env, "violations", 0))
