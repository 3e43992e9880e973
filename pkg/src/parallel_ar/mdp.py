"""Parallel multi-agent decoding: conflict handling and the rollout engine.

At every step all M agents propose an action at once. Agents that pick the
same non-shareable node are resolved by priority: the highest-priority agent
keeps its choice, the rest fall back to a no-op. The engine repeats
mask -> propose -> resolve -> transition until every rollout is terminal.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from .tensor import Tensor, mul, tsum

PRIORITY_KINDS = ("random", "learned", "smallest_cost", "closest")


@dataclass
class JointAction:
    actions: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray


@dataclass
class ResolvedAction:
    actions: np.ndarray
    fallback_flags: np.ndarray


@dataclass
class SolutionTrace:
    """One completed construction: the action matrices plus the final objective."""

    env: str
    proposed: np.ndarray        # (T, M) pre-resolution choices
    actions: np.ndarray         # (T, M) resolved actions
    fallback_flags: np.ndarray  # (T, M)
    step_log_probs: np.ndarray  # (T,) summed over non-forced agents
    objective: float
    steps: int
    wall_time: float = 0.0
    seed: int | None = None
    solution: dict = field(default_factory=dict)
    conflicts: int = 0
    decisions: int = 0

    @property
    def resolved(self) -> list[ResolvedAction]:
        return [ResolvedAction(self.actions[t], self.fallback_flags[t]) for t in range(self.steps)]

    @property
    def log_prob(self) -> float:
        return float(self.step_log_probs.sum())

    @property
    def conflict_rate(self) -> float:
        return self.conflicts / self.decisions if self.decisions else 0.0

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "steps": int(self.steps),
            "objective": float(self.objective),
            "seed": self.seed,
            "actions": self.actions.astype(int).tolist(),
            "proposed": self.proposed.astype(int).tolist(),
            "fallback_flags": self.fallback_flags.astype(bool).tolist(),
            "step_log_probs": [float(x) for x in self.step_log_probs],
            "solution": self.solution,
            "conflicts": int(self.conflicts),
            "decisions": int(self.decisions),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SolutionTrace":
        actions = np.asarray(d.get("actions", []), dtype=np.int64)
        if actions.ndim != 2:
            if actions.size:
                raise ValueError("actions must be a (T, M) matrix")
            actions = actions.reshape(0, 0)
        flags = np.asarray(d.get("fallback_flags", np.zeros_like(actions, dtype=bool)), dtype=bool).reshape(actions.shape)
        proposed = np.asarray(d.get("proposed", actions), dtype=np.int64).reshape(actions.shape)
        return cls(
            env=d["env"],
            proposed=proposed,
            actions=actions,
            fallback_flags=flags,
            step_log_probs=np.asarray(d.get("step_log_probs", np.zeros(len(actions))), dtype=np.float64),
            objective=float(d["objective"]),
            steps=int(d.get("steps", len(actions))),
            seed=d.get("seed"),
            solution=d.get("solution", {}),
            conflicts=int(d.get("conflicts", 0)),
            decisions=int(d.get("decisions", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "SolutionTrace":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------- conflicts

def resolve_conflicts_batch(actions: np.ndarray, priorities: np.ndarray, fallbacks: np.ndarray,
                            shareable: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised priority-based conflict handler over a batch of rows.

    ``actions``, ``priorities``, ``fallbacks`` are [R, M]; ``shareable`` is
    [R, A] (or [A]). Returns resolved actions and the fallback flags.
    Ties in priority go to the lower agent index (stable descending sort).
    """
    actions = np.asarray(actions, dtype=np.int64)
    R, M = actions.shape
    order = np.argsort(-np.asarray(priorities, dtype=np.float64), axis=1, kind="stable")
    a_sorted = np.take_along_axis(actions, order, axis=1)
    same = a_sorted[:, :, None] == a_sorted[:, None, :]
    earlier = np.tril(np.ones((M, M), dtype=bool), k=-1)
    conflict_sorted = (same & earlier).any(axis=2)
    shareable = np.broadcast_to(np.asarray(shareable, dtype=bool), (R, shareable.shape[-1]))
    conflict_sorted &= ~np.take_along_axis(shareable, a_sorted, axis=1)
    flags = np.empty_like(conflict_sorted)
    np.put_along_axis(flags, order, conflict_sorted, axis=1)
    resolved = np.where(flags, fallbacks, actions)
    return resolved, flags


def resolve_conflicts(actions, priorities, fallbacks, shareable) -> ResolvedAction:
    a = np.asarray(actions, dtype=np.int64)[None]
    p = np.asarray(priorities, dtype=np.float64)[None]
    r = np.asarray(fallbacks, dtype=np.int64)[None]
    resolved, flags = resolve_conflicts_batch(a, p, r, np.asarray(shareable, dtype=bool)[None])
    return ResolvedAction(resolved[0], flags[0])


def priority_source(kind: str, *, probs=None, costs=None, distances=None, rng=None,
                    shape=None) -> np.ndarray:
    """Priorities for the conflict handler; larger means wins ties."""
    if kind == "learned":
        if probs is None:
            raise ValueError("learned priorities need the sampled-action probabilities")
        return np.asarray(probs, dtype=np.float64)
    if kind == "smallest_cost":
        if costs is None:
            raise ValueError("smallest_cost priorities need per-agent accumulated costs")
        return -np.asarray(costs, dtype=np.float64)
    if kind == "closest":
        if distances is None:
            raise ValueError("closest priorities need agent-to-chosen-node distances")
        return -np.asarray(distances, dtype=np.float64)
    if kind == "random":
        if rng is None:
            raise ValueError("random priorities need an rng")
        if shape is None:
            raise ValueError("random priorities need a shape")
        return rng.random(shape)
    raise ValueError(f"unknown priority kind {kind!r}; expected one of {PRIORITY_KINDS}")


# --------------------------------------------------------------------------- policies

@dataclass
class Proposal:
    actions: np.ndarray                 # [R, M]
    probs: np.ndarray                   # [R, M]
    log_probs: np.ndarray               # [R, M]
    log_prob_tensor: Tensor | None = None


class PolicyContract(Protocol):
    def begin(self, env, instances: Sequence, index: np.ndarray) -> Any: ...

    def propose(self, context, state, mask: np.ndarray, greedy: bool,
                rng: np.random.Generator) -> Proposal: ...


def select_actions(probs: np.ndarray, greedy: bool, rng: np.random.Generator) -> np.ndarray:
    """Argmax (ties to lowest index) or one categorical draw per row of [..., A]."""
    if greedy:
        return probs.argmax(axis=-1)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # guard the top end against rounding: fall back to the last feasible entry
    last = probs.shape[-1] - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
    return np.minimum(idx, last)


# --------------------------------------------------------------------------- rollouts

@dataclass
class RolloutBatch:
    traces: list[SolutionTrace]
    objectives: np.ndarray
    log_prob: Tensor | None     # [R] summed log-probabilities, on the active tape
    steps: np.ndarray


def run_rollouts(env, policy, instances: Sequence, index: np.ndarray | None = None, *,
                 mode: str = "greedy", seed: int | None = None, handler: str = "learned",
                 rng: np.random.Generator | None = None) -> RolloutBatch:
    """Roll out ``len(index)`` constructions; rollout r solves ``instances[index[r]]``."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    index = np.arange(len(instances)) if index is None else np.asarray(index, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    greedy = mode == "greedy"
    t0 = time.perf_counter()

    state = env.reset([instances[i] for i in index])
    context = policy.begin(env, instances, index)
    R = len(index)
    M = env.n_agents(state)
    budget = env.step_budget(state)

    done = env.is_terminal(state)
    steps = np.zeros(R, dtype=np.int64)
    hist_prop, hist_act, hist_flag, hist_lp, hist_alive = [], [], [], [], []
    conflicts = np.zeros(R, dtype=np.int64)
    decisions = np.zeros(R, dtype=np.int64)
    total_lp: Tensor | None = None

    t = 0
    while not done.all():
        if t >= budget:
            raise RuntimeError(f"step budget {budget} exceeded: livelock in {env.name} rollout")
        mask = env.action_mask(state)
        prop = policy.propose(context, state, mask, greedy, rng)
        free = (mask.sum(axis=-1) > 1) & ~done[:, None]

        if handler == "learned":
            pri = priority_source("learned", probs=prop.probs)
        elif handler == "random":
            pri = priority_source("random", rng=rng, shape=(R, M))
        elif handler == "smallest_cost":
            pri = priority_source("smallest_cost", costs=env.agent_costs(state))
        elif handler == "closest":
            pri = priority_source("closest", distances=env.chosen_distances(state, prop.actions))
        else:
            priority_source(handler)
        resolved, flags = resolve_conflicts_batch(prop.actions, pri, env.fallback_actions(state),
                                                  env.shareable(state))

        lp = np.where(free, prop.log_probs, 0.0)
        if prop.log_prob_tensor is not None:
            contrib = tsum(mul(prop.log_prob_tensor, free.astype(np.float64)), axis=-1)
            total_lp = contrib if total_lp is None else total_lp + contrib

        alive = ~done
        hist_prop.append(prop.actions)
        hist_act.append(resolved)
        hist_flag.append(flags)
        hist_lp.append(lp.sum(axis=-1))
        hist_alive.append(alive)
        conflicts += (flags & free).sum(axis=-1)
        decisions += free.sum(axis=-1)
        steps += alive

        state = env.transition(state, resolved, flags)
        done = env.is_terminal(state)
        t += 1

    elapsed = time.perf_counter() - t0
    objectives = env.objective(state)
    traces = []
    for r in range(R):
        T = int(steps[r])
        traces.append(SolutionTrace(
            env=env.name,
            proposed=np.array([h[r] for h in hist_prop[:T]], dtype=np.int64).reshape(T, M),
            actions=np.array([h[r] for h in hist_act[:T]], dtype=np.int64).reshape(T, M),
            fallback_flags=np.array([h[r] for h in hist_flag[:T]], dtype=bool).reshape(T, M),
            step_log_probs=np.array([h[r] for h in hist_lp[:T]], dtype=np.float64),
            objective=float(objectives[r]),
            steps=T,
            wall_time=elapsed / R,
            seed=seed,
            solution=env.solution(state, r),
            conflicts=int(conflicts[r]),
            decisions=int(decisions[r]),
        ))
    return RolloutBatch(traces, objectives, total_lp, steps)


def rollout(instance, env, policy, mode: str = "greedy", rng_seed: int | None = None,
            handler: str = "learned") -> SolutionTrace:
    return run_rollouts(env, policy, [instance], mode=mode, seed=rng_seed, handler=handler).traces[0]


def rollout_batch(instances: Sequence, env, policy, mode: str = "greedy", samples_per_instance: int = 1,
                  seed: int | None = None, handler: str = "learned") -> list[list[SolutionTrace]]:
    """``samples_per_instance`` independent rollouts of every instance, grouped [B][S]."""
    if samples_per_instance < 1:
        raise ValueError("samples_per_instance must be >= 1")
    S = samples_per_instance
    index = np.repeat(np.arange(len(instances)), S)
    batch = run_rollouts(env, policy, instances, index, mode=mode, seed=seed, handler=handler)
    return [batch.traces[i * S:(i + 1) * S] for i in range(len(instances))]


def replay(env, instance, trace: SolutionTrace):
    """Re-run the resolved actions of ``trace``; returns the list of visited states."""
    state = env.reset([instance])
    states = [state]
    for t in range(trace.steps):
        state = env.transition(state, trace.actions[t][None], trace.fallback_flags[t][None])
        states.append(state)
    return states


def play(env, instance, actions, fallback_flags=None, seed: int | None = None) -> SolutionTrace:
    """Trace of a scripted action sequence (T, M), stepped through the environment."""
    actions = np.asarray(actions, dtype=np.int64)
    flags = np.zeros(actions.shape, dtype=bool) if fallback_flags is None else np.asarray(fallback_flags, dtype=bool)
    state = env.reset([instance])
    for t in range(len(actions)):
        state = env.transition(state, actions[t][None], flags[t][None])
    if not env.is_terminal(state)[0]:
        raise ValueError("scripted actions do not reach a terminal state")
    T = len(actions)
    return SolutionTrace(env=env.name, proposed=actions.copy(), actions=actions, fallback_flags=flags,
                         step_log_probs=np.zeros(T), objective=float(env.objective(state)[0]), steps=T,
                         seed=seed, solution=env.solution(state, 0))
