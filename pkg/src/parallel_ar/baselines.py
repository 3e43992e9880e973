"""Non-neural reference solvers and exhaustive oracles for tiny instances.

The policies here follow the same ``begin``/``propose`` protocol as the
network so they run through the ordinary rollout engine.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import FfspEnv, FfspInstance, HcvrpEnv, HcvrpInstance, OmdcpdpEnv, OmdcpdpInstance
from .envs.base import euclid
from .mdp import Proposal, SolutionTrace, play, select_actions

ORACLE_STATE_LIMIT = 10_000_000


# --------------------------------------------------------------------------- policies

class RandomPolicy:
    """Uniform over each agent's feasible actions. Always samples."""

    handler = "random"

    def begin(self, env, instances, index):
        return None

    def propose(self, context, state, mask, greedy, rng) -> Proposal:
        probs = mask / mask.sum(axis=-1, keepdims=True)
        actions = select_actions(probs, greedy=False, rng=rng)
        p = np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0]
        return Proposal(actions, p, np.log(p))


class GreedyDistancePolicy:
    """Nearest feasible non-shareable node; shareable nodes only as a last resort.

    Meant to run with the ``closest`` conflict handler.
    """

    handler = "closest"

    def begin(self, env, instances, index):
        if not getattr(env, "routing", False):
            raise ValueError("greedy-distance needs a routing environment")
        return env

    def propose(self, env, state, mask, greedy, rng) -> Proposal:
        d = env.distances(state)
        share = env.shareable(state)[:, None, :]
        score = np.where(mask & ~share, d, np.inf)
        fallback = np.where(mask & share, d, np.inf)
        none_real = ~np.isfinite(score).any(axis=-1)
        actions = np.where(none_real, fallback.argmin(axis=-1), score.argmin(axis=-1))
        one = np.ones(actions.shape)
        return Proposal(actions, one, np.zeros(actions.shape))


class SjfPolicy:
    """Shortest processing time first over the currently available (job, machine) pairs."""

    handler = "learned"

    def begin(self, env, instances, index):
        if not isinstance(env, FfspEnv):
            raise ValueError("SJF dispatching is defined for the flow shop only")
        return None

    def propose(self, context, state, mask, greedy, rng) -> Proposal:
        R, M, A = mask.shape
        N = A - 1
        actions = np.full((R, M), N, dtype=np.int64)
        probs = np.ones((R, M))
        jobs = mask[..., :N]
        for r in range(R):
            g_idx, j_idx = np.nonzero(jobs[r])
            if not len(g_idx):
                continue
            p = state.cost[r, g_idx, j_idx]
            order = np.lexsort((j_idx, g_idx, p))
            used_g, used_j = set(), set()
            for o in order:
                g, j = int(g_idx[o]), int(j_idx[o])
                if g in used_g or j in used_j:
                    continue
                actions[r, g] = j
                used_g.add(g)
                used_j.add(j)
            # a machine that may not wait still has to name a job; it loses the conflict
            for g in range(M):
                if g not in used_g and not mask[r, g, N]:
                    actions[r, g] = int(np.flatnonzero(jobs[r, g])[0])
                    probs[r, g] = 0.5
        return Proposal(actions, probs, np.log(probs))


# --------------------------------------------------------------------------- oracles

@dataclass
class OracleResult:
    objective: float
    trace: SolutionTrace
    nodes_explored: int
    wall_time: float


class OracleTooLarge(ValueError):
    pass


def instance_hash(instance) -> str:
    text = json.dumps(instance.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def exhaustive_oracle(instance, env=None, cache_dir: str | Path | None = None) -> OracleResult:
    """Proven optimum of a tiny instance by enumeration with bound pruning."""
    from .envs import env_for
    env = env or env_for(instance)
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("PARALLEL_AR_ORACLE_CACHE")
    path = None
    if cache_dir:
        path = Path(cache_dir) / f"{env.name}-{instance_hash(instance)}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return OracleResult(d["objective"], SolutionTrace.from_dict(d["trace"]),
                                d["nodes_explored"], d["wall_time"])
    t0 = time.perf_counter()
    if isinstance(instance, HcvrpInstance):
        trace, nodes = _hcvrp_oracle(instance, env)
    elif isinstance(instance, OmdcpdpInstance):
        trace, nodes = _omdcpdp_oracle(instance, env)
    elif isinstance(instance, FfspInstance):
        trace, nodes = _ffsp_oracle(instance, env)
    else:
        raise ValueError(f"no oracle for {type(instance).__name__}")
    result = OracleResult(trace.objective, trace, nodes, time.perf_counter() - t0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"objective": result.objective, "trace": trace.to_dict(),
                                    "nodes_explored": nodes, "wall_time": result.wall_time}))
    return result


def _guard(states: float) -> None:
    if states > ORACLE_STATE_LIMIT:
        raise OracleTooLarge(f"enumeration would touch ~{states:.3g} states (limit {ORACLE_STATE_LIMIT:.0e})")


def _assign_dfs(n_items: int, n_agents: int, cost_of, agent_key=None):
    """Min over item->agent assignments of max_k cost_of(k, subset_mask) with pruning.

    Agents with equal ``agent_key`` are interchangeable: an item may only open
    the first still-empty agent of each class.
    """
    best = [np.inf, None]
    explored = [0]
    keys = agent_key or list(range(n_agents))
    subsets = [0] * n_agents

    def rec(i, current):
        explored[0] += 1
        if current >= best[0]:
            return
        if i == n_items:
            best[0], best[1] = current, list(subsets)
            return
        opened = set()
        for k in range(n_agents):
            if subsets[k] == 0:
                if keys[k] in opened:
                    continue
                opened.add(keys[k])
            subsets[k] |= 1 << i
            rec(i + 1, max(current, cost_of(k, subsets[k])))
            subsets[k] &= ~(1 << i)

    rec(0, 0.0)
    return best[1], explored[0]


def _hcvrp_best_route(inst: HcvrpInstance, k: int, members: list[int]):
    """Shortest closed route with reloads for vehicle k over customers ``members`` (1-based)."""
    if not members:
        return 0.0, []
    locs, dem, cap = inst.locations, inst.full_demands, inst.capacities[k]
    best_len, best_route = np.inf, None
    for perm in itertools.permutations(members):
        n = len(perm)
        # split DP: where to insert depot returns along this visiting order
        dp = [0.0] + [np.inf] * n
        back = [0] * (n + 1)
        for i in range(n):
            if not np.isfinite(dp[i]):
                continue
            load, length = 0.0, euclid(locs[perm[i]], locs[0])
            for j in range(i, n):
                load += dem[perm[j]]
                if load > cap:
                    break
                if j > i:
                    length += euclid(locs[perm[j]], locs[perm[j - 1]])
                total = dp[i] + length + euclid(locs[0], locs[perm[j]])
                if total < dp[j + 1]:
                    dp[j + 1], back[j + 1] = total, i
        if dp[n] < best_len:
            route, j = [], n
            while j > 0:
                i = back[j]
                route = [0] + list(perm[i:j]) + route
                j = i
            best_len, best_route = dp[n], route + [0]
    return best_len / inst.speeds[k], best_route


def _hcvrp_oracle(inst: HcvrpInstance, env: HcvrpEnv):
    N, M = inst.n_nodes, inst.n_agents
    _guard(M ** N + (2 ** N) * M * _factorial(N))
    memo: dict[tuple[int, int], tuple[float, list]] = {}

    def cost_of(k, subset):
        key = (k, subset)
        if key not in memo:
            members = [i + 1 for i in range(N) if subset >> i & 1]
            memo[key] = _hcvrp_best_route(inst, k, members)
        return memo[key][0]

    keys = [(float(inst.capacities[k]), float(inst.speeds[k])) for k in range(M)]
    subsets, explored = _assign_dfs(N, M, cost_of, keys)
    routes = [memo[(k, s)][1] if s else [0] for k, s in enumerate(subsets)]
    return play_routes(env, inst, routes), explored


def _factorial(n: int) -> float:
    return float(np.prod(np.arange(1, n + 1), dtype=np.float64))


def play_routes(env, inst, routes, stay=None) -> SolutionTrace:
    """Run per-vehicle node sequences (each starting at its origin) in parallel.

    Vehicles that have finished their sequence hold position through a
    flagged fallback, the same no-op a conflict loser performs.
    """
    M = len(routes)
    seqs = [list(r[1:]) if env.name == "hcvrp" else list(r) for r in routes]
    T = max((len(s) for s in seqs), default=0)
    state = env.reset([inst])
    actions, flags = [], []
    for t in range(T):
        fb = env.fallback_actions(state)[0]
        a = np.array([s[t] if t < len(s) else fb[k] for k, s in enumerate(seqs)], dtype=np.int64)
        f = np.array([t >= len(s) for s in seqs])
        actions.append(a)
        flags.append(f)
        state = env.transition(state, a[None], f[None])
    return play(env, inst, np.array(actions, dtype=np.int64).reshape(T, M),
                np.array(flags, dtype=bool).reshape(T, M))


def _omdcpdp_orders(inst: OmdcpdpInstance, k: int, pairs: list[int]):
    """Best open route (sum of delivery times) for vehicle k over ``pairs``."""
    N, Q = inst.n_nodes, int(inst.capacities[k])
    locs = inst.node_locations
    best = [np.inf, None]
    count = [0]

    def rec(pos, clock, total, carried, todo_pick, route):
        count[0] += 1
        if total >= best[0]:
            return
        if not todo_pick and not carried:
            best[0], best[1] = total, list(route)
            return
        nxt = [p for p in todo_pick if len(carried) < Q] + [p + N for p in carried]
        for node in nxt:
            c = clock + euclid(locs[node], pos)
            if node < N:
                rec(locs[node], c, total, carried | {node}, todo_pick - {node}, route + [node])
            else:
                rec(locs[node], c, total + c, carried - {node - N}, todo_pick, route + [node])

    rec(inst.starts[k], 0.0, 0.0, frozenset(), frozenset(pairs), [])
    return best[0], best[1], count[0]


def _omdcpdp_oracle(inst: OmdcpdpInstance, env: OmdcpdpEnv):
    N, M = inst.n_nodes, inst.n_agents
    _guard(M ** N * _factorial(2 * N))
    memo: dict[tuple[int, int], tuple] = {}
    explored = [0]

    def cost_of(k, subset):
        if (k, subset) not in memo:
            res = _omdcpdp_orders(inst, k, [i for i in range(N) if subset >> i & 1])
            explored[0] += res[2]
            memo[(k, subset)] = res
        return memo[(k, subset)][0]

    # the objective is a sum over vehicles, so enumerate assignments directly
    best, best_sub = np.inf, None
    for assign in itertools.product(range(M), repeat=N):
        subs = [0] * M
        for i, k in enumerate(assign):
            subs[k] |= 1 << i
        total = sum(cost_of(k, s) for k, s in enumerate(subs))
        explored[0] += 1
        if total < best:
            best, best_sub = total, subs
    routes = [memo[(k, s)][1] if s else [] for k, s in enumerate(best_sub)]
    return play_routes(env, inst, routes), explored[0]


def ffsp_schedule(inst: FfspInstance, sequences) -> tuple[float, list]:
    """Semi-active schedule from per-stage, per-machine job sequences."""
    avail = np.zeros(inst.n_nodes)
    sched = []
    for s, machines in enumerate(sequences):
        done = np.zeros(inst.n_nodes)
        for k, seq in enumerate(machines):
            free = 0.0
            for j in seq:
                start, free = FfspEnv.place(free, avail[j], inst.proc_times[s][j, k])
                done[j] = free
                sched.append([s, j, k, float(start), float(free)])
        avail = done
    return float(avail.max()), sched


def _ffsp_oracle(inst: FfspInstance, env: FfspEnv):
    N = inst.n_nodes
    _guard(float(np.prod([_factorial(N + m - 1) / _factorial(m - 1) for m in inst.machines_per_stage])))
    per_stage = []
    for m in inst.machines_per_stage:
        options = []
        for perm in itertools.permutations(range(N)):
            for cuts in itertools.combinations_with_replacement(range(N + 1), m - 1):
                bounds = (0,) + cuts + (N,)
                options.append(tuple(tuple(perm[bounds[i]:bounds[i + 1]]) for i in range(m)))
        per_stage.append(sorted(set(options)))
    _guard(float(np.prod([len(o) for o in per_stage], dtype=np.float64)))
    best, best_sched, explored = np.inf, None, 0
    for combo in itertools.product(*per_stage):
        explored += 1
        makespan, sched = ffsp_schedule(inst, combo)
        if makespan < best:
            best, best_sched = makespan, sched
    M = inst.n_agents
    trace = SolutionTrace(env=env.name, proposed=np.zeros((0, M), dtype=np.int64),
                          actions=np.zeros((0, M), dtype=np.int64), fallback_flags=np.zeros((0, M), dtype=bool),
                          step_log_probs=np.zeros(0), objective=best, steps=0,
                          solution={"schedule": best_sched})
    return trace, explored
