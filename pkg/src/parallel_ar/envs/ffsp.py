"""Flexible flow shop: machines are the agents, jobs (plus one dummy) the nodes.

Decoding is event driven. At the current clock a machine may take a job when
the machine is idle, has not chosen to wait at this clock, and the job has
finished its previous stage. A taken job starts at
``max(machine idle-at, job available-at)``. Choosing the dummy job (index N)
means "wait for the next event". When nobody can act the clock jumps to the
next completion; if nothing is in flight either, waiting is disabled for one
step so construction always progresses.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .base import InfeasibleActionError, VerificationReport, same_shape

TIME_SCALE = 10.0


@dataclass(frozen=True, eq=False)
class FfspInstance:
    proc_times: tuple  # per stage: int array (N, m_i)

    kind = "ffsp"

    def __post_init__(self):
        stages = tuple(np.asarray(p, dtype=np.int64) for p in self.proc_times)
        if not stages:
            raise ValueError("need at least one stage")
        n = stages[0].shape[0]
        for p in stages:
            if p.ndim != 2 or p.shape[0] != n or p.shape[1] < 1:
                raise ValueError("each stage needs an (N, m_i) processing-time matrix")
            if (p < 1).any():
                raise ValueError("processing times must be >= 1")
        object.__setattr__(self, "proc_times", stages)

    @property
    def n_nodes(self) -> int:
        return self.proc_times[0].shape[0]

    @property
    def n_stages(self) -> int:
        return len(self.proc_times)

    @property
    def machines_per_stage(self) -> tuple:
        return tuple(p.shape[1] for p in self.proc_times)

    @property
    def n_agents(self) -> int:
        return sum(self.machines_per_stage)

    @property
    def stage_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_stages), self.machines_per_stage)

    @property
    def local_index(self) -> np.ndarray:
        return np.concatenate([np.arange(m) for m in self.machines_per_stage])

    @property
    def cost(self) -> np.ndarray:
        """(M, N) processing time of every job on every machine of its stage."""
        return np.vstack([p.T for p in self.proc_times]).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "type": "ffsp",
            "stages": self.n_stages,
            "machines_per_stage": list(self.machines_per_stage),
            "proc_times": [p.tolist() for p in self.proc_times],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FfspInstance":
        if d.get("type") != "ffsp":
            raise ValueError(f"expected an ffsp instance, got type {d.get('type')!r}")
        inst = cls(tuple(np.array(p) for p in d["proc_times"]))
        if inst.n_stages != d.get("stages", inst.n_stages) or \
                list(inst.machines_per_stage) != list(d.get("machines_per_stage", inst.machines_per_stage)):
            raise ValueError("ffsp header disagrees with proc_times shape")
        return inst

    def permute_machines(self, perms) -> "FfspInstance":
        return FfspInstance(tuple(p[:, perm] for p, perm in zip(self.proc_times, perms)))


def generate(n: int, stages: int = 3, machines_per_stage=4, rng_seed=None,
             low: int = 2, high: int = 10) -> FfspInstance:
    if np.isscalar(machines_per_stage):
        machines_per_stage = [int(machines_per_stage)] * stages
    if n < 1 or stages < 1 or len(machines_per_stage) != stages or min(machines_per_stage) < 1:
        raise ValueError("need N, S, m_i >= 1")
    rng = np.random.default_rng(rng_seed)
    return FfspInstance(tuple(rng.integers(low, high + 1, size=(n, m)) for m in machines_per_stage))


@dataclass
class FfspState:
    cost: np.ndarray        # [R, M, N]
    stage_of: np.ndarray    # [M]
    clock: np.ndarray       # [R]
    idle_at: np.ndarray     # [R, M]
    waiting: np.ndarray     # [R, M]
    forced: np.ndarray      # [R]
    next_stage: np.ndarray  # [R, N]
    avail_at: np.ndarray    # [R, N]
    start: np.ndarray       # [R, S, N]
    end: np.ndarray         # [R, S, N]
    machine: np.ndarray     # [R, S, N] global machine index or -1
    step: int = 0


class FfspEnv:
    name = "ffsp"
    instance_type = FfspInstance
    routing = False

    def __init__(self, stages: int = 3):
        self.stages = stages

    agent_dyn_dim = 4
    env_dim = 2

    @property
    def agent_dim(self) -> int:
        return self.stages + 1

    @property
    def node_dim(self) -> int:
        return self.stages + 1

    @property
    def node_dyn_dim(self) -> int:
        return self.stages + 2

    def generate(self, n: int, m: int, rng_seed=None) -> FfspInstance:
        """``m`` machines in total, split evenly over the stages."""
        if m % self.stages:
            raise ValueError(f"{m} machines do not split evenly over {self.stages} stages")
        return generate(n, self.stages, m // self.stages, rng_seed)

    def reset(self, instances) -> FfspState:
        same_shape(instances, lambda i: (i.n_nodes, i.machines_per_stage))
        if instances[0].n_stages != self.stages:
            raise ValueError(f"environment configured for {self.stages} stages, "
                             f"instance has {instances[0].n_stages}")
        R, N, M, S = len(instances), instances[0].n_nodes, instances[0].n_agents, self.stages
        return FfspState(
            cost=np.stack([i.cost for i in instances]),
            stage_of=instances[0].stage_of,
            clock=np.zeros(R),
            idle_at=np.zeros((R, M)),
            waiting=np.zeros((R, M), dtype=bool),
            forced=np.zeros(R, dtype=bool),
            next_stage=np.zeros((R, N), dtype=np.int64),
            avail_at=np.zeros((R, N)),
            start=np.zeros((R, S, N)),
            end=np.zeros((R, S, N)),
            machine=np.full((R, S, N), -1, dtype=np.int64),
        )

    def n_agents(self, state) -> int:
        return state.idle_at.shape[1]

    def step_budget(self, state) -> int:
        return 10 * (state.next_stage.shape[1] + state.idle_at.shape[1])

    def _options(self, state: FfspState) -> np.ndarray:
        idle = (state.idle_at <= state.clock[:, None]) & ~state.waiting
        ready = (state.next_stage[:, None, :] == state.stage_of[None, :, None]) & \
                (state.avail_at[:, None, :] <= state.clock[:, None, None])
        return idle[..., None] & ready

    def action_mask(self, state: FfspState) -> np.ndarray:
        jobs = self._options(state)
        dummy = ~(state.forced[:, None] & jobs.any(axis=-1))
        return np.concatenate([jobs, dummy[..., None]], axis=-1)

    def fallback_actions(self, state: FfspState) -> np.ndarray:
        R, M = state.idle_at.shape
        return np.full((R, M), state.next_stage.shape[1], dtype=np.int64)

    def shareable(self, state: FfspState) -> np.ndarray:
        R, N = state.next_stage.shape
        share = np.zeros((R, N + 1), dtype=bool)
        share[:, N] = True
        return share

    @staticmethod
    def place(idle_at: float, avail_at: float, duration: float) -> tuple[float, float]:
        start = max(idle_at, avail_at)
        return start, start + duration

    def transition(self, state: FfspState, actions, fallback_flags, check: bool = True) -> FfspState:
        actions = np.asarray(actions, dtype=np.int64)
        flags = np.asarray(fallback_flags, dtype=bool)
        R, N = state.next_stage.shape
        options = self._options(state)
        if check:
            mask = np.concatenate([options, ~(state.forced[:, None] & options.any(-1))[..., None]], axis=-1)
            ok = np.take_along_axis(mask, actions[..., None], axis=-1)[..., 0] | flags
            if not ok.all():
                r, k = np.argwhere(~ok)[0]
                raise InfeasibleActionError(f"rollout {r}: machine {k} chose infeasible job {actions[r, k]}")
            real = ~flags & (actions < N)
            for r in np.flatnonzero(real.sum(axis=1) > 1):
                picks = actions[r][real[r]]
                if len(np.unique(picks)) != len(picks):
                    raise InfeasibleActionError(f"rollout {r}: unresolved conflict on jobs {picks}")

        idle_at, avail_at = state.idle_at.copy(), state.avail_at.copy()
        next_stage = state.next_stage.copy()
        start, end, machine = state.start.copy(), state.end.copy(), state.machine.copy()
        real = ~flags & (actions < N)
        rr, gg = np.nonzero(real)
        jj = actions[rr, gg]
        ss = state.stage_of[gg]
        st = np.maximum(idle_at[rr, gg], avail_at[rr, jj])
        en = st + state.cost[rr, gg, jj]
        idle_at[rr, gg] = en
        avail_at[rr, jj] = en
        next_stage[rr, jj] += 1
        start[rr, ss, jj] = st
        end[rr, ss, jj] = en
        machine[rr, ss, jj] = gg

        had_options = options.any(axis=-1)
        waiting = state.waiting | (had_options & ~flags & (actions == N))
        new = replace(state, idle_at=idle_at, avail_at=avail_at, next_stage=next_stage, start=start,
                      end=end, machine=machine, waiting=waiting, forced=np.zeros(R, dtype=bool),
                      clock=state.clock.copy(), step=state.step + 1)
        self._advance(new)
        return new

    def _advance(self, state: FfspState) -> None:
        """Move the clock until some machine can act (in place, on a fresh state)."""
        S = self.stages
        while True:
            terminal = (state.next_stage >= S).all(axis=1)
            need = ~terminal & ~self._options(state).any(axis=(1, 2))
            if not need.any():
                return
            for r in np.flatnonzero(need):
                c = state.clock[r]
                pending = state.next_stage[r] < S
                times = np.concatenate([state.idle_at[r], state.avail_at[r][pending]])
                future = times[times > c]
                state.waiting[r] = False
                if future.size:
                    state.clock[r] = future.min()
                else:
                    state.forced[r] = True

    def is_terminal(self, state: FfspState) -> np.ndarray:
        return (state.next_stage >= self.stages).all(axis=1)

    def objective(self, state: FfspState) -> np.ndarray:
        return state.end[:, -1, :].max(axis=1)

    def current_nodes(self, state: FfspState):
        return None

    def agent_costs(self, state: FfspState) -> np.ndarray:
        return state.idle_at

    def chosen_distances(self, state: FfspState, actions) -> np.ndarray:
        R, M, N = state.cost.shape
        padded = np.concatenate([state.cost, np.zeros((R, M, 1))], axis=-1)
        return np.take_along_axis(padded, np.asarray(actions)[..., None], axis=-1)[..., 0]

    def solution(self, state: FfspState, r: int) -> dict:
        S, N = state.start.shape[1:]
        local = np.concatenate([np.arange((state.stage_of == s).sum()) for s in range(S)])
        sched = []
        for s in range(S):
            for j in range(N):
                g = int(state.machine[r, s, j])
                if g < 0:
                    continue
                sched.append([s, j, int(local[g]), float(state.start[r, s, j]), float(state.end[r, s, j])])
        return {"schedule": sched}

    # ------------------------------------------------------------ policy features

    def static_features(self, instances):
        agents, nodes, costs = [], [], []
        for inst in instances:
            S, N = inst.n_stages, inst.n_nodes
            c = inst.cost
            onehot = np.eye(S)[inst.stage_of]
            agents.append(np.column_stack([onehot, c.mean(axis=1) / TIME_SCALE]))
            job = np.column_stack([p.mean(axis=1) for p in inst.proc_times]) / TIME_SCALE
            node = np.zeros((N + 1, S + 1))
            node[:N, :S] = job
            node[N, S] = 1.0
            nodes.append(node)
            costs.append(np.concatenate([c, np.zeros((len(c), 1))], axis=1) / TIME_SCALE)
        return np.stack(agents), np.stack(nodes), np.stack(costs)

    def dynamic_features(self, state: FfspState):
        R, M, N = state.cost.shape
        S = self.stages
        opts = self._options(state)
        stage_done = np.stack([(state.next_stage > s).all(axis=1) for s in range(S)], axis=1)
        agent = np.stack([np.maximum(state.idle_at - state.clock[:, None], 0.0) / TIME_SCALE,
                          state.waiting.astype(np.float64), opts.any(-1).astype(np.float64),
                          stage_done[:, state.stage_of].astype(np.float64)], axis=-1)
        env = np.column_stack([state.clock / TIME_SCALE, (state.next_stage / S).mean(axis=1)])
        node = np.zeros((R, N + 1, S + 2))
        pending = state.next_stage < S
        rr, jj = np.nonzero(pending)
        node[rr, jj, state.next_stage[rr, jj]] = 1.0
        node[:, :N, S] = np.maximum(state.avail_at - state.clock[:, None], 0.0) / TIME_SCALE
        node[:, :N, S + 1] = ~pending
        return agent, env, node

    # ------------------------------------------------------------ verification

    def schedule_of(self, instance: FfspInstance, trace) -> list:
        if trace.solution and "schedule" in trace.solution:
            return [list(e) for e in trace.solution["schedule"]]
        state = self.reset([instance])
        for t in range(trace.steps):
            state = self.transition(state, trace.actions[t][None], trace.fallback_flags[t][None])
        return self.solution(state, 0)["schedule"]

    def objective_of(self, instance: FfspInstance, trace) -> float:
        sched = self.schedule_of(instance, trace)
        last = [e for e in sched if e[0] == instance.n_stages - 1]
        if len(last) != instance.n_nodes:
            raise ValueError("trace is not terminal: unscheduled job-stages")
        return float(max(e[4] for e in last))

    def verify(self, instance: FfspInstance, trace) -> VerificationReport:
        rep = VerificationReport(self.name)
        S, N = instance.n_stages, instance.n_nodes
        try:
            sched = self.schedule_of(instance, trace)
        except (InfeasibleActionError, IndexError, ValueError) as exc:
            rep.record("replay", False, str(exc))
            return rep

        seen: dict[tuple[int, int], list] = {}
        valid = True
        for e in sched:
            s, j, k = int(e[0]), int(e[1]), int(e[2])
            if not (0 <= s < S and 0 <= j < N and 0 <= k < instance.machines_per_stage[s]):
                valid = False
                continue
            seen.setdefault((s, j), []).append(e)
        assigned = valid and all(len(seen.get((s, j), [])) == 1 for s in range(S) for j in range(N))
        rep.record("one-machine-per-job-per-stage", assigned,
                   "a job-stage is unscheduled, scheduled twice, or on a machine outside its stage")

        arith = all(e[3] >= 0 and e[4] - e[3] == instance.proc_times[int(e[0])][int(e[1]), int(e[2])]
                    for e in sched if (int(e[0]), int(e[1])) in seen)
        rep.record("completion-arithmetic", arith, "end - start differs from the processing time")

        prec = True
        for (s, j), entries in seen.items():
            if s > 0 and (s - 1, j) in seen:
                if entries[0][3] < seen[(s - 1, j)][0][4]:
                    prec = False
        rep.record("precedence", prec, "a stage starts before the previous stage of the job ends")

        overlap = True
        by_machine: dict[tuple[int, int], list] = {}
        for e in sched:
            by_machine.setdefault((int(e[0]), int(e[2])), []).append((e[3], e[4]))
        for ivs in by_machine.values():
            ivs.sort()
            for (s0, e0), (s1, e1) in zip(ivs[:-1], ivs[1:]):
                if s1 < e0:
                    overlap = False
        rep.record("machine-overlap", overlap, "two jobs overlap on one machine")

        last = [e[4] for e in sched if int(e[0]) == S - 1]
        obj = float(max(last)) if last else 0.0
        rep.objective = obj
        rep.record("objective-consistency", abs(obj - float(trace.objective)) <= 1e-9,
                   f"stored {trace.objective} vs recomputed {obj}")
        return rep
