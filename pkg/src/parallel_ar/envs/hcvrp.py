"""Min-max heterogeneous capacitated VRP.

Node 0 is the depot, nodes 1..N are customers. Each vehicle has a capacity
and a speed; the objective is the longest route duration (distance / speed),
every route closed at the depot.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .base import InfeasibleActionError, VerificationReport, agent_routes, euclid, same_shape

DEMAND_SCALE = 40.0


@dataclass(frozen=True, eq=False)
class HcvrpInstance:
    depot: np.ndarray       # (2,)
    coords: np.ndarray      # (N, 2)
    demands: np.ndarray     # (N,)
    capacities: np.ndarray  # (M,)
    speeds: np.ndarray      # (M,)

    kind = "hcvrp"

    def __post_init__(self):
        for name in ("depot", "coords", "demands", "capacities", "speeds"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError("coords must be (N, 2)")
        if len(self.demands) != len(self.coords):
            raise ValueError("one demand per customer")
        if len(self.capacities) != len(self.speeds):
            raise ValueError("one capacity and one speed per vehicle")
        if (self.demands <= 0).any() or (self.demands > self.capacities.min()).any():
            raise ValueError("every demand must be positive and fit the smallest vehicle")
        if (self.speeds <= 0).any():
            raise ValueError("speeds must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_agents(self) -> int:
        return len(self.capacities)

    @property
    def locations(self) -> np.ndarray:
        return np.vstack([self.depot[None], self.coords])

    @property
    def full_demands(self) -> np.ndarray:
        return np.concatenate([[0.0], self.demands])

    def to_dict(self) -> dict:
        return {
            "type": "hcvrp",
            "depot": self.depot.tolist(),
            "coords": self.coords.tolist(),
            "demands": self.demands.tolist(),
            "capacities": self.capacities.tolist(),
            "speeds": self.speeds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HcvrpInstance":
        if d.get("type") != "hcvrp":
            raise ValueError(f"expected an hcvrp instance, got type {d.get('type')!r}")
        return cls(np.array(d["depot"]), np.array(d["coords"]).reshape(-1, 2), np.array(d["demands"]),
                   np.array(d["capacities"]), np.array(d["speeds"]))

    def with_speeds(self, speeds) -> "HcvrpInstance":
        return HcvrpInstance(self.depot, self.coords, self.demands, self.capacities, speeds)

    def with_coords(self, depot, coords) -> "HcvrpInstance":
        return HcvrpInstance(depot, coords, self.demands, self.capacities, self.speeds)


def generate(n: int, m: int, rng_seed=None) -> HcvrpInstance:
    if n < 1 or m < 1:
        raise ValueError("need at least one customer and one vehicle")
    rng = np.random.default_rng(rng_seed)
    depot = rng.uniform(0.0, 1.0, size=2)
    coords = rng.uniform(0.0, 1.0, size=(n, 2))
    demands = rng.uniform(1.0, 10.0, size=n)
    capacities = rng.uniform(20.0, 41.0, size=m)
    speeds = rng.uniform(0.5, 1.0, size=m)
    return HcvrpInstance(depot, coords, demands, capacities, speeds)


@dataclass
class HcvrpState:
    locs: np.ndarray      # [R, N+1, 2]
    demand: np.ndarray    # [R, N+1]
    capacity: np.ndarray  # [R, M]
    speed: np.ndarray     # [R, M]
    current: np.ndarray   # [R, M] node index
    load: np.ndarray      # [R, M] remaining load
    elapsed: np.ndarray   # [R, M] route duration so far
    visited: np.ndarray   # [R, N+1]
    step: int = 0


class HcvrpEnv:
    name = "hcvrp"
    instance_type = HcvrpInstance
    routing = True

    # feature widths consumed by the policy
    agent_dim = 4
    node_dim = 4
    agent_dyn_dim = 5
    env_dim = 3
    node_dyn_dim = 1

    @staticmethod
    def generate(n: int, m: int, rng_seed=None) -> HcvrpInstance:
        return generate(n, m, rng_seed)

    def reset(self, instances) -> HcvrpState:
        same_shape(instances, lambda i: (i.n_nodes, i.n_agents))
        locs = np.stack([i.locations for i in instances])
        R, M = len(instances), instances[0].n_agents
        cap = np.stack([i.capacities for i in instances])
        return HcvrpState(
            locs=locs,
            demand=np.stack([i.full_demands for i in instances]),
            capacity=cap,
            speed=np.stack([i.speeds for i in instances]),
            current=np.zeros((R, M), dtype=np.int64),
            load=cap.copy(),
            elapsed=np.zeros((R, M)),
            visited=np.zeros(locs.shape[:2], dtype=bool),
        )

    def n_agents(self, state) -> int:
        return state.current.shape[1]

    def step_budget(self, state) -> int:
        return 10 * (state.locs.shape[1] - 1 + state.current.shape[1])

    def action_mask(self, state: HcvrpState) -> np.ndarray:
        cust = ~state.visited[:, None, 1:] & (state.demand[:, None, 1:] <= state.load[:, :, None])
        any_cust = cust.any(axis=-1)
        depot = (state.current != 0) | ~any_cust
        return np.concatenate([depot[..., None], cust], axis=-1)

    def fallback_actions(self, state: HcvrpState) -> np.ndarray:
        return state.current.copy()

    def shareable(self, state: HcvrpState) -> np.ndarray:
        share = np.zeros(state.visited.shape, dtype=bool)
        share[:, 0] = True
        return share

    def transition(self, state: HcvrpState, actions, fallback_flags, check: bool = True) -> HcvrpState:
        actions = np.asarray(actions, dtype=np.int64)
        flags = np.asarray(fallback_flags, dtype=bool)
        R, M = actions.shape
        if check:
            mask = self.action_mask(state)
            ok = np.take_along_axis(mask, actions[..., None], axis=-1)[..., 0] | flags
            if not ok.all():
                r, k = np.argwhere(~ok)[0]
                raise InfeasibleActionError(f"rollout {r}: agent {k} chose infeasible node {actions[r, k]}")
            moving_c = (~flags) & (actions > 0)
            for r in np.flatnonzero(moving_c.sum(axis=1) > 1):
                picks = actions[r][moving_c[r]]
                if len(np.unique(picks)) != len(picks):
                    raise InfeasibleActionError(f"rollout {r}: unresolved conflict on {picks}")
        move = ~flags & (actions != state.current)
        rows = np.arange(R)[:, None]
        src = state.locs[rows, state.current]
        dst = state.locs[rows, actions]
        dur = np.where(move, euclid(dst, src) / state.speed, 0.0)
        serve = move & (actions > 0)
        load = np.where(serve, state.load - state.demand[rows, actions], state.load)
        load = np.where(move & (actions == 0), state.capacity, load)
        visited = state.visited.copy()
        rr, kk = np.nonzero(serve)
        visited[rr, actions[rr, kk]] = True
        return replace(state, current=np.where(move, actions, state.current), load=load,
                       elapsed=state.elapsed + dur, visited=visited, step=state.step + 1)

    def is_terminal(self, state: HcvrpState) -> np.ndarray:
        return state.visited[:, 1:].all(axis=1) & (state.current == 0).all(axis=1)

    def objective(self, state: HcvrpState) -> np.ndarray:
        return state.elapsed.max(axis=1)

    def current_nodes(self, state: HcvrpState) -> np.ndarray:
        return state.current

    def agent_costs(self, state: HcvrpState) -> np.ndarray:
        return state.elapsed

    def distances(self, state: HcvrpState) -> np.ndarray:
        """[R, M, N+1] distance from every agent to every node."""
        rows = np.arange(state.locs.shape[0])[:, None]
        pos = state.locs[rows, state.current]
        return euclid(pos[:, :, None, :], state.locs[:, None, :, :])

    def chosen_distances(self, state: HcvrpState, actions) -> np.ndarray:
        return np.take_along_axis(self.distances(state), np.asarray(actions)[..., None], axis=-1)[..., 0]

    def solution(self, state: HcvrpState, r: int) -> dict:
        return {"durations": state.elapsed[r].tolist()}

    # ------------------------------------------------------------ policy features

    def static_features(self, instances):
        agents, nodes = [], []
        for inst in instances:
            M = inst.n_agents
            agents.append(np.column_stack([np.repeat(inst.depot[None], M, axis=0),
                                           inst.capacities / DEMAND_SCALE, inst.speeds]))
            flag = np.zeros(inst.n_nodes + 1)
            flag[0] = 1.0
            nodes.append(np.column_stack([inst.locations, inst.full_demands / DEMAND_SCALE, flag]))
        return np.stack(agents), np.stack(nodes), None

    def dynamic_features(self, state: HcvrpState):
        rows = np.arange(state.locs.shape[0])[:, None]
        pos = state.locs[rows, state.current]
        back = euclid(pos, state.locs[:, :1, :]) / state.speed
        agent = np.concatenate([pos, (state.load / DEMAND_SCALE)[..., None], state.elapsed[..., None],
                                (state.elapsed + back)[..., None]], axis=-1)
        env = np.column_stack([state.visited[:, 1:].mean(axis=1), state.elapsed.max(axis=1),
                               state.elapsed.mean(axis=1)])
        node = state.visited[..., None].astype(np.float64)
        return agent, env, node

    # ------------------------------------------------------------ verification

    def routes(self, instance: HcvrpInstance, trace) -> list[list[int]]:
        """Closed routes (starting and ending at node 0) per vehicle."""
        raw = agent_routes(trace.actions, trace.fallback_flags, instance.n_agents, start=0)
        return [[0] + r for r in raw]

    def route_durations(self, instance: HcvrpInstance, routes) -> np.ndarray:
        locs = instance.locations
        out = np.zeros(instance.n_agents)
        for k, route in enumerate(routes):
            total = 0.0
            for a, b in zip(route[:-1], route[1:]):
                total += euclid(locs[b], locs[a]) / instance.speeds[k]
            out[k] = total
        return out

    def objective_of(self, instance: HcvrpInstance, trace) -> float:
        routes = self.routes(instance, trace)
        visited = {n for r in routes for n in r if n != 0}
        if len(visited) != instance.n_nodes or any(r[-1] != 0 for r in routes):
            raise ValueError("trace is not terminal: customers unvisited or vehicles away from depot")
        return float(self.route_durations(instance, routes).max())

    def verify(self, instance: HcvrpInstance, trace) -> VerificationReport:
        rep = VerificationReport(self.name)
        N, M = instance.n_nodes, instance.n_agents
        acts = np.asarray(trace.actions)
        if acts.size and (acts.ndim != 2 or acts.shape[1] != M):
            rep.record("trace-shape", False, f"expected {M} agent columns, got shape {acts.shape}")
            return rep
        if acts.size and ((acts < 0) | (acts > N)).any():
            rep.record("node-index", False, "action outside 0..N")
            return rep
        routes = self.routes(instance, trace)

        counts = np.zeros(N + 1, dtype=int)
        for r in routes:
            for n in r:
                if n:
                    counts[n] += 1
        rep.record("visit-exactly-once", (counts[1:] == 1).all(),
                   f"visit counts {counts[1:].tolist()}")
        closed = [r[-1] == 0 for r in routes]
        rep.record("flow-conservation", all(closed),
                   f"vehicles {[k for k, c in enumerate(closed) if not c]} do not return to the depot")

        dem = instance.full_demands
        cap_ok, neg_ok = True, True
        for k, r in enumerate(routes):
            load = instance.capacities[k]
            for n in r[1:]:
                if n == 0:
                    load = instance.capacities[k]
                    continue
                if dem[n] > load:
                    cap_ok = False
                load -= dem[n]
                if load < 0:
                    neg_ok = False
        rep.record("capacity", cap_ok, "demand served between reloads exceeds vehicle capacity")
        rep.record("non-negativity", neg_ok and (dem >= 0).all(), "negative remaining load")

        durations = self.route_durations(instance, routes)
        obj = float(durations.max()) if M else 0.0
        rep.objective = obj
        rep.record("objective-consistency", abs(obj - float(trace.objective)) <= 1e-9,
                   f"stored {trace.objective} vs recomputed {obj}")
        return rep
