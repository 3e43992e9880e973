"""Open multi-depot capacitated pickup and delivery.

Action indices: pickups ``0..N-1``, their deliveries ``N..2N-1`` (pickup i pairs
with delivery i+N), and ``2N`` which is the shareable stay action. Vehicles
start at their own depot, never return, and may carry at most ``Q_k`` orders.
The objective is the sum of arrival times at the delivery nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .base import InfeasibleActionError, VerificationReport, agent_routes, euclid, same_shape

DEFAULT_CAPACITY = 3


@dataclass(frozen=True, eq=False)
class OmdcpdpInstance:
    starts: np.ndarray      # (M, 2)
    pickups: np.ndarray     # (N, 2)
    deliveries: np.ndarray  # (N, 2)
    capacities: np.ndarray  # (M,) stacking limits

    kind = "omdcpdp"

    def __post_init__(self):
        object.__setattr__(self, "starts", np.asarray(self.starts, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "pickups", np.asarray(self.pickups, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "deliveries", np.asarray(self.deliveries, dtype=np.float64).reshape(-1, 2))
        caps = np.asarray(self.capacities, dtype=np.int64)
        if caps.ndim == 0:
            caps = np.full(len(self.starts), int(caps))
        object.__setattr__(self, "capacities", caps)
        if self.pickups.shape != self.deliveries.shape:
            raise ValueError("pickups and deliveries must pair 1:1")
        if len(caps) != len(self.starts) or (caps < 1).any():
            raise ValueError("one stacking limit >= 1 per vehicle")

    @property
    def n_nodes(self) -> int:
        return len(self.pickups)

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    @property
    def stay(self) -> int:
        return 2 * self.n_nodes

    @property
    def node_locations(self) -> np.ndarray:
        return np.vstack([self.pickups, self.deliveries, np.zeros((1, 2))])

    def to_dict(self) -> dict:
        caps = self.capacities
        capacity = int(caps[0]) if (caps == caps[0]).all() else caps.tolist()
        return {
            "type": "omdcpdp",
            "starts": self.starts.tolist(),
            "pickups": self.pickups.tolist(),
            "deliveries": self.deliveries.tolist(),
            "capacity": capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OmdcpdpInstance":
        if d.get("type") != "omdcpdp":
            raise ValueError(f"expected an omdcpdp instance, got type {d.get('type')!r}")
        starts = np.array(d["starts"]).reshape(-1, 2)
        return cls(starts, np.array(d["pickups"]), np.array(d["deliveries"]),
                   np.asarray(d.get("capacity", DEFAULT_CAPACITY)))

    def with_coords(self, starts, pickups, deliveries) -> "OmdcpdpInstance":
        return OmdcpdpInstance(starts, pickups, deliveries, self.capacities)


def generate(n: int, m: int, rng_seed=None, capacity: int = DEFAULT_CAPACITY) -> OmdcpdpInstance:
    if n < 1 or m < 1:
        raise ValueError("need at least one pair and one vehicle")
    rng = np.random.default_rng(rng_seed)
    starts = rng.uniform(0.0, 1.0, size=(m, 2))
    pickups = rng.uniform(0.0, 1.0, size=(n, 2))
    deliveries = rng.uniform(0.0, 1.0, size=(n, 2))
    return OmdcpdpInstance(starts, pickups, deliveries, np.full(m, capacity))


@dataclass
class OmdcpdpState:
    node_locs: np.ndarray   # [R, 2N+1, 2]
    pos: np.ndarray         # [R, M, 2]
    at_node: np.ndarray     # [R, M] last visited node, -1 at the start depot
    clock: np.ndarray       # [R, M]
    carried: np.ndarray     # [R, M]
    capacity: np.ndarray    # [R, M]
    owner: np.ndarray       # [R, N] picking agent or -1
    picked: np.ndarray      # [R, N]
    delivered: np.ndarray   # [R, N]
    visit_time: np.ndarray  # [R, 2N]
    step: int = 0


class OmdcpdpEnv:
    name = "omdcpdp"
    instance_type = OmdcpdpInstance
    routing = True

    agent_dim = 3
    node_dim = 6
    agent_dyn_dim = 4
    env_dim = 3
    node_dyn_dim = 2

    @staticmethod
    def generate(n: int, m: int, rng_seed=None) -> OmdcpdpInstance:
        return generate(n, m, rng_seed)

    def reset(self, instances) -> OmdcpdpState:
        same_shape(instances, lambda i: (i.n_nodes, i.n_agents))
        R, N, M = len(instances), instances[0].n_nodes, instances[0].n_agents
        return OmdcpdpState(
            node_locs=np.stack([i.node_locations for i in instances]),
            pos=np.stack([i.starts for i in instances]),
            at_node=np.full((R, M), -1, dtype=np.int64),
            clock=np.zeros((R, M)),
            carried=np.zeros((R, M), dtype=np.int64),
            capacity=np.stack([i.capacities for i in instances]),
            owner=np.full((R, N), -1, dtype=np.int64),
            picked=np.zeros((R, N), dtype=bool),
            delivered=np.zeros((R, N), dtype=bool),
            visit_time=np.zeros((R, 2 * N)),
        )

    def n_agents(self, state) -> int:
        return state.pos.shape[1]

    def step_budget(self, state) -> int:
        return 10 * (state.node_locs.shape[1] - 1 + state.pos.shape[1])

    def action_mask(self, state: OmdcpdpState) -> np.ndarray:
        M = state.pos.shape[1]
        pick = ~state.picked[:, None, :] & (state.carried < state.capacity)[..., None]
        agents = np.arange(M)[None, :, None]
        deliver = (state.owner[:, None, :] == agents) & ~state.delivered[:, None, :]
        stay = ~(pick.any(axis=-1) | deliver.any(axis=-1))
        return np.concatenate([pick, deliver, stay[..., None]], axis=-1)

    def fallback_actions(self, state: OmdcpdpState) -> np.ndarray:
        R, M = state.clock.shape
        return np.full((R, M), state.node_locs.shape[1] - 1, dtype=np.int64)

    def shareable(self, state: OmdcpdpState) -> np.ndarray:
        share = np.zeros(state.node_locs.shape[:2], dtype=bool)
        share[:, -1] = True
        return share

    def transition(self, state: OmdcpdpState, actions, fallback_flags, check: bool = True) -> OmdcpdpState:
        actions = np.asarray(actions, dtype=np.int64)
        flags = np.asarray(fallback_flags, dtype=bool)
        R, M = actions.shape
        N = state.picked.shape[1]
        stay = 2 * N
        if check:
            mask = self.action_mask(state)
            ok = np.take_along_axis(mask, actions[..., None], axis=-1)[..., 0] | flags
            if not ok.all():
                r, k = np.argwhere(~ok)[0]
                raise InfeasibleActionError(f"rollout {r}: agent {k} chose infeasible node {actions[r, k]}")
            real = ~flags & (actions != stay)
            for r in np.flatnonzero(real.sum(axis=1) > 1):
                picks = actions[r][real[r]]
                if len(np.unique(picks)) != len(picks):
                    raise InfeasibleActionError(f"rollout {r}: unresolved conflict on {picks}")
        move = ~flags & (actions != stay)
        rows = np.arange(R)[:, None]
        dst = state.node_locs[rows, actions]
        clock = state.clock + np.where(move, euclid(dst, state.pos), 0.0)
        pos = np.where(move[..., None], dst, state.pos)

        owner, picked, delivered = state.owner.copy(), state.picked.copy(), state.delivered.copy()
        visit_time = state.visit_time.copy()
        carried = state.carried.copy()
        rr, kk = np.nonzero(move)
        nodes = actions[rr, kk]
        visit_time[rr, nodes] = clock[rr, kk]
        is_pick = nodes < N
        picked[rr[is_pick], nodes[is_pick]] = True
        owner[rr[is_pick], nodes[is_pick]] = kk[is_pick]
        delivered[rr[~is_pick], nodes[~is_pick] - N] = True
        np.add.at(carried, (rr, kk), np.where(is_pick, 1, -1))
        return replace(state, pos=pos, at_node=np.where(move, actions, state.at_node), clock=clock, carried=carried, owner=owner, picked=picked,
                       delivered=delivered, visit_time=visit_time, step=state.step + 1)

    def is_terminal(self, state: OmdcpdpState) -> np.ndarray:
        return state.delivered.all(axis=1)

    def objective(self, state: OmdcpdpState) -> np.ndarray:
        N = state.picked.shape[1]
        return state.visit_time[:, N:].sum(axis=1)

    def current_nodes(self, state: OmdcpdpState) -> np.ndarray:
        return state.at_node

    def agent_costs(self, state: OmdcpdpState) -> np.ndarray:
        return state.clock

    def distances(self, state: OmdcpdpState) -> np.ndarray:
        d = euclid(state.pos[:, :, None, :], state.node_locs[:, None, :, :])
        d[..., -1] = 0.0
        return d

    def chosen_distances(self, state, actions) -> np.ndarray:
        return np.take_along_axis(self.distances(state), np.asarray(actions)[..., None], axis=-1)[..., 0]

    def solution(self, state: OmdcpdpState, r: int) -> dict:
        return {"visit_times": state.visit_time[r].tolist()}

    # ------------------------------------------------------------ policy features

    def static_features(self, instances):
        agents, nodes = [], []
        for inst in instances:
            N = inst.n_nodes
            agents.append(np.column_stack([inst.starts, inst.capacities / DEFAULT_CAPACITY]))
            own = inst.node_locations
            pair = np.vstack([inst.deliveries, inst.pickups, np.zeros((1, 2))])
            kind = np.zeros((2 * N + 1, 2))
            kind[:N, 0] = 1.0
            kind[-1, 1] = 1.0
            nodes.append(np.column_stack([own, pair, kind]))
        return np.stack(agents), np.stack(nodes), None

    def dynamic_features(self, state: OmdcpdpState):
        agent = np.concatenate([state.pos, state.clock[..., None],
                                (state.carried / state.capacity)[..., None]], axis=-1)
        env = np.column_stack([state.picked.mean(axis=1), state.delivered.mean(axis=1),
                               state.clock.mean(axis=1)])
        R, N = state.picked.shape
        node = np.zeros((R, 2 * N + 1, 2))
        node[:, :N, 0] = state.picked
        node[:, N:2 * N, 0] = state.delivered
        node[:, N:2 * N, 1] = state.picked & ~state.delivered
        return agent, env, node

    # ------------------------------------------------------------ verification

    def routes(self, instance: OmdcpdpInstance, trace) -> list[list[int]]:
        return agent_routes(trace.actions, trace.fallback_flags, instance.n_agents, start=None,
                            skip=instance.stay)

    def route_times(self, instance: OmdcpdpInstance, routes) -> np.ndarray:
        """Visit time of every node (NaN if unvisited) recomputed from geometry."""
        locs = instance.node_locations
        times = np.full(2 * instance.n_nodes, np.nan)
        for k, route in enumerate(routes):
            pos, clock = instance.starts[k], 0.0
            for n in route:
                clock = clock + euclid(locs[n], pos)
                pos = locs[n]
                times[n] = clock
        return times

    def objective_of(self, instance: OmdcpdpInstance, trace) -> float:
        times = self.route_times(instance, self.routes(instance, trace))
        N = instance.n_nodes
        if np.isnan(times[N:]).any():
            raise ValueError("trace is not terminal: undelivered orders")
        return float(times[N:].sum())

    def verify(self, instance: OmdcpdpInstance, trace) -> VerificationReport:
        rep = VerificationReport(self.name)
        N, M = instance.n_nodes, instance.n_agents
        acts = np.asarray(trace.actions)
        if acts.size and (acts.ndim != 2 or acts.shape[1] != M):
            rep.record("trace-shape", False, f"expected {M} agent columns, got shape {acts.shape}")
            return rep
        if acts.size and ((acts < 0) | (acts > 2 * N)).any():
            rep.record("node-index", False, "action outside 0..2N")
            return rep
        routes = self.routes(instance, trace)

        counts = np.zeros(2 * N, dtype=int)
        for r in routes:
            for n in r:
                counts[n] += 1
        rep.record("visit-exactly-once", (counts == 1).all(), f"visit counts {counts.tolist()}")

        times = self.route_times(instance, routes)
        recorded = trace.solution.get("visit_times") if trace.solution else None
        if recorded is not None:
            recorded = np.asarray(recorded, dtype=np.float64)
            starts_ok = all(not r or abs(recorded[r[0]] - euclid(instance.node_locations[r[0]], instance.starts[k])) <= 1e-9
                            for k, r in enumerate(routes))
            rep.record("start-at-own-depot", starts_ok, "first leg not measured from the vehicle's depot")
            seen = ~np.isnan(times)
            ok = recorded.shape == times.shape and np.allclose(recorded[seen], times[seen], atol=1e-9, rtol=0)
            rep.record("time-consistency", ok, "recorded visit times disagree with route geometry")
        else:
            rep.record("start-at-own-depot", True)
            rep.record("time-consistency", True)

        prec_ok = True
        for j in range(N):
            owners = [k for k, r in enumerate(routes) if j in r]
            downers = [k for k, r in enumerate(routes) if j + N in r]
            if not owners or not downers:
                continue
            k = owners[0]
            if downers[0] != k or routes[k].index(j) > routes[k].index(j + N):
                prec_ok = False
        rep.record("precedence", prec_ok, "a delivery precedes its pickup or is made by another vehicle")

        stack_ok = True
        for k, r in enumerate(routes):
            load = 0
            for n in r:
                load += 1 if n < N else -1
                if load > instance.capacities[k] or load < 0:
                    stack_ok = False
        rep.record("stacking-limit", stack_ok, "carried orders outside [0, Q_k]")

        obj = float(np.nan_to_num(times[N:], nan=0.0).sum())
        rep.objective = obj
        rep.record("objective-consistency", abs(obj - float(trace.objective)) <= 1e-9,
                   f"stored {trace.objective} vs recomputed {obj}")
        return rep
