import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parallel_ar.baselines import RandomPolicy, exhaustive_oracle
from parallel_ar.envs import OmdcpdpEnv, OmdcpdpInstance
from parallel_ar.envs.base import InfeasibleActionError
from parallel_ar.mdp import SolutionTrace, play, rollout

env = OmdcpdpEnv()


def test_generate_defaults():
    a = env.generate(50, 5, 1)
    assert a.to_dict() == env.generate(50, 5, 1).to_dict()
    assert (a.capacities == 3).all()
    assert a.n_nodes == 50 and a.n_agents == 5
    assert OmdcpdpInstance.from_dict(a.to_dict()).to_dict() == a.to_dict()
    with pytest.raises(ValueError):
        OmdcpdpInstance([[0, 0]], [[0, 1]], [[0, 2], [0, 3]], 1)


def test_mask_precedence_stacking_and_ownership():
    inst = env.generate(3, 2, 0)
    s = env.reset([inst])
    m = env.action_mask(s)[0]
    assert m[:, :3].all() and not m[:, 3:6].any() and not m[:, 6].any()
    s = env.transition(s, [[0, 1]], [[False, False]])
    m = env.action_mask(s)[0]
    assert m[0, 3] and not m[1, 3]
    assert m[1, 4] and not m[0, 4]
    full = OmdcpdpInstance(inst.starts, inst.pickups, inst.deliveries, 1)
    s = env.transition(env.reset([full]), [[0, 6]], [[False, True]])
    m = env.action_mask(s)[0]
    assert not m[0, :3].any() and m[0, 3]


def test_single_pair_forced_route():
    inst = OmdcpdpInstance([[0.0, 0.0]], [[0.0, 1.0]], [[0.0, 2.0]], 3)
    s0 = env.reset([inst])
    s1 = env.transition(s0, [[0]], [[False]])
    assert s1.clock[0, 0] == 1.0
    s2 = env.transition(s1, [[1]], [[False]])
    assert s2.clock[0, 0] == 2.0 and s2.visit_time[0, 1] == 2.0
    assert env.objective(s2)[0] == 2.0
    tr = play(env, inst, [[0], [1]])
    assert tr.objective == 2.0 and env.verify(inst, tr).feasible


def test_stay_fallback_changes_nothing_but_the_step():
    inst = env.generate(2, 2, 4)
    s0 = env.reset([inst])
    s1 = env.transition(s0, [[0, 4]], [[False, True]])
    assert np.array_equal(s1.pos[0, 1], s0.pos[0, 1]) and s1.clock[0, 1] == 0.0
    assert s1.step == s0.step + 1


def test_objective_is_sum_of_delivery_times():
    # one vehicle on a line: pickups at 1 and 2, deliveries at 3 and 5
    inst = OmdcpdpInstance([[0.0, 0.0]], [[1.0, 0.0], [2.0, 0.0]], [[3.0, 0.0], [5.0, 0.0]], 2)
    tr = play(env, inst, [[0], [1], [2], [3]])
    assert tr.objective == 3.0 + 5.0


def test_two_pairs_unit_capacity_oracle():
    inst = env.generate(2, 1, 9)
    inst = OmdcpdpInstance(inst.starts, inst.pickups, inst.deliveries, 1)
    costs = []
    for a, b in ((0, 1), (1, 0)):
        tr = play(env, inst, [[a], [a + 2], [b], [b + 2]])
        costs.append(tr.objective)
    assert exhaustive_oracle(inst, env).objective == pytest.approx(min(costs), abs=1e-12)


def test_oracle_brute_force_small():
    inst = env.generate(3, 2, 5)
    N, M = 3, 2
    best = np.inf
    # every assignment of pairs to vehicles and every precedence-feasible order per vehicle
    for owner in itertools.product(range(M), repeat=N):
        total = 0.0
        for k in range(M):
            mine = [j for j in range(N) if owner[j] == k]
            stops = mine + [j + N for j in mine]
            best_k = 0.0 if not stops else np.inf
            for order in itertools.permutations(stops):
                if any(order.index(j) > order.index(j + N) for j in mine):
                    continue
                load = 0
                ok = True
                for n in order:
                    load += 1 if n < N else -1
                    ok &= load <= inst.capacities[k]
                if not ok:
                    continue
                pos, t, s = inst.starts[k], 0.0, 0.0
                for n in order:
                    t += np.linalg.norm(inst.node_locations[n] - pos)
                    pos = inst.node_locations[n]
                    if n >= N:
                        s += t
                best_k = min(best_k, s)
            total += best_k
        best = min(best, total)
    res = exhaustive_oracle(inst, env)
    assert res.objective == pytest.approx(best, abs=1e-9)
    assert env.verify(inst, res.trace).feasible


def test_verify_flags_forged_traces():
    inst = env.generate(2, 1, 3)
    stay = inst.stay
    early = SolutionTrace.from_dict({"env": "omdcpdp", "objective": 0.0, "actions": [[2], [0], [1], [3]]})
    assert "precedence" in env.verify(inst, early).violations
    tight = OmdcpdpInstance(inst.starts, inst.pickups, inst.deliveries, 1)
    stacked = play(env, inst, [[0], [1], [2], [3]])
    assert env.verify(inst, stacked).feasible
    assert "stacking-limit" in env.verify(tight, stacked).violations
    assert "visit-exactly-once" in env.verify(inst, SolutionTrace.from_dict(
        {"env": "omdcpdp", "objective": 0.0, "actions": [[0], [2], [stay]]})).violations


def test_transition_rejects_foreign_delivery():
    inst = env.generate(2, 2, 0)
    s = env.transition(env.reset([inst]), [[0, 1]], [[False, False]])
    with pytest.raises(InfeasibleActionError):
        env.transition(s, [[3, 2]], [[False, False]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3))
def test_random_rollouts_are_feasible(seed, n, m, q):
    inst = env.generate(n, m, seed)
    inst = OmdcpdpInstance(inst.starts, inst.pickups, inst.deliveries, q)
    tr = rollout(inst, env, RandomPolicy(), mode="sample", rng_seed=seed)
    rep = env.verify(inst, tr)
    assert rep.feasible, rep.lines()
    times = np.asarray(tr.solution["visit_times"])
    assert (times[n:] >= times[:n]).all()
    assert env.objective_of(inst, tr) == pytest.approx(tr.objective, abs=1e-9)
