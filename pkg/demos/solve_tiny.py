"""Solve one small instance per environment with the baselines and an untrained network.

    python demos/solve_tiny.py
"""
import numpy as np

from parallel_ar.baselines import GreedyDistancePolicy, RandomPolicy, SjfPolicy, exhaustive_oracle
from parallel_ar.envs import get_env
from parallel_ar.mdp import run_rollouts
from parallel_ar.policy import Policy, PolicyConfig


def show(env, inst, label, policy, mode, handler, samples=1):
    batch = run_rollouts(env, policy, [inst], np.zeros(samples, dtype=np.int64), mode=mode, seed=0,
                         handler=handler)
    best = batch.traces[int(np.argmin(batch.objectives))]
    rep = env.verify(inst, best)
    print(f"  {label:<22} objective {best.objective:8.4f}  steps {best.steps:3d}  "
          f"conflicts {best.conflicts:2d}  feasible {rep.feasible}")


def main():
    cases = [("hcvrp", {}, 6, 2, GreedyDistancePolicy(), "closest"),
             ("omdcpdp", {}, 3, 2, GreedyDistancePolicy(), "closest"),
             ("ffsp", {"stages": 2}, 3, 4, SjfPolicy(), "learned")]
    for name, kw, n, m, heuristic, h_handler in cases:
        env = get_env(name, **kw)
        inst = env.generate(n, m, 1)
        print(f"{name}: N={n}, M={m}")
        show(env, inst, "random", RandomPolicy(), "sample", "random")
        show(env, inst, type(heuristic).__name__, heuristic, "greedy", h_handler)
        net = Policy(PolicyConfig.desk(name), env, seed=0)
        show(env, inst, "untrained greedy", net, "greedy", "learned")
        show(env, inst, "untrained best of 64", net, "sample", "learned", samples=64)
        print(f"  {'oracle':<22} objective {exhaustive_oracle(inst, env).objective:8.4f}")


if __name__ == "__main__":
    main()
