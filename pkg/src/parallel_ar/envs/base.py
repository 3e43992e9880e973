"""Shared pieces of the parallel multi-agent environments.

Every environment is vectorised over a batch of rollouts ``R``: states carry a
leading batch axis and all rollouts in one batch share the same instance
shape (number of agents and nodes). A single rollout is a batch of one.

Environments expose::

    reset(instances) -> state
    action_mask(state) -> bool[R, M, A]
    fallback_actions(state) -> int[R, M]
    shareable(state) -> bool[R, A]
    transition(state, actions, fallback_flags) -> state
    is_terminal(state) -> bool[R]
    objective(state) -> float[R]
    solution(state, r) -> dict          # payload stored on the trace
    verify(instance, trace) -> VerificationReport
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleActionError(ValueError):
    pass


@dataclass
class VerificationReport:
    env: str
    checks: dict[str, bool] = field(default_factory=dict)
    messages: dict[str, str] = field(default_factory=dict)
    objective: float | None = None

    @property
    def feasible(self) -> bool:
        return all(self.checks.values())

    @property
    def violations(self) -> list[str]:
        return [name for name, ok in self.checks.items() if not ok]

    @property
    def first_violation(self) -> str | None:
        v = self.violations
        return v[0] if v else None

    def record(self, name: str, ok: bool, message: str = "") -> bool:
        # keep the first failure message per constraint
        prev = self.checks.get(name, True)
        self.checks[name] = prev and bool(ok)
        if not ok and name not in self.messages:
            self.messages[name] = message
        return ok

    def lines(self) -> list[str]:
        out = []
        for name, ok in self.checks.items():
            msg = f" ({self.messages[name]})" if name in self.messages else ""
            out.append(f"{'PASS' if ok else 'FAIL'} {name}{msg}")
        return out


def euclid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance over the last axis; used everywhere so sums agree bitwise."""
    diff = a - b
    return np.sqrt((diff * diff).sum(axis=-1))


def same_shape(instances, attr_fn) -> None:
    shapes = {attr_fn(inst) for inst in instances}
    if len(shapes) != 1:
        raise ValueError(f"instances in one batch must share a shape, got {sorted(shapes)}")


def agent_routes(actions: np.ndarray, fallback_flags: np.ndarray, n_agents: int,
                 start: int | None, skip: int | None = None) -> list[list[int]]:
    """Per-agent node sequences from resolved actions, dropping stays.

    ``start`` is the node each agent begins on (None when agents start off-graph);
    an action equal to the agent's current node, a fallback, or ``skip`` is a stay.
    """
    M = n_agents
    T = len(actions)
    routes: list[list[int]] = [[] for _ in range(M)]
    current = [start] * M
    for t in range(T):
        for k in range(M):
            a = int(actions[t, k])
            if fallback_flags[t, k] or a == current[k] or (skip is not None and a == skip):
                continue
            routes[k].append(a)
            current[k] = a
    return routes
