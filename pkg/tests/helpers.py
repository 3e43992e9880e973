"""Independent reference implementations used by the tests."""
import numpy as np


def sequential_resolve(actions, priorities, fallbacks, shareable):
    """Plain-Python conflict resolution: visit agents from highest priority down."""
    M = len(actions)
    order = sorted(range(M), key=lambda k: (-priorities[k], k))
    taken = set()
    out = list(actions)
    flags = [False] * M
    for k in order:
        a = actions[k]
        if shareable[a]:
            continue
        if a in taken:
            out[k] = fallbacks[k]
            flags[k] = True
        else:
            taken.add(a)
    return out, flags


def random_triple(rng, max_m=16, max_n=32):
    M = int(rng.integers(1, max_m + 1))
    N = int(rng.integers(1, max_n + 1))
    actions = rng.integers(0, N, size=M)
    # coarse priorities make ties common
    if rng.random() < 0.5:
        priorities = rng.integers(0, 4, size=M).astype(float)
    else:
        priorities = rng.random(M)
    fallbacks = rng.integers(0, N, size=M)
    shareable = rng.random(N) < 0.2
    return actions, priorities, fallbacks, shareable
