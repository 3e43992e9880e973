"""Parallel autoregressive construction for multi-agent routing and scheduling."""
import os as _os

# thread count for the BLAS backend; must be set before numpy loads
if "PARALLEL_AR_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["PARALLEL_AR_THREADS"])

from .envs import ENVIRONMENTS, env_for, get_env, instance_from_dict  # noqa: E402
from .mdp import SolutionTrace, resolve_conflicts, rollout, rollout_batch, run_rollouts  # noqa: E402
from .policy import Policy, PolicyConfig  # noqa: E402

__version__ = "0.1.0"

__all__ = ["ENVIRONMENTS", "env_for", "get_env", "instance_from_dict", "SolutionTrace", "resolve_conflicts",
           "rollout", "rollout_batch", "run_rollouts", "Policy", "PolicyConfig"]
