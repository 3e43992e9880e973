from .base import InfeasibleActionError, VerificationReport
from .ffsp import FfspEnv, FfspInstance
from .hcvrp import HcvrpEnv, HcvrpInstance
from .omdcpdp import OmdcpdpEnv, OmdcpdpInstance

ENVIRONMENTS = {"hcvrp": HcvrpEnv, "omdcpdp": OmdcpdpEnv, "ffsp": FfspEnv}
INSTANCE_TYPES = {"hcvrp": HcvrpInstance, "omdcpdp": OmdcpdpInstance, "ffsp": FfspInstance}


def get_env(name: str, **kwargs):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; valid names: {', '.join(sorted(ENVIRONMENTS))}") from None
    return cls(**kwargs)


def env_for(instance):
    """Environment matching an instance (FFSP picks up its stage count)."""
    if isinstance(instance, FfspInstance):
        return FfspEnv(stages=instance.n_stages)
    return get_env(instance.kind)


def instance_from_dict(d: dict):
    kind = d.get("type")
    if kind not in INSTANCE_TYPES:
        raise ValueError(f"unknown instance type {kind!r}; valid types: {', '.join(sorted(INSTANCE_TYPES))}")
    return INSTANCE_TYPES[kind].from_dict(d)


__all__ = ["ENVIRONMENTS", "INSTANCE_TYPES", "get_env", "env_for", "instance_from_dict",
           "InfeasibleActionError", "VerificationReport",
           "HcvrpEnv", "HcvrpInstance", "OmdcpdpEnv", "OmdcpdpInstance", "FfspEnv", "FfspInstance"]
