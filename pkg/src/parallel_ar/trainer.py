"""REINFORCE with a shared per-instance baseline and symmetric augmentation."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import FfspInstance, HcvrpInstance, OmdcpdpInstance, get_env
from .mdp import PRIORITY_KINDS, run_rollouts
from .policy import Policy, PolicyConfig
from .tensor import Adam, Tape, clip_grad_norm, mul, tsum

METRIC_FIELDS = ["epoch", "mean_reward", "mean_steps", "conflict_rate", "eval_objective", "lr"]
TIMING_FIELDS = ["epoch", "wall_time"]


# --------------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    env: str = "hcvrp"
    n_range: tuple = (10, 20)
    m_range: tuple = (2, 3)          # total machines for the flow shop
    stages: int = 3
    batch_size: int = 64
    samples: int = 8
    epochs: int = 50
    instances_per_epoch: int = 2000
    lr: float = 1e-4
    schedule: str = "step"           # step | cosine
    milestones: tuple | None = None  # defaults to 80% and 95% of the epochs
    gamma: float = 0.1
    clip: float = 1.0
    augment: bool = True
    handler: str = "learned"
    seed: int = 0
    eval_size: int = 64
    eval_n: int = 20
    eval_m: int = 3
    eval_seed: int = 100_000
    policy: dict = field(default_factory=lambda: PolicyConfig.desk().to_dict())

    def __post_init__(self):
        self.n_range = tuple(self.n_range)
        self.m_range = tuple(self.m_range)
        if self.milestones is not None:
            self.milestones = tuple(self.milestones)
        if self.batch_size < 1 or self.samples < 1:
            raise ValueError("batch_size and samples must be >= 1")
        for name, (lo, hi) in (("n_range", self.n_range), ("m_range", self.m_range)):
            if lo > hi or lo < 1:
                raise ValueError(f"{name} {lo, hi} is empty")
        if self.schedule not in ("step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.handler not in PRIORITY_KINDS:
            raise ValueError(f"unknown handler {self.handler!r}; expected one of {PRIORITY_KINDS}")
        get_env(self.env)  # validates the name
        PolicyConfig.from_dict(self.policy)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.instances_per_epoch / self.batch_size))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, self.epochs)))
        marks = self.milestones
        if marks is None:
            marks = (int(round(0.8 * self.epochs)), int(round(0.95 * self.epochs)))
        return self.lr * self.gamma ** sum(epoch >= m for m in marks)

    def make_env(self):
        return get_env(self.env, **({"stages": self.stages} if self.env == "ffsp" else {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("n_range", "m_range", "milestones"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- advantages

def shared_baseline(rewards: np.ndarray) -> np.ndarray:
    """Per-instance mean reward over the S samples of rewards [B, S]."""
    return np.asarray(rewards, dtype=np.float64).mean(axis=1)


def advantages(rewards: np.ndarray) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    return rewards - shared_baseline(rewards)[:, None]


# --------------------------------------------------------------------------- augmentation

def _dihedral(p: np.ndarray, k: int) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    images = [(x, y), (y, x), (1 - x, y), (1 - y, x), (x, 1 - y), (y, 1 - x), (1 - x, 1 - y), (1 - y, 1 - x)]
    a, b = images[k % 8]
    return np.stack([a, b], axis=-1)


def _rotate(p: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    q = p - 0.5
    return np.stack([c * q[..., 0] - s * q[..., 1], s * q[..., 0] + c * q[..., 1]], axis=-1) + 0.5


def augment(instance, k: int):
    """The k-th symmetric image of an instance; k = 0 is the identity.

    Routing: the 8 symmetries of the unit square, then for k >= 8 the same
    symmetries composed with a small rotation about the centre (seeded by k).
    Flow shop: a permutation of the machines inside every stage (seeded by k).
    """
    if k == 0:
        return instance
    if isinstance(instance, FfspInstance):
        rng = np.random.default_rng(k)
        return instance.permute_machines([rng.permutation(m) for m in instance.machines_per_stage])
    f = lambda p: _dihedral(p, k)
    if k >= 8:
        angle = np.random.default_rng(k).uniform(-math.pi / 8, math.pi / 8)
        f = lambda p: _rotate(_dihedral(p, k), angle)
    if isinstance(instance, HcvrpInstance):
        return instance.with_coords(f(instance.depot), f(instance.coords))
    if isinstance(instance, OmdcpdpInstance):
        return instance.with_coords(f(instance.starts), f(instance.pickups), f(instance.deliveries))
    raise ValueError(f"cannot augment {type(instance).__name__}")


# --------------------------------------------------------------------------- one update

@dataclass
class StepResult:
    loss: float
    mean_reward: float
    mean_steps: float
    conflict_rate: float
    grad_norm: float


def reinforce_loss(log_prob, rewards: np.ndarray):
    """-(1/BS) sum_ij G_ij log p_ij as a tape scalar; ``log_prob`` is [B*S]."""
    G = advantages(rewards).reshape(-1)
    return tsum(mul(log_prob, -G / G.size))


def train_step(policy: Policy, optimizer: Adam, env, instances, config: TrainConfig,
               rng: np.random.Generator) -> StepResult:
    B, S = len(instances), config.samples
    if config.augment:
        pool = [augment(inst, k) for inst in instances for k in range(S)]
        index = np.arange(B * S)
    else:
        pool = list(instances)
        index = np.repeat(np.arange(B), S)
    with Tape() as tape:
        batch = run_rollouts(env, policy, pool, index, mode="sample", handler=config.handler, rng=rng)
        rewards = -batch.objectives.reshape(B, S)
        if batch.log_prob is None:
            return StepResult(0.0, float(rewards.mean()), float(batch.steps.mean()), 0.0, 0.0)
        loss = reinforce_loss(batch.log_prob, rewards)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {loss.data}; rewards range "
                                 f"[{rewards.min()}, {rewards.max()}], log-probs range "
                                 f"[{batch.log_prob.data.min()}, {batch.log_prob.data.max()}]")
    tape.backward(loss)
    grads = {k: tape.gradient(p) for k, p in policy.params.items()}
    norm = clip_grad_norm(grads, config.clip)
    optimizer.step(grads)
    conflicts = sum(t.conflicts for t in batch.traces)
    decisions = sum(t.decisions for t in batch.traces)
    return StepResult(float(loss.data), float(rewards.mean()), float(batch.steps.mean()),
                      conflicts / decisions if decisions else 0.0, norm)


# --------------------------------------------------------------------------- evaluation

def eval_instances(config: TrainConfig) -> list:
    env = config.make_env()
    return [env.generate(config.eval_n, config.eval_m, config.eval_seed + i) for i in range(config.eval_size)]


def greedy_objective(policy, env, instances, handler: str = "learned") -> float:
    batch = run_rollouts(env, policy, instances, mode="greedy", seed=0, handler=handler)
    return float(batch.objectives.mean())


# --------------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    policy: Policy
    metrics: list[dict]
    checkpoint: Path | None
    initial_eval: float


def _write_csv(path: Path, fields: list[str], row: dict, fresh: bool) -> None:
    new = fresh or not path.exists()
    with open(path, "w" if fresh else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in fields})


def _fmt(x: float) -> str:
    return repr(float(x))


def train(config: TrainConfig, out_dir=None, resume=None, log=None) -> TrainResult:
    """Epoch loop with fresh instances every step and a held-out greedy evaluation.

    ``out_dir`` receives ``metrics.csv`` (deterministic given the config),
    ``timing.csv`` (wall clock) and ``checkpoint.npz`` after every epoch.
    ``resume`` points at a checkpoint written by a previous run of the same
    config; training continues with the next epoch number.
    """
    env = config.make_env()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
    rng = np.random.default_rng(config.seed)
    policy = Policy(PolicyConfig.from_dict(config.policy), env, seed=config.seed)
    optimizer = Adam(policy.params, lr=config.lr)
    evalset = eval_instances(config) if config.eval_size else []
    start_epoch, metrics = 0, []

    if resume is not None:
        policy, extra, meta = Policy.load(resume, env)
        optimizer = Adam(policy.params, lr=config.lr)
        optimizer.load_state_dict(extra)
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = int(meta["epoch"]) + 1
        metrics = meta.get("metrics", [])
        initial = float(meta["initial_eval"])
    else:
        initial = greedy_objective(policy, env, evalset, config.handler) if evalset else float("nan")

    ckpt = None
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        optimizer.lr = config.lr_at(epoch)
        results = []
        for _ in range(config.steps_per_epoch):
            n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
            m = int(rng.integers(config.m_range[0], config.m_range[1] + 1))
            if config.env == "ffsp":
                m = max(config.stages, m - m % config.stages)
            seeds = rng.integers(0, 2**63 - 1, size=config.batch_size)
            batch = [env.generate(n, m, int(s)) for s in seeds]
            results.append(train_step(policy, optimizer, env, batch, config, rng))
        ev = greedy_objective(policy, env, evalset, config.handler) if evalset else float("nan")
        row = {
            "epoch": epoch,
            "mean_reward": _fmt(np.mean([r.mean_reward for r in results])),
            "mean_steps": _fmt(np.mean([r.mean_steps for r in results])),
            "conflict_rate": _fmt(np.mean([r.conflict_rate for r in results])),
            "eval_objective": _fmt(ev),
            "lr": _fmt(optimizer.lr),
            "wall_time": _fmt(time.perf_counter() - t0),
        }
        metrics.append(row)
        if log is not None:
            log(row)
        if out is not None:
            fresh = epoch == 0
            _write_csv(out / "metrics.csv", METRIC_FIELDS, row, fresh)
            _write_csv(out / "timing.csv", TIMING_FIELDS, row, fresh)
            ckpt = out / "checkpoint.npz"
            policy.save(ckpt, optimizer.state_dict(),
                        {"epoch": epoch, "rng_state": rng.bit_generator.state, "initial_eval": initial,
                         "metrics": metrics, "train_config": config.to_dict()})
    return TrainResult(policy, metrics, ckpt, initial)
