"""Multi-agent pointer network with an agent communication block.

Pipeline per instance::

    encode      agents and nodes -> h_a [M, d], h_n [A, d]
    context     q_m = [h_a_m, delta_m W_delta, e W_e] W_q
    communicate one transformer block over the M agent queries
    point       q <- MHA(q, h_n + xi W^K_xi, h_n + xi W^V_xi; mask)
                u = beta * tanh(q (h_n W^L + xi W^L_xi)^T / sqrt(d))
                log p = masked log-softmax(u) per agent row

Routing problems encode the concatenated agent and node tokens with
self-attention. The flow shop encodes machines and jobs with alternating
cross-attention whose scores carry a learned per-head processing-time bias.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mdp import Proposal, select_actions
from .tensor import (MASK_FILL, Tensor, add_projection, attention_core, broadcast_to, concat, gather_rows,
                     getitem, instance_norm, load_checkpoint, masked_log_softmax, matmul, mul,
                     multi_head_attention, relu, reshape, rms_norm, save_checkpoint, scaled_tanh_clip,
                     swapaxes, take_along_last, tsum)

COMM_VARIANTS = ("transformer", "mha", "mlp", "none")


@dataclass
class PolicyConfig:
    d: int = 128
    heads: int = 8
    layers: int = 3
    mlp: int = 512
    norm: str = "rms"           # rms | instance
    encoder: str = "self"       # self | cross
    comm: str = "transformer"   # transformer | mha | mlp | none
    beta: float = 10.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.norm not in ("rms", "instance"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.encoder not in ("self", "cross"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.comm not in COMM_VARIANTS:
            raise ValueError(f"unknown communication variant {self.comm!r}; expected one of {COMM_VARIANTS}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @classmethod
    def routing(cls, **kw) -> "PolicyConfig":
        return cls(**kw)

    @classmethod
    def ffsp(cls, **kw) -> "PolicyConfig":
        base = dict(d=256, heads=16, layers=3, mlp=512, norm="instance", encoder="cross")
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, env_name: str = "hcvrp", **kw) -> "PolicyConfig":
        """Small model sized for single-core training runs."""
        base = dict(d=64, heads=4, layers=2, mlp=128)
        if env_name == "ffsp":
            base.update(norm="instance", encoder="cross")
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_env(cls, env_name: str, **kw) -> "PolicyConfig":
        return cls.ffsp(**kw) if env_name == "ffsp" else cls.routing(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


class Policy:
    """Parameters plus the forward pass; implements the rollout policy protocol."""

    handler = "learned"

    def __init__(self, config: PolicyConfig, env, seed: int = 0):
        self.config = config
        self.env_name = env.name
        self.stages = getattr(env, "stages", None)
        self.dims = dict(agent=env.agent_dim, node=env.node_dim, agent_dyn=env.agent_dyn_dim,
                         env=env.env_dim, node_dyn=env.node_dyn_dim)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    # ------------------------------------------------------------ parameters

    def _weight(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)

    def _const(self, name: str, shape, value: float) -> None:
        self.params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    def _norm_params(self, name: str) -> None:
        self._const(f"{name}.gain", self.config.d, 1.0)
        if self.config.norm == "instance":
            self._const(f"{name}.bias", self.config.d, 0.0)

    def _attn_params(self, name: str) -> None:
        d = self.config.d
        for w in ("wq", "wk", "wv", "wo"):
            self._weight(f"{name}.{w}", d, d)

    def _mlp_params(self, name: str) -> None:
        d, h = self.config.d, self.config.mlp
        self._weight(f"{name}.w1", d, h)
        self._const(f"{name}.b1", h, 0.0)
        self._weight(f"{name}.w2", h, d)
        self._const(f"{name}.b2", d, 0.0)

    def _build(self) -> None:
        c, dims = self.config, self.dims
        d = c.d
        self._weight("init.agent.weight", dims["agent"], d)
        self._const("init.agent.bias", d, 0.0)
        self._weight("init.node.weight", dims["node"], d)
        self._const("init.node.bias", d, 0.0)
        for l in range(c.layers):
            p = f"encoder.{l}"
            if c.encoder == "self":
                self._norm_params(f"{p}.norm1")
                self._attn_params(f"{p}.attn")
                self._norm_params(f"{p}.norm2")
                self._mlp_params(f"{p}.mlp")
            else:
                for side in ("agent", "node"):
                    self._norm_params(f"{p}.{side}.norm1")
                    self._attn_params(f"{p}.{side}.attn")
                    self._const(f"{p}.{side}.cost_scale", c.heads, 1.0)
                    self._norm_params(f"{p}.{side}.norm2")
                    self._mlp_params(f"{p}.{side}.mlp")
        if c.encoder == "self":
            self._norm_params("encoder.final")
        else:
            self._norm_params("encoder.final.agent")
            self._norm_params("encoder.final.node")

        self._weight("context.agent_dyn", dims["agent_dyn"], d)
        self._weight("context.env", dims["env"], d)
        self._weight("context.query", 3 * d, d)

        if c.comm in ("transformer", "mha"):
            self._norm_params("comm.norm1")
            self._attn_params("comm.attn")
        if c.comm in ("transformer", "mlp"):
            self._norm_params("comm.norm2")
            self._mlp_params("comm.mlp")

        self._attn_params("decoder.attn")
        self._weight("decoder.key_dyn", dims["node_dyn"], d)
        self._weight("decoder.value_dyn", dims["node_dyn"], d)
        self._weight("pointer.key", d, d)
        self._weight("pointer.key_dyn", dims["node_dyn"], d)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # ------------------------------------------------------------ building blocks

    def _norm(self, name: str, x: Tensor) -> Tensor:
        P = self.params
        if self.config.norm == "rms":
            return rms_norm(x, P[f"{name}.gain"])
        return instance_norm(x, P[f"{name}.gain"], P[f"{name}.bias"])

    def _mha(self, name: str, q, kv, mask=None, bias=None) -> Tensor:
        P = self.params
        return multi_head_attention(q, kv, kv, P[f"{name}.wq"], P[f"{name}.wk"], P[f"{name}.wv"],
                                    P[f"{name}.wo"], self.config.heads, mask=mask, bias=bias)

    def _mlp(self, name: str, x: Tensor) -> Tensor:
        P = self.params
        h = relu(matmul(x, P[f"{name}.w1"]) + P[f"{name}.b1"])
        return matmul(h, P[f"{name}.w2"]) + P[f"{name}.b2"]

    # ------------------------------------------------------------ encoder

    def encode(self, agent_feats: np.ndarray, node_feats: np.ndarray, cost: np.ndarray | None = None):
        """Embeddings ``h_a`` [B, M, d] and ``h_n`` [B, A, d]."""
        if agent_feats.shape[-1] != self.dims["agent"] or node_feats.shape[-1] != self.dims["node"]:
            raise ValueError(f"feature widths {agent_feats.shape[-1]}/{node_feats.shape[-1]} do not match "
                             f"the configured {self.dims['agent']}/{self.dims['node']}")
        P, c = self.params, self.config
        xa = matmul(agent_feats, P["init.agent.weight"]) + P["init.agent.bias"]
        xn = matmul(node_feats, P["init.node.weight"]) + P["init.node.bias"]
        M = agent_feats.shape[1]
        if c.encoder == "self":
            x = concat([xa, xn], axis=1)
            for l in range(c.layers):
                p = f"encoder.{l}"
                hx = self._norm(f"{p}.norm1", x)
                x = x + self._mha(f"{p}.attn", hx, hx)
                x = x + self._mlp(f"{p}.mlp", self._norm(f"{p}.norm2", x))
            x = self._norm("encoder.final", x)
            return getitem(x, (slice(None), slice(0, M))), getitem(x, (slice(None), slice(M, None)))

        if cost is None:
            raise ValueError("the cross-attention encoder needs a cost matrix")
        cost = np.asarray(cost, dtype=np.float64)
        cost_t = np.swapaxes(cost, -1, -2)
        H = c.heads
        for l in range(c.layers):
            p = f"encoder.{l}"
            na = self._norm(f"{p}.agent.norm1", xa)
            nn_ = self._norm(f"{p}.node.norm1", xn)
            bias_a = mul(reshape(P[f"{p}.agent.cost_scale"], (H, 1, 1)), cost[:, None])
            bias_n = mul(reshape(P[f"{p}.node.cost_scale"], (H, 1, 1)), cost_t[:, None])
            xa = xa + self._mha(f"{p}.agent.attn", na, nn_, bias=bias_a)
            xn = xn + self._mha(f"{p}.node.attn", nn_, na, bias=bias_n)
            xa = xa + self._mlp(f"{p}.agent.mlp", self._norm(f"{p}.agent.norm2", xa))
            xn = xn + self._mlp(f"{p}.node.mlp", self._norm(f"{p}.node.norm2", xn))
        return self._norm("encoder.final.agent", xa), self._norm("encoder.final.node", xn)

    # ------------------------------------------------------------ decoder

    def build_context(self, h_agents: Tensor, agent_dyn: np.ndarray, env_feats: np.ndarray,
                      h_nodes: Tensor | None = None, current: np.ndarray | None = None) -> Tensor:
        """Agent queries [R, M, d] from static embeddings and the current dynamics.

        For routing, the embedding of the node each agent stands on is added to
        its dynamics projection (``current`` = -1 means "not on a node").
        """
        P = self.params
        R, M, d = h_agents.shape
        dyn = matmul(np.asarray(agent_dyn, dtype=np.float64), P["context.agent_dyn"])
        if current is not None:
            cur = np.asarray(current, dtype=np.int64)
            here = getitem(h_nodes, (np.arange(R)[:, None], np.maximum(cur, 0)))
            if (cur < 0).any():
                here = mul(here, (cur >= 0)[..., None].astype(np.float64))
            dyn = dyn + here
        e = matmul(np.asarray(env_feats, dtype=np.float64), P["context.env"])
        e = broadcast_to(reshape(e, (R, 1, d)), (R, M, d))
        return matmul(concat([h_agents, dyn, e], axis=-1), P["context.query"])

    def communicate(self, q: Tensor) -> Tensor:
        c = self.config.comm
        if c in ("transformer", "mha"):
            hq = self._norm("comm.norm1", q)
            q = q + self._mha("comm.attn", hq, hq)
        if c in ("transformer", "mlp"):
            q = q + self._mlp("comm.mlp", self._norm("comm.norm2", q))
        return q

    def precompute(self, h_nodes: Tensor) -> dict:
        """Per-instance node projections reused at every decoding step."""
        P = self.params
        return {"nodes": h_nodes,
                "key": matmul(h_nodes, P["decoder.attn.wk"]),
                "value": matmul(h_nodes, P["decoder.attn.wv"]),
                "pointer": matmul(h_nodes, P["pointer.key"])}

    def pointer_logits(self, q: Tensor, cache: dict, node_dyn: np.ndarray, mask: np.ndarray) -> Tensor:
        """Clipped compatibility grid u [R, M, A] (entries not yet masked)."""
        P, c = self.params, self.config
        node_dyn = np.asarray(node_dyn, dtype=np.float64)
        k = add_projection(cache["key"], node_dyn, matmul(P["decoder.key_dyn"], P["decoder.attn.wk"]))
        v = add_projection(cache["value"], node_dyn, matmul(P["decoder.value_dyn"], P["decoder.attn.wv"]))
        qp = matmul(q, P["decoder.attn.wq"])
        glimpse = matmul(attention_core(qp, k, v, c.heads, mask), P["decoder.attn.wo"])
        keys = add_projection(cache["pointer"], node_dyn, P["pointer.key_dyn"])
        compat = matmul(glimpse, swapaxes(keys, -1, -2)) * (1.0 / np.sqrt(c.d))
        return scaled_tanh_clip(compat, c.beta)

    # ------------------------------------------------------------ policy protocol

    def begin(self, env, instances, index) -> dict:
        if env.name != self.env_name:
            raise ValueError(f"policy was built for {self.env_name}, not {env.name}")
        index = np.asarray(index, dtype=np.int64)
        agent_f, node_f, cost = env.static_features(instances)
        h_a, h_n = self.encode(agent_f, node_f, cost)
        cache = self.precompute(h_n)
        if not (len(index) == len(instances) and (index == np.arange(len(instances))).all()):
            h_a = gather_rows(h_a, index)
            cache = {k: gather_rows(v, index) for k, v in cache.items()}
        return {"h_agents": h_a, "cache": cache, "env": env}

    def log_prob_grid(self, context: dict, env, state, mask: np.ndarray) -> Tensor:
        agent_dyn, env_feats, node_dyn = env.dynamic_features(state)
        q = self.build_context(context["h_agents"], agent_dyn, env_feats, context["cache"]["nodes"],
                               env.current_nodes(state))
        q = self.communicate(q)
        u = self.pointer_logits(q, context["cache"], node_dyn, mask)
        return masked_log_softmax(u, mask)

    def propose(self, context, state, mask, greedy, rng) -> Proposal:
        logp = self.log_prob_grid(context, context["env"], state, mask)
        probs = np.where(mask, np.exp(logp.data), 0.0)
        actions = select_actions(probs, greedy, rng)
        chosen = log_prob_of(logp, actions)
        return Proposal(actions, np.exp(chosen.data), chosen.data, chosen)

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "env": self.env_name, "stages": self.stages}

    def save(self, path, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> None:
        arrays = {f"param.{k}": v for k, v in self.state_dict().items()}
        arrays.update(extra_arrays or {})
        save_checkpoint(path, arrays, {**self.meta(), **(extra_meta or {})})

    @classmethod
    def load(cls, path, env=None) -> tuple["Policy", dict, dict]:
        """Returns (policy, extra arrays, meta)."""
        from .envs import get_env
        arrays, meta = load_checkpoint(path)
        if env is None:
            env = get_env(meta["env"], **({"stages": meta["stages"]} if meta.get("stages") else {}))
        elif env.name != meta.get("env"):
            raise ValueError(f"checkpoint is for {meta.get('env')}, not {env.name}")
        policy = cls(PolicyConfig.from_dict(meta["config"]), env)
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        policy.load_state_dict(params)
        rest = {k: v for k, v in arrays.items() if not k.startswith("param.")}
        return policy, rest, meta


def log_prob_of(logp_grid: Tensor, actions: np.ndarray) -> Tensor:
    """Log-probabilities of the chosen actions, one per agent row."""
    chosen = take_along_last(logp_grid, np.asarray(actions, dtype=np.int64))
    if (chosen.data <= MASK_FILL / 2).any():
        raise ValueError("selected an action with zero probability")
    return chosen


def replay_log_prob(policy: Policy, env, instances, index, traces) -> Tensor:
    """Summed log-probability [R] of each trace's proposed actions (teacher forcing).

    Agents with a single feasible action and finished rollouts are skipped,
    exactly as during sampling.
    """
    index = np.asarray(index, dtype=np.int64)
    state = env.reset([instances[i] for i in index])
    ctx = policy.begin(env, instances, index)
    R = len(index)
    T = max(t.steps for t in traces)
    total = None
    for t in range(T):
        mask = env.action_mask(state)
        done = env.is_terminal(state)
        fb = env.fallback_actions(state)
        prop = np.array([tr.proposed[t] if t < tr.steps else fb[r] for r, tr in enumerate(traces)])
        act = np.array([tr.actions[t] if t < tr.steps else fb[r] for r, tr in enumerate(traces)])
        flags = np.array([tr.fallback_flags[t] if t < tr.steps else np.ones(len(fb[r]), bool)
                          for r, tr in enumerate(traces)])
        free = (mask.sum(axis=-1) > 1) & ~done[:, None]
        logp = policy.log_prob_grid(ctx, env, state, mask)
        safe = np.where(free, prop, np.argmax(mask, axis=-1))
        contrib = tsum(mul(log_prob_of(logp, safe), free.astype(np.float64)), axis=-1)
        total = contrib if total is None else total + contrib
        state = env.transition(state, act, flags)
    if total is None:
        total = Tensor(np.zeros(R))
    return total
