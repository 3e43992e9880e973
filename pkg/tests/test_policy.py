import numpy as np
import pytest

from parallel_ar.envs import HcvrpInstance, get_env
from parallel_ar.mdp import run_rollouts
from parallel_ar.policy import Policy, PolicyConfig, log_prob_of, replay_log_prob
from parallel_ar.tensor import Tape, Tensor, masked_log_softmax, numerical_gradient

TINY = dict(d=8, heads=2, layers=1, mlp=16)


def tiny_policy(name="hcvrp", seed=1, **kw):
    env = get_env(name, **({"stages": 2} if name == "ffsp" else {}))
    return env, Policy(PolicyConfig.desk(name, **{**TINY, **kw}), env, seed=seed)


def test_configs():
    r = PolicyConfig.routing()
    assert (r.d, r.layers, r.heads, r.mlp, r.norm, r.beta) == (128, 3, 8, 512, "rms", 10.0)
    f = PolicyConfig.ffsp()
    assert (f.d, f.heads, f.mlp, f.norm, f.encoder) == (256, 16, 512, "instance", "cross")
    assert PolicyConfig.from_dict(r.to_dict()) == r
    for bad in (dict(d=10, heads=4), dict(norm="batch"), dict(comm="gru"), dict(beta=0.0)):
        with pytest.raises(ValueError):
            PolicyConfig(**bad)


def test_init_range_and_parameter_names():
    env, pol = tiny_policy()
    w = pol.params["init.node.weight"].data
    assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])
    assert any(k.startswith("comm.") for k in pol.params)
    assert pol.n_parameters() == sum(p.data.size for p in pol.params.values())
    _, none = tiny_policy(comm="none")
    assert not any(k.startswith("comm.") for k in none.params)


def test_identical_nodes_get_identical_embeddings():
    env, pol = tiny_policy()
    inst = env.generate(5, 2, 0)
    coords = inst.coords.copy()
    coords[3] = coords[1]
    dem = inst.demands.copy()
    dem[3] = dem[1]
    twin = HcvrpInstance(inst.depot, coords, dem, inst.capacities, inst.speeds)
    _, h_n = pol.encode(*env.static_features([twin])[:2])
    assert np.allclose(h_n.data[0, 2], h_n.data[0, 4], atol=1e-12)


def test_encoder_is_agent_count_agnostic():
    env, pol = tiny_policy()
    for m in (1, 3, 7):
        a, n, _ = env.static_features([env.generate(6, m, m)])
        h_a, h_n = pol.encode(a, n)
        assert h_a.shape == (1, m, 8) and h_n.shape == (1, 7, 8)
    fenv, fpol = tiny_policy("ffsp")
    for m in (2, 4):
        a, n, c = fenv.static_features([fenv.generate(5, m, 0)])
        h_a, h_n = fpol.encode(a, n, c)
        assert h_a.shape == (1, m, 8) and h_n.shape == (1, 6, 8)


def test_encode_rejects_wrong_feature_width():
    env, pol = tiny_policy()
    with pytest.raises(ValueError):
        pol.encode(np.zeros((1, 2, 3)), np.zeros((1, 4, 4)))


def test_context_identical_agents_and_zero_dynamics():
    env, pol = tiny_policy()
    rng = np.random.default_rng(0)
    h = Tensor(np.repeat(rng.normal(size=(1, 1, 8)), 3, axis=1))
    q = pol.build_context(h, np.zeros((1, 3, env.agent_dyn_dim)), np.zeros((1, env.env_dim)))
    assert q.shape == (1, 3, 8)
    assert np.allclose(q.data[0, 0], q.data[0, 2])
    wq = pol.params["context.query"].data
    assert np.allclose(q.data[0, 0], h.data[0, 0] @ wq[:8])


def test_communication_mixes_agents_and_is_equivariant():
    env, pol = tiny_policy()
    rng = np.random.default_rng(1)
    q = rng.normal(size=(1, 3, 8))
    out = pol.communicate(Tensor(q)).data
    q2 = q.copy()
    q2[0, 2] += 1.0
    assert not np.allclose(pol.communicate(Tensor(q2)).data[0, 0], out[0, 0])
    perm = [2, 0, 1]
    assert np.allclose(pol.communicate(Tensor(q[:, perm])).data, out[:, perm], atol=1e-12)
    lone = pol.communicate(Tensor(q[:, :1])).data
    assert lone.shape == (1, 1, 8) and np.isfinite(lone).all()
    _, none = tiny_policy(comm="none")
    assert np.array_equal(none.communicate(Tensor(q)).data, q)


def grid(env, pol, inst):
    state = env.reset([inst])
    ctx = pol.begin(env, [inst], np.arange(1))
    mask = env.action_mask(state)
    return pol.log_prob_grid(ctx, env, state, mask), mask, ctx, state


def test_pointer_clip_and_masking():
    env, pol = tiny_policy(beta=10.0)
    inst = env.generate(6, 3, 2)
    logp, mask, ctx, state = grid(env, pol, inst)
    p = np.exp(logp.data)
    assert np.allclose(p.sum(-1), 1.0) and (p[~mask] == 0).all()
    agent_dyn, env_f, node_dyn = env.dynamic_features(state)
    q = pol.communicate(pol.build_context(ctx["h_agents"], agent_dyn, env_f, ctx["cache"]["nodes"],
                                          env.current_nodes(state)))
    u = pol.pointer_logits(q, ctx["cache"], node_dyn, mask).data
    assert (np.abs(u) < 10.0).all()


def test_zero_pointer_keys_give_uniform_rows():
    env, pol = tiny_policy()
    pol.params["pointer.key"].data[:] = 0.0
    pol.params["pointer.key_dyn"].data[:] = 0.0
    logp, mask, _, _ = grid(env, pol, env.generate(5, 2, 3))
    p = np.exp(logp.data)[0]
    for k in range(2):
        assert np.allclose(p[k][mask[0, k]], 1.0 / mask[0, k].sum())


def test_permuting_customers_and_agents_permutes_the_grid():
    env, pol = tiny_policy()
    inst = env.generate(5, 3, 4)
    node_perm = np.array([3, 0, 4, 1, 2])
    agent_perm = np.array([1, 2, 0])
    moved = HcvrpInstance(inst.depot, inst.coords[node_perm], inst.demands[node_perm],
                          inst.capacities[agent_perm], inst.speeds[agent_perm])
    a, _, _, _ = grid(env, pol, inst)
    b, _, _, _ = grid(env, pol, moved)
    cols = np.concatenate([[0], node_perm + 1])
    assert np.allclose(b.data[0], a.data[0][agent_perm][:, cols], atol=1e-10)


def test_trained_on_three_agents_runs_with_seven():
    env, pol = tiny_policy()
    batch = run_rollouts(env, pol, [env.generate(9, 7, 0)], mode="sample", seed=0)
    assert env.verify(env.generate(9, 7, 0), batch.traces[0]).feasible


def test_log_prob_of():
    logp = masked_log_softmax(Tensor(np.zeros((1, 2, 3))), np.array([[[True, False, False], [True, True, True]]]))
    lp = log_prob_of(logp, np.array([[0, 1]])).data[0]
    assert lp[0] == 0.0 and np.isclose(lp[1], np.log(1 / 3))
    with pytest.raises(ValueError):
        log_prob_of(logp, np.array([[1, 0]]))


def sampled_fd_errors(f, params, tape, rng, per_param=4, h=1e-5):
    errs = {}
    for name, p in params.items():
        idx = rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
        num = numerical_gradient(f, p, h, indices=idx).reshape(-1)[idx]
        ana = tape.gradient(p).reshape(-1)[idx]
        scale = max(np.abs(num).max(), np.abs(ana).max())
        if scale > 1e-8:
            errs[name] = np.abs(num - ana).max() / scale
    return errs


@pytest.mark.parametrize("name,n,m", [("hcvrp", 3, 2), ("ffsp", 2, 4)])
def test_summed_log_prob_gradient_matches_finite_differences(name, n, m):
    env, pol = tiny_policy(name)
    inst = env.generate(n, m, 5)
    batch = run_rollouts(env, pol, [inst], mode="sample", seed=2)
    f = lambda: float(replay_log_prob(pol, env, [inst], np.arange(1), batch.traces).data.sum())
    assert np.isclose(f(), batch.traces[0].log_prob)
    with Tape() as tape:
        out = replay_log_prob(pol, env, [inst], np.arange(1), batch.traces).sum()
    tape.backward(out)
    errs = sampled_fd_errors(f, pol.params, tape, np.random.default_rng(0))
    assert errs and max(errs.values()) < 1e-4, sorted(errs.items(), key=lambda kv: -kv[1])[:3]


def test_checkpoint_round_trip(tmp_path):
    env, pol = tiny_policy()
    pol.save(tmp_path / "p.npz", extra_arrays={"opt.m": np.ones(2)}, extra_meta={"epoch": 4})
    back, rest, meta = Policy.load(tmp_path / "p.npz")
    assert meta["epoch"] == 4 and np.array_equal(rest["opt.m"], np.ones(2))
    for k, v in pol.state_dict().items():
        assert v.tobytes() == back.params[k].data.tobytes()
    with pytest.raises(ValueError):
        Policy.load(tmp_path / "p.npz", env=get_env("omdcpdp"))
