import numpy as np
import pytest

from parallel_ar.baselines import exhaustive_oracle
from parallel_ar.envs import HcvrpInstance, get_env
from parallel_ar.envs.ffsp import generate as ffsp_generate
from parallel_ar.mdp import run_rollouts
from parallel_ar.policy import Policy, PolicyConfig, replay_log_prob
from parallel_ar.tensor import Adam, Tape
from parallel_ar.trainer import (TrainConfig, advantages, augment, reinforce_loss, shared_baseline, train,
                                 train_step)

TINY = PolicyConfig.desk(d=8, heads=2, layers=1, mlp=16).to_dict()


def small_config(**kw):
    base = dict(n_range=(4, 6), m_range=(2, 2), batch_size=4, samples=4, epochs=2, instances_per_epoch=8,
                eval_size=4, eval_n=5, eval_m=2, policy=TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_shared_baseline_and_advantages():
    r = np.array([[-3.0, -5.0]])
    assert shared_baseline(r).tolist() == [-4.0]
    assert advantages(r).tolist() == [[1.0, -1.0]]
    assert advantages(np.array([[2.5], [7.0]])).tolist() == [[0.0], [0.0]]
    rng = np.random.default_rng(0)
    g = advantages(rng.normal(size=(16, 8)) * 100)
    assert np.abs(g.sum(axis=1)).max() <= 1e-12


def test_config_validation_and_round_trip(tmp_path):
    cfg = small_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert TrainConfig.from_file(tmp_path / "c.json") == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    for bad in (dict(batch_size=0), dict(n_range=(5, 4)), dict(env="tsp"), dict(handler="oldest")):
        with pytest.raises(ValueError):
            small_config(**bad)


def test_step_decay_milestones():
    cfg = TrainConfig(epochs=100, lr=1e-4)
    assert cfg.lr_at(79) == 1e-4
    assert cfg.lr_at(80) == pytest.approx(1e-5)
    assert cfg.lr_at(94) == pytest.approx(1e-5)
    assert cfg.lr_at(95) == pytest.approx(1e-6)
    cos = TrainConfig(epochs=10, lr=1.0, schedule="cosine")
    assert cos.lr_at(0) == 1.0 and cos.lr_at(5) == pytest.approx(0.5)


def test_routing_augmentation_is_an_isometry():
    env = get_env("hcvrp")
    inst = env.generate(5, 2, 3)
    assert augment(inst, 0) is inst
    d0 = np.linalg.norm(inst.locations[:, None] - inst.locations[None], axis=-1)
    for k in range(1, 12):
        img = augment(inst, k)
        dk = np.linalg.norm(img.locations[:, None] - img.locations[None], axis=-1)
        assert np.allclose(d0, dk, atol=1e-12)
    flipped = inst.with_coords(np.array([1 - inst.depot[0], inst.depot[1]]),
                               np.column_stack([1 - inst.coords[:, 0], inst.coords[:, 1]]))
    assert exhaustive_oracle(flipped, env).objective == pytest.approx(exhaustive_oracle(inst, env).objective,
                                                                     abs=1e-12)
    omd = get_env("omdcpdp").generate(3, 2, 0)
    assert augment(omd, 3).pickups.shape == omd.pickups.shape


def test_ffsp_machine_permutation_preserves_optimum():
    env = get_env("ffsp", stages=2)
    inst = ffsp_generate(3, 2, 2, rng_seed=4)
    img = augment(inst, 5)
    assert exhaustive_oracle(img, env).objective == exhaustive_oracle(inst, env).objective
    for a, b in zip(inst.proc_times, img.proc_times):
        assert sorted(a.reshape(-1)) == sorted(b.reshape(-1))


def test_augment_rejects_unknown_types():
    with pytest.raises(ValueError):
        augment(object(), 1)


def test_equal_rewards_leave_parameters_unchanged():
    env = get_env("hcvrp")
    pol = Policy(PolicyConfig.from_dict(TINY), env, seed=0)
    before = pol.state_dict()
    opt = Adam(pol.params, lr=1e-2)
    # one customer, one vehicle: a single forced route, so every reward is equal
    inst = HcvrpInstance(np.zeros(2), [[0.5, 0.5]], [1.0], [10.0], [1.0])
    cfg = small_config(samples=4, augment=False)
    res = train_step(pol, opt, env, [inst, inst], cfg, np.random.default_rng(0))
    assert res.loss == 0.0
    for k, v in pol.state_dict().items():
        assert np.array_equal(v, before[k])


def test_update_raises_log_prob_of_the_better_sample():
    env = get_env("hcvrp")
    pol = Policy(PolicyConfig.from_dict(TINY), env, seed=0)
    inst = env.generate(5, 2, 8)
    idx = np.zeros(2, dtype=int)
    for seed in range(50):
        batch = run_rollouts(env, pol, [inst], idx, mode="sample", seed=seed)
        if batch.objectives[0] != batch.objectives[1]:
            break
    better = int(np.argmin(batch.objectives))
    rewards = -batch.objectives.reshape(1, 2)
    before = replay_log_prob(pol, env, [inst], idx, batch.traces).data
    with Tape() as tape:
        loss = reinforce_loss(replay_log_prob(pol, env, [inst], idx, batch.traces), rewards)
    tape.backward(loss)
    lr = 1e-3
    for p in pol.params.values():
        p.data -= lr * tape.gradient(p)
    after = replay_log_prob(pol, env, [inst], idx, batch.traces).data
    assert after[better] - before[better] > after[1 - better] - before[1 - better]


def test_two_epoch_run_is_reproducible_and_resumable(tmp_path):
    cfg = small_config()
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    ma = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = ma.decode().splitlines()[0].split(",")
    assert {"epoch", "mean_reward", "mean_steps", "conflict_rate"} <= set(header)
    assert len(ma.decode().splitlines()) == 3
    assert (tmp_path / "a" / "timing.csv").exists()
    for k, v in a.policy.state_dict().items():
        assert np.array_equal(v, b.policy.state_dict()[k])

    one = train(small_config(epochs=1), tmp_path / "c")
    resumed = train(cfg, tmp_path / "c", resume=one.checkpoint)
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == ma
    for k, v in a.policy.state_dict().items():
        assert np.array_equal(v, resumed.policy.state_dict()[k])


def test_trains_ffsp_and_omdcpdp_smoke(tmp_path):
    for env_name, m in (("ffsp", (4, 4)), ("omdcpdp", (2, 2))):
        cfg = small_config(env=env_name, m_range=m, stages=2, eval_m=m[0], eval_n=3, n_range=(3, 3),
                           epochs=1, instances_per_epoch=4,
                           policy=PolicyConfig.desk(env_name, d=8, heads=2, layers=1, mlp=16).to_dict())
        res = train(cfg)
        assert len(res.metrics) == 1 and np.isfinite(float(res.metrics[0]["eval_objective"]))
