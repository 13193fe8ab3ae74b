"""
Tests for the PPO / REINFORCE losses and short fine-tuning runs.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from advantage import GAE, AdvantageRecord
from config import ConfigError, TrainConfig, load_train_config
from env import load_rooms_suite
from evaluate import evaluate_suite
from policy import load_checkpoint, make_critic, make_tabular_policy
from rollout import BudgetError, Step, Trajectory
from setobj import ConstantDiversity
from train import (
    build_envs,
    build_policy,
    build_records,
    calibrate_temperature,
    collect_iteration_data,
    kl_penalty,
    ppo_loss,
    reinforce_gradient,
    reinforce_update,
    run_pretraining,
    set_objective_for,
    train_run,
    update_direction,
    value_loss,
)

CONFIGS = Path(__file__).parent / "configs"
OBS = [np.array([i, i + 1]) for i in range(3)]


def random_policy(seed: int = 0):
    from env import observation_key

    policy = make_tabular_policy([observation_key(o) for o in OBS], 4)
    policy.params[:] = np.random.default_rng(seed).normal(size=policy.params.size)
    return policy


def on_policy_records(policy, advantages):
    records = []
    for i, adv in enumerate(advantages):
        obs, action = OBS[i % len(OBS)], i % 4
        logp = float(policy.log_probs(obs)[action])
        records.append(AdvantageRecord(0, i, adv, GAE, adv, logp, obs, action))
    return records


def tiny_suite():
    return load_rooms_suite(CONFIGS / "tiny_rooms.json")


def test_ppo_loss_on_policy_is_policy_gradient():
    policy = random_policy()
    records = on_policy_records(policy, [0.5, -1.0, 2.0, 0.3])
    loss, grad = ppo_loss(policy, records, 0.2)
    expected = np.zeros_like(policy.params)
    for r in records:
        policy.logprob_grad(r.observation, r.action, expected, scale=-r.advantage / len(records))
    assert np.allclose(grad, expected)
    assert abs(loss + np.mean([r.advantage for r in records])) < 1e-12


def test_ppo_clip_saturation():
    policy = random_policy()
    eps = 0.2
    base = on_policy_records(policy, [1.0])[0]
    shifted = AdvantageRecord(0, 0, 1.0, GAE, 0.0, base.behavior_logprob - np.log(1 + 2 * eps),
                              base.observation, base.action)
    loss, grad = ppo_loss(policy, [shifted], eps)
    assert np.allclose(grad, 0.0)
    assert abs(loss + (1 + eps)) < 1e-12

    negative = AdvantageRecord(0, 0, -1.0, GAE, 0.0, shifted.behavior_logprob, base.observation, base.action)
    _, grad = ppo_loss(policy, [negative], eps)
    assert np.linalg.norm(grad) > 0


def test_update_direction_matches_vanilla_gradient():
    policy = random_policy(1)
    records = on_policy_records(policy, [0.7, -0.2, 1.1, -0.9, 0.4])
    config = TrainConfig(clip_epsilon=1e9, kl_coef=0.0)
    direction = update_direction(policy, policy.copy(), records, config)
    vanilla = np.zeros_like(policy.params)
    for r in records:
        policy.logprob_grad(r.observation, r.action, vanilla, scale=-r.advantage / len(records))
    cosine = direction @ vanilla / (np.linalg.norm(direction) * np.linalg.norm(vanilla))
    assert abs(cosine - 1.0) < 1e-8


def test_kl_penalty():
    policy = random_policy(2)
    kl, grad = kl_penalty(policy, policy.copy(), OBS)
    assert abs(kl) < 1e-12 and np.allclose(grad, 0.0)

    behavior = random_policy(3)
    kl, grad = kl_penalty(behavior, policy, OBS)
    assert kl > 0
    h = 1e-6
    for i in range(0, policy.params.size, 3):
        policy.params[i] += h
        up, _ = kl_penalty(behavior, policy, OBS)
        policy.params[i] -= 2 * h
        down, _ = kl_penalty(behavior, policy, OBS)
        policy.params[i] += h
        assert abs((up - down) / (2 * h) - grad[i]) < 1e-6


def test_value_loss():
    critic = make_critic(random_policy())
    records = [AdvantageRecord(0, 0, 0.0, GAE, 1.0, 0.0, OBS[0], 0)]
    loss, grad = value_loss(critic, records)
    assert loss == 1.0
    assert grad.sum() == -2.0


def test_reinforce_gradient():
    policy = random_policy()

    def traj(ret, action=1):
        return Trajectory(steps=[Step(0, OBS[0], action, ret, 0.0, 0.0)])

    assert np.allclose(reinforce_gradient(policy, [traj(0.5), traj(0.5, 2)]), 0.0)
    grad = reinforce_gradient(policy, [traj(1.0, 1), traj(0.0, 2)])
    expected = np.zeros_like(policy.params)
    policy.logprob_grad(OBS[0], 1, expected, scale=0.25)
    policy.logprob_grad(OBS[0], 2, expected, scale=-0.25)
    assert np.allclose(grad, expected)
    assert np.linalg.norm(grad) > 0
    before = policy.params.copy()
    reinforce_update(policy, [traj(1.0, 1), traj(0.0, 2)], lr=0.1)
    assert np.allclose(policy.params, before + 0.1 * grad)
    try:
        reinforce_gradient(policy, [traj(1.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("single-trajectory baseline accepted")


def test_poly_ppo_with_constant_diversity_matches_vine_ppo():
    configs = tiny_suite()
    envs = build_envs(configs)
    policy = build_policy(envs)
    policy.params[:] = np.random.default_rng(3).normal(scale=0.5, size=policy.params.size)
    critic = make_critic(policy)
    directions = []
    for method, diversity_fn in (("poly_ppo", ConstantDiversity(1.0)), ("vine_ppo", None)):
        config = TrainConfig(method=method, window=0, lambda_ucb=0.0)
        objective = set_objective_for(config, diversity_fn)
        data = collect_iteration_data(envs, policy, critic, config, np.random.default_rng(11), 0, objective)
        records = build_records(data, config)
        directions.append(update_direction(policy, policy.copy(), records, config))
    assert np.array_equal(directions[0], directions[1])
    assert np.linalg.norm(directions[0]) > 0


def test_train_config_loading():
    config = load_train_config(CONFIGS / "poly_ppo_rooms.json", kl_coef=0.05, lambda_ucb=None)
    assert config.kl_coef == 0.05 and config.polychrome_window == 5
    assert load_train_config(env_kind="triangle").polychrome_window == 0
    for bad in ({"method": "dqn"}, {"num_vines": 4}, {"no_such_field": 1}):
        try:
            load_train_config(**bad)
        except ConfigError:
            continue
        raise AssertionError(f"config {bad} accepted")


def test_set_objectives_per_method():
    assert set_objective_for(TrainConfig(method="vine_ppo")).name == "mean_return"
    assert set_objective_for(TrainConfig(method="poly_ppo")).name == "poly"


def test_poly_ppo_iteration_budget():
    configs = tiny_suite()
    policy = build_policy(build_envs(configs))
    config = TrainConfig(iterations=1, actor_lr=0.05, checkpoint_every=0)
    with tempfile.TemporaryDirectory() as tmp:
        run = train_run(config, configs, policy, tmp, verbose=False)
        report = run.reports[0]
        assert report.trajectory_count == 136
        assert report.mean_set_diversity is not None
        assert report.advantage["adv_polychromic_count"] > 0
        lines = (Path(tmp) / "metrics.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["schema_version"] == 1


def test_other_methods_run():
    configs = tiny_suite()
    with tempfile.TemporaryDirectory() as tmp:
        for method in ("ppo", "vine_ppo", "reinforce"):
            policy = build_policy(build_envs(configs))
            config = TrainConfig(method=method, iterations=1, lambda_ucb=0.5, checkpoint_every=0)
            run = train_run(config, configs, policy, Path(tmp) / method, verbose=False)
            assert run.reports[0].trajectory_count == 136
            assert (run.critic is None) == (method == "reinforce")


def test_budget_violation_rejected():
    configs = tiny_suite()
    policy = build_policy(build_envs(configs))
    with tempfile.TemporaryDirectory() as tmp:
        try:
            train_run(TrainConfig(budget=100, iterations=1), configs, policy, tmp, verbose=False)
        except BudgetError:
            pass
        else:
            raise AssertionError("N + p*N^2 > B accepted")


def test_config_temperature_applies_to_policy():
    configs = tiny_suite()
    with tempfile.TemporaryDirectory() as tmp:
        kept = train_run(TrainConfig(iterations=1, checkpoint_every=0), configs,
                         build_policy(build_envs(configs)), Path(tmp) / "kept", verbose=False)
        assert kept.policy.temperature == 1.0
        hot = train_run(TrainConfig(iterations=1, checkpoint_every=0, temperature=2.5), configs,
                        build_policy(build_envs(configs)), Path(tmp) / "hot", verbose=False)
        assert hot.policy.temperature == 2.5
        assert load_checkpoint(Path(tmp) / "hot" / "policy.ckpt").temperature == 2.5
    try:
        TrainConfig(temperature=0.0).validate()
    except ConfigError:
        pass
    else:
        raise AssertionError("zero temperature accepted")


def test_pretrained_success_lands_in_band():
    configs = tiny_suite()
    with tempfile.TemporaryDirectory() as tmp:
        policy, summary = run_pretraining("rooms", configs, tmp, count=20, calibration_rollouts=256,
                                          verbose=False)
        assert 0.2 <= summary["pretrained_success"] <= 0.4
        assert policy.temperature == summary["temperature"]
        assert load_checkpoint(Path(tmp) / "policy.ckpt").temperature == summary["temperature"]
        report = evaluate_suite(policy, configs, rollouts=256, k_grid=(1,), seed=7)
        assert 0.05 < report.success_rate < 0.6
        assert json.loads((Path(tmp) / "pretrain.json").read_text())["pretrained_success"] is not None


def test_calibration_keeps_weak_policy():
    configs = tiny_suite()
    uniform = build_policy(build_envs(configs))
    temperature, success = calibrate_temperature(uniform, build_envs(configs), band=(0.5, 0.6), rollouts=16)
    assert temperature == 1.0 and uniform.temperature == 1.0
    assert success <= 0.6


def test_resume_is_bit_identical():
    configs = tiny_suite()
    start = build_policy(build_envs(configs))
    config = TrainConfig(iterations=2, actor_lr=0.05, lambda_ucb=0.2, checkpoint_every=1)
    with tempfile.TemporaryDirectory() as tmp:
        straight = train_run(config, configs, start.copy(), Path(tmp) / "straight", verbose=False)
        train_run(config.with_overrides(iterations=1), configs, start.copy(), Path(tmp) / "resumed", verbose=False)
        resumed = train_run(config, configs, start.copy(), Path(tmp) / "resumed", resume=True, verbose=False)
        assert np.array_equal(straight.policy.params, resumed.policy.params)
        assert np.array_equal(straight.critic.params, resumed.critic.params)
        a = (Path(tmp) / "straight" / "metrics.jsonl").read_text()
        b = (Path(tmp) / "resumed" / "metrics.jsonl").read_text()
        assert a == b


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Training tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)
