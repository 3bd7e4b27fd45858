"""Tests for the pretraining phase: returns, losses, and the update loop."""

import csv

import numpy as np
import pytest

from stabcert.nets import MlpNetwork, init_mlp
from stabcert.optim import Adam
from stabcert.ppo import (
    PpoConfig,
    collect_rollouts,
    discounted_returns,
    exploration_std,
    policy_loss_graph,
    pretrain,
    save_history_csv,
    value_loss_graph,
)
from stabcert.system import default_benchmark

from helpers import finite_difference_grad, relative_error


def tiny_config(**overrides):
    base = dict(episodes_per_iter=4, horizon=20, minibatch_size=64,
                policy_epochs=2, policy_epochs_first=3, value_epochs=2,
                value_epochs_first=3)
    base.update(overrides)
    return PpoConfig(**base)


def tiny_nets(system, rng, hidden=8):
    policy = init_mlp([system.state_dim, hidden, system.action_dim],
                      "identity", rng)
    value = init_mlp([system.state_dim, hidden, 1], "identity", rng)
    return policy, value


def numpy_policy_loss(policy, states, actions, old_log_probs, advantages,
                      std, clip_ratio, threshold):
    mean = policy.forward(states)
    log_probs = -np.sum((actions - mean) ** 2, axis=1) / (2.0 * std * std)
    ratio = np.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    surrogate = np.minimum(unclipped, clipped).mean()
    penalty = max(policy.lipschitz_constant() - threshold, 0.0)
    return -surrogate + penalty


def test_exploration_std_schedule():
    config = PpoConfig()
    assert exploration_std(config, 0) == 0.5
    assert exploration_std(config, 25) == pytest.approx(0.275)
    assert exploration_std(config, 50) == 0.05
    assert exploration_std(config, 80) == 0.05
    with pytest.raises(ValueError):
        exploration_std(config, -1)


def test_discounted_returns_frozen():
    got = discounted_returns(np.array([1.0, 0.0, 1.0]), 0.5)
    np.testing.assert_allclose(got, [1.25, 0.5, 1.0])


def test_discounted_returns_matches_brute_force():
    rng = np.random.default_rng(3)
    rewards = rng.uniform(-1.0, 1.0, size=40)
    gamma = 0.93
    got = discounted_returns(rewards, gamma)
    expected = np.array([
        sum(gamma ** k * rewards[t + k] for k in range(len(rewards) - t))
        for t in range(len(rewards))
    ])
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.0)
    with pytest.raises(ValueError):
        PpoConfig(std_end=0.6)
    with pytest.raises(ValueError):
        PpoConfig(minibatch_size=0)


def test_collect_rollouts_shapes_and_normalization():
    system = default_benchmark()
    rng = np.random.default_rng(7)
    policy, value = tiny_nets(system, rng)
    config = tiny_config()
    buf = collect_rollouts(system, policy, value, config, 0.3, rng)
    n = config.episodes_per_iter * config.horizon
    assert len(buf) == n
    assert buf.states.shape == (n, system.state_dim)
    assert buf.actions.shape == (n, system.action_dim)
    assert buf.returns.shape == (n,)
    assert buf.advantages.mean() == pytest.approx(0.0, abs=1e-10)
    assert buf.advantages.std() == pytest.approx(1.0, rel=1e-6)
    assert buf.episode_rewards.shape == (config.episodes_per_iter,)
    # Log-probs of the executed actions under the collection-time policy.
    mean = policy.forward(buf.states)
    expected = -np.sum((buf.actions - mean) ** 2, axis=1) / (2.0 * 0.3 ** 2)
    np.testing.assert_allclose(buf.old_log_probs, expected)


def test_policy_loss_matches_numpy_oracle():
    rng = np.random.default_rng(11)
    policy = init_mlp([2, 6, 1], "identity", rng)
    states = rng.uniform(-1.0, 1.0, size=(32, 2))
    actions = rng.normal(size=(32, 1))
    # Spread the old log-probs so some ratios land outside the clip band.
    old = -np.sum((actions - policy.forward(states)) ** 2, axis=1) / 0.5
    old += rng.uniform(-0.6, 0.6, size=32)
    adv = rng.normal(size=32)
    params = policy.param_vars()
    loss = policy_loss_graph(policy, params, states, actions, old, adv,
                             0.5, 0.2, 0.1)
    expected = numpy_policy_loss(policy, states, actions, old, adv,
                                 0.5, 0.2, 0.1)
    assert float(loss.value) == pytest.approx(expected, rel=1e-12)


def test_policy_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    policy = init_mlp([2, 5, 1], "identity", rng)
    states = rng.uniform(-1.0, 1.0, size=(12, 2))
    std = 0.4
    old = -np.sum((rng.normal(size=(12, 1)) * 0.0) ** 2, axis=1)
    actions = policy.forward(states) + std * rng.standard_normal((12, 1))
    old = -np.sum((actions - policy.forward(states)) ** 2, axis=1) / (2 * std * std)
    adv = rng.normal(size=12)
    # Nudge the parameters after collection so the ratios move off 1.
    nudged = [p + 1e-3 * rng.standard_normal(p.shape)
              for p in policy.parameters()]
    policy.set_parameters(nudged)
    params = policy.param_vars()
    loss = policy_loss_graph(policy, params, states, actions, old, adv,
                             std, 0.2, 0.1)
    loss.backward()
    grads = [p.grad for p in params]

    def f(arrays):
        probe = MlpNetwork([arrays[0], arrays[2]], [arrays[1], arrays[3]],
                           "identity")
        return numpy_policy_loss(probe, states, actions, old, adv,
                                 std, 0.2, 0.1)

    fd = finite_difference_grad(f, [p.copy() for p in policy.parameters()])
    assert relative_error(grads, fd) < 1e-4


def test_value_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(17)
    value = init_mlp([2, 5, 1], "identity", rng)
    states = rng.uniform(-1.0, 1.0, size=(10, 2))
    returns = rng.normal(size=10)
    params = value.param_vars()
    loss = value_loss_graph(value, params, states, returns)
    loss.backward()
    grads = [p.grad for p in params]

    def f(arrays):
        probe = MlpNetwork([arrays[0], arrays[2]], [arrays[1], arrays[3]],
                           "identity")
        return float(np.mean((probe.forward(states)[:, 0] - returns) ** 2))

    fd = finite_difference_grad(f, [p.copy() for p in value.parameters()])
    assert relative_error(grads, fd) < 1e-4


def test_zero_advantages_and_slack_lipschitz_leave_policy_fixed():
    # Surrogate gradient vanishes with zero advantages and the hinge is
    # inactive below threshold, so Adam sees exact zeros.
    rng = np.random.default_rng(19)
    policy = init_mlp([2, 5, 1], "identity", rng)
    assert policy.lipschitz_constant() < 100.0
    states = rng.uniform(-1.0, 1.0, size=(8, 2))
    actions = policy.forward(states)
    old = -np.sum((actions - policy.forward(states)) ** 2, axis=1)
    before = policy.params_hash()
    opt = Adam(1e-3)
    for _ in range(3):
        params = policy.param_vars()
        loss = policy_loss_graph(policy, params, states, actions, old,
                                 np.zeros(8), 0.5, 0.2, 100.0)
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                 for p in params]
        policy.set_parameters(opt.step(policy.parameters(), grads))
    assert policy.params_hash() == before


def test_lipschitz_penalty_reduces_policy_constant():
    rng = np.random.default_rng(23)
    policy = init_mlp([2, 5, 1], "identity", rng, gain=3.0)
    threshold = 0.5 * policy.lipschitz_constant()
    states = rng.uniform(-1.0, 1.0, size=(8, 2))
    actions = policy.forward(states)
    old = -np.sum((actions - policy.forward(states)) ** 2, axis=1)
    start = policy.lipschitz_constant()
    opt = Adam(1e-2)
    for _ in range(100):
        params = policy.param_vars()
        loss = policy_loss_graph(policy, params, states, actions, old,
                                 np.zeros(8), 0.5, 0.2, threshold)
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                 for p in params]
        policy.set_parameters(opt.step(policy.parameters(), grads))
    assert policy.lipschitz_constant() < start


def test_value_training_reduces_regression_error():
    rng = np.random.default_rng(29)
    value = init_mlp([2, 16, 1], "identity", rng)
    states = rng.uniform(-1.0, 1.0, size=(64, 2))
    returns = np.sin(states[:, 0]) + states[:, 1] ** 2
    mse = lambda: float(np.mean((value.forward(states)[:, 0] - returns) ** 2))
    before = mse()
    opt = Adam(1e-2)
    for _ in range(200):
        params = value.param_vars()
        loss = value_loss_graph(value, params, states, returns)
        loss.backward()
        grads = [p.grad for p in params]
        value.set_parameters(opt.step(value.parameters(), grads))
    assert mse() < 0.2 * before


def test_pretrain_zero_iterations_is_identity():
    system = default_benchmark()
    rng = np.random.default_rng(31)
    policy, value = tiny_nets(system, rng)
    p_hash, v_hash = policy.params_hash(), value.params_hash()
    history = pretrain(system, policy, value, tiny_config(), 0, rng)
    assert history == []
    assert policy.params_hash() == p_hash
    assert value.params_hash() == v_hash


def test_pretrain_smoke_and_determinism():
    system = default_benchmark()

    def run(seed):
        rng = np.random.default_rng(seed)
        policy, value = tiny_nets(system, rng)
        history = pretrain(system, policy, value, tiny_config(), 2, rng)
        return policy, value, history

    policy_a, value_a, hist_a = run(101)
    policy_b, value_b, hist_b = run(101)
    policy_c, _, _ = run(202)
    assert [r["iteration"] for r in hist_a] == [0, 1]
    for row in hist_a:
        assert np.isfinite(row["mean_episode_reward"])
        assert row["policy_lipschitz"] > 0.0
    assert hist_a == hist_b
    assert policy_a.params_hash() == policy_b.params_hash()
    assert value_a.params_hash() == value_b.params_hash()
    assert policy_a.params_hash() != policy_c.params_hash()


def test_pretrain_rejects_mismatched_value_net():
    system = default_benchmark()
    rng = np.random.default_rng(37)
    policy, _ = tiny_nets(system, rng)
    bad = init_mlp([system.state_dim, 4, 2], "identity", rng)
    with pytest.raises(ValueError):
        pretrain(system, policy, bad, tiny_config(), 1, rng)


def test_history_csv_round_trip(tmp_path):
    history = [
        {"iteration": 0, "mean_episode_reward": 1.5,
         "exploration_std": 0.5, "policy_lipschitz": 2.25},
        {"iteration": 1, "mean_episode_reward": 3.0,
         "exploration_std": 0.491, "policy_lipschitz": 2.5},
    ]
    path = tmp_path / "history.csv"
    save_history_csv(history, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["iteration"] == "0"
    assert float(rows[1]["policy_lipschitz"]) == 2.5
