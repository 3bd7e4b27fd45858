"""Proximal policy optimization pretraining for reach-and-stay control.

The pretrainer maximizes the expected discounted sum of safe-set indicator
rewards so that the policy already drives the system into the target region
before certificate training starts.  Exploration noise is an isotropic
Gaussian whose scale decays linearly over the first iterations, and the
policy objective carries a hinge penalty on the network Lipschitz constant
so the pretrained controller stays within the bound the certificate loss
assumes later.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Var, constant
from .nets import MlpNetwork
from .optim import Adam
from .system import SystemSpec, rollout

__all__ = [
    "PpoConfig",
    "RolloutBuffer",
    "exploration_std",
    "discounted_returns",
    "collect_rollouts",
    "policy_loss_graph",
    "value_loss_graph",
    "pretrain",
    "save_history_csv",
]

HISTORY_FIELDS = (
    "iteration",
    "mean_episode_reward",
    "exploration_std",
    "policy_lipschitz",
)


@dataclass
class PpoConfig:
    """Hyperparameters for the pretraining phase."""

    episodes_per_iter: int = 30
    horizon: int = 200
    gamma: float = 0.99
    clip_ratio: float = 0.2
    std_start: float = 0.5
    std_end: float = 0.05
    std_decay_iters: int = 50
    policy_epochs: int = 10
    policy_epochs_first: int = 30
    value_epochs: int = 5
    value_epochs_first: int = 10
    minibatch_size: int = 256
    policy_lr: float = 5e-5
    value_lr: float = 5e-4
    lipschitz_threshold: float = 3.0

    def __post_init__(self):
        for name in ("episodes_per_iter", "horizon", "std_decay_iters",
                     "policy_epochs", "policy_epochs_first", "value_epochs",
                     "value_epochs_first", "minibatch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("gamma", "clip_ratio", "std_start", "std_end",
                     "policy_lr", "value_lr", "lipschitz_threshold"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not self.gamma < 1.0:
            raise ValueError("gamma must be below 1")
        if self.std_end > self.std_start:
            raise ValueError("std_end must not exceed std_start")


def exploration_std(config: PpoConfig, iteration: int) -> float:
    """Linearly decayed action noise scale, clamped after the decay window."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if iteration >= config.std_decay_iters:
        return config.std_end
    frac = iteration / config.std_decay_iters
    return config.std_start + frac * (config.std_end - config.std_start)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Reward-to-go along one episode: ``g[t] = sum_k gamma^k r[t+k]``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class RolloutBuffer:
    """Flattened on-policy experience from one batch of episodes."""

    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    old_log_probs: np.ndarray
    episode_rewards: np.ndarray
    std: float

    def __post_init__(self):
        n = self.states.shape[0]
        for name in ("actions", "returns", "advantages", "old_log_probs"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match states")

    def __len__(self) -> int:
        return self.states.shape[0]


def _log_prob(mean: np.ndarray, actions: np.ndarray, std: float) -> np.ndarray:
    # Constant terms cancel in the likelihood ratio since std is not learned.
    return -np.sum((actions - mean) ** 2, axis=1) / (2.0 * std * std)


def collect_rollouts(
    system: SystemSpec,
    policy: MlpNetwork,
    value: MlpNetwork,
    config: PpoConfig,
    std: float,
    rng: np.random.Generator,
) -> RolloutBuffer:
    """Run one batch of exploratory episodes from uniform starts.

    Advantages are returns minus the value baseline, normalized over the
    whole buffer.
    """
    states, actions, returns, episode_rewards = [], [], [], []
    for _ in range(config.episodes_per_iter):
        x0 = system.state_box.sample(rng, 1)[0]
        traj = rollout(system, policy, x0, config.horizon, std, rng)
        states.append(traj.states[:-1])
        actions.append(traj.actions)
        returns.append(discounted_returns(traj.rewards, config.gamma))
        episode_rewards.append(traj.episode_reward())
    states = np.concatenate(states)
    actions = np.concatenate(actions)
    returns = np.concatenate(returns)
    baseline = value.forward(states)[:, 0]
    advantages = returns - baseline
    advantages = (advantages - advantages.mean()) / max(advantages.std(), 1e-8)
    old_log_probs = _log_prob(policy.forward(states), actions, std)
    return RolloutBuffer(states, actions, returns, advantages, old_log_probs,
                         np.asarray(episode_rewards), std)


def policy_loss_graph(
    policy: MlpNetwork,
    params: list[Var],
    states: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    std: float,
    clip_ratio: float,
    lipschitz_threshold: float,
) -> Var:
    """Clipped-surrogate loss plus the Lipschitz hinge, as a graph node."""
    mean = policy.graph(states, params)
    diff = constant(actions) - mean
    log_probs = diff.square().sum(axis=1) * (-1.0 / (2.0 * std * std))
    ratio = (log_probs - constant(old_log_probs)).exp()
    adv = constant(advantages)
    unclipped = ratio * adv
    clipped = ratio.clip(1.0 - clip_ratio, 1.0 + clip_ratio) * adv
    surrogate = unclipped.minimum(clipped).mean()
    penalty = (policy.lipschitz_graph(params) - lipschitz_threshold).relu()
    return -surrogate + penalty


def value_loss_graph(
    value: MlpNetwork,
    params: list[Var],
    states: np.ndarray,
    returns: np.ndarray,
) -> Var:
    """Mean squared regression error of the value baseline."""
    pred = value.graph(states, params)
    err = pred - constant(returns[:, None])
    return err.square().mean()


def _grads(params: list[Var]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.value)
            for p in params]


def _minibatch_pass(
    net: MlpNetwork,
    optimizer: Adam,
    loss_fn,
    n: int,
    minibatch_size: int,
    rng: np.random.Generator,
) -> None:
    order = rng.permutation(n)
    for start in range(0, n, minibatch_size):
        idx = order[start:start + minibatch_size]
        params = net.param_vars()
        loss_fn(params, idx).backward()
        net.set_parameters(optimizer.step(net.parameters(), _grads(params)))


def pretrain(
    system: SystemSpec,
    policy: MlpNetwork,
    value: MlpNetwork,
    config: PpoConfig,
    iterations: int,
    rng: np.random.Generator,
) -> list[dict]:
    """Run the pretraining loop, updating both networks in place.

    Returns one history row per iteration.  Zero iterations leave the
    networks untouched.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    system.policy_matches(policy)
    if value.input_dim != system.state_dim or value.output_dim != 1:
        raise ValueError("value network must map states to scalars")
    policy_opt = Adam(config.policy_lr)
    value_opt = Adam(config.value_lr)
    history: list[dict] = []
    for it in range(iterations):
        std = exploration_std(config, it)
        buf = collect_rollouts(system, policy, value, config, std, rng)
        first = it == 0
        p_epochs = config.policy_epochs_first if first else config.policy_epochs
        v_epochs = config.value_epochs_first if first else config.value_epochs

        def policy_loss(params, idx):
            return policy_loss_graph(
                policy, params, buf.states[idx], buf.actions[idx],
                buf.old_log_probs[idx], buf.advantages[idx], std,
                config.clip_ratio, config.lipschitz_threshold)

        def value_loss(params, idx):
            return value_loss_graph(value, params, buf.states[idx],
                                    buf.returns[idx])

        for _ in range(p_epochs):
            _minibatch_pass(policy, policy_opt, policy_loss, len(buf),
                            config.minibatch_size, rng)
        for _ in range(v_epochs):
            _minibatch_pass(value, value_opt, value_loss, len(buf),
                            config.minibatch_size, rng)
        history.append({
            "iteration": it,
            "mean_episode_reward": float(buf.episode_rewards.mean()),
            "exploration_std": std,
            "policy_lipschitz": policy.lipschitz_constant(),
        })
    return history


def save_history_csv(history: list[dict], path) -> None:
    """Write history rows to a CSV file with a fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})
