"""Stochastic discrete-time control systems over compact state boxes.

The dynamics family is affine with state saturation: a step maps
``x`` to ``clip(A x + B u + w)`` where ``clip`` projects onto the state
box, ``u`` is the policy output, and ``w`` is a bounded disturbance drawn
uniformly from its support box.  The safe set is an axis-aligned box that
must be closed under the dynamics for every certification run; closedness
is checked soundly with interval arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box
from .nets import MlpNetwork

__all__ = [
    "UniformNoise",
    "AffineDynamics",
    "SystemSpec",
    "Trajectory",
    "rollout",
    "check_closed_under_dynamics",
    "default_benchmark",
]


class UniformNoise:
    """Uniform distribution over a box support."""

    def __init__(self, support: Box):
        if np.any(support.widths <= 0):
            raise ValueError("noise support must have positive volume")
        self.support = support

    @property
    def dim(self) -> int:
        return self.support.dim

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        return self.support.sample(rng, n)

    def cell_probability(self, cell: Box) -> float:
        """Probability mass of ``cell`` (clipped against the support)."""
        lo = np.maximum(cell.lower, self.support.lower)
        hi = np.minimum(cell.upper, self.support.upper)
        overlap = np.maximum(hi - lo, 0.0)
        return float(np.prod(overlap / self.support.widths))

    def partition(self, cells_per_axis: int):
        """Disjoint grid cover of the support.

        Returns ``(lowers, uppers, probs)`` with one row per cell; the
        probabilities sum to 1 up to float rounding.
        """
        if cells_per_axis < 1:
            raise ValueError("cells_per_axis must be positive")
        edges = [
            np.linspace(self.support.lower[i], self.support.upper[i], cells_per_axis + 1)
            for i in range(self.dim)
        ]
        los = np.stack(
            np.meshgrid(*[e[:-1] for e in edges], indexing="ij"), axis=-1
        ).reshape(-1, self.dim)
        his = np.stack(
            np.meshgrid(*[e[1:] for e in edges], indexing="ij"), axis=-1
        ).reshape(-1, self.dim)
        probs = np.array(
            [self.cell_probability(Box(lo, hi)) for lo, hi in zip(los, his)]
        )
        return los, his, probs


class AffineDynamics:
    """``f(x, u, w) = clip(A x + B u + w)`` with saturation onto a box."""

    def __init__(self, a, b, state_box: Box):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.state_box = state_box
        n = state_box.dim
        if self.a.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {self.a.shape}")
        if self.b.ndim != 2 or self.b.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {self.b.shape}")

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def action_dim(self) -> int:
        return self.b.shape[1]

    def lipschitz_constant(self) -> float:
        """Bound on the joint ``(x, u)`` 1-norm Lipschitz constant.

        Saturation is 1-Lipschitz, so the max of the induced 1-norms of
        A and B dominates the saturated map.
        """
        norm_a = float(np.max(np.abs(self.a).sum(axis=0)))
        norm_b = float(np.max(np.abs(self.b).sum(axis=0))) if self.b.size else 0.0
        return max(norm_a, norm_b)

    def step(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """One transition for a point ``(n,)`` or batch ``(k, n)``."""
        x = np.asarray(x, dtype=np.float64)
        image = x @ self.a.T + np.atleast_1d(u) @ self.b.T + w
        return self.state_box.clip(image)


@dataclass
class SystemSpec:
    """A control system: state box, safe box, dynamics, and noise."""

    state_box: Box
    safe_box: Box
    dynamics: AffineDynamics
    noise: UniformNoise

    def __post_init__(self):
        n = self.state_box.dim
        if self.safe_box.dim != n:
            raise ValueError("safe box dimension mismatch")
        if not self.state_box.strictly_contains_box(self.safe_box):
            raise ValueError("safe box must lie strictly inside the state box")
        if self.dynamics.state_dim != n:
            raise ValueError("dynamics dimension mismatch")
        if self.noise.dim != n:
            raise ValueError("noise must act on every state coordinate")

    @property
    def state_dim(self) -> int:
        return self.state_box.dim

    @property
    def action_dim(self) -> int:
        return self.dynamics.action_dim

    def reward(self, x: np.ndarray) -> np.ndarray:
        """Indicator of the (closed) safe box; boundary points count."""
        inside = self.safe_box.contains(x)
        return np.asarray(inside, dtype=np.float64)

    def policy_matches(self, policy: MlpNetwork) -> None:
        if policy.input_dim != self.state_dim:
            raise ValueError("policy input dim does not match the state")
        if policy.output_dim != self.action_dim:
            raise ValueError("policy output dim does not match the action")


@dataclass
class Trajectory:
    """One rollout: ``states[t+1] = f(states[t], actions[t], noises[t])``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    noises: np.ndarray

    def __post_init__(self):
        h = len(self.actions)
        if len(self.states) != h + 1:
            raise ValueError("need exactly one more state than actions")
        if len(self.rewards) != h or len(self.noises) != h:
            raise ValueError("rewards and noises must have one entry per action")

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def episode_reward(self) -> float:
        return float(self.rewards.sum())


def rollout(
    system: SystemSpec,
    policy: MlpNetwork,
    x0: np.ndarray,
    horizon: int,
    exploration_std: float,
    rng: np.random.Generator,
) -> Trajectory:
    """Seeded rollout; Gaussian action noise scaled by ``exploration_std``.

    Rewards are collected on arrival: ``rewards[t]`` scores ``states[t+1]``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if not system.state_box.contains(x0):
        raise ValueError("initial state outside the state box")
    system.policy_matches(policy)
    n, m = system.state_dim, system.action_dim
    states = np.empty((horizon + 1, n))
    actions = np.empty((horizon, m))
    rewards = np.empty(horizon)
    noises = np.empty((horizon, system.noise.dim))
    states[0] = x0
    x = x0
    for t in range(horizon):
        u = policy.forward(x)
        if exploration_std > 0.0:
            u = u + exploration_std * rng.standard_normal(m)
        w = system.noise.sample(rng)
        x = system.dynamics.step(x, u, w)
        actions[t] = u
        noises[t] = w
        states[t + 1] = x
        rewards[t] = system.reward(x)
    return Trajectory(states, actions, rewards, noises)


def check_closed_under_dynamics(
    system: SystemSpec, policy: MlpNetwork
) -> tuple[bool, Box]:
    """Sound closedness check of the safe box under the closed loop.

    Pushes the safe box through the policy (interval pass) and the
    dynamics with the full noise support, then tests whether the
    resulting enclosure stays inside the safe box.  Returns the verdict
    together with the enclosure as a witness.
    """
    system.policy_matches(policy)
    safe = system.safe_box
    u_box = policy.interval_forward(safe)
    a, b = system.dynamics.a, system.dynamics.b
    ap, an = np.maximum(a, 0.0), np.minimum(a, 0.0)
    bp, bn = np.maximum(b, 0.0), np.minimum(b, 0.0)
    lo = ap @ safe.lower + an @ safe.upper + bp @ u_box.lower + bn @ u_box.upper
    hi = ap @ safe.upper + an @ safe.lower + bp @ u_box.upper + bn @ u_box.lower
    lo = lo + system.noise.support.lower
    hi = hi + system.noise.support.upper
    enclosure = Box(
        system.state_box.clip(lo), system.state_box.clip(hi)
    )
    return safe.contains_box(enclosure), enclosure


def default_benchmark() -> SystemSpec:
    """Band-holding benchmark used throughout the experiments.

    The uncontrolled system contracts toward the origin, which lies
    outside the safe band, so trajectories only settle inside the band
    when the policy learns to hold them there.
    """
    state_box = Box([-2.0, -2.0], [2.0, 2.0])
    safe_box = Box([-0.4, 0.2], [0.4, 1.0])
    dynamics = AffineDynamics(
        a=[[0.5, 0.1], [0.0, 0.5]],
        b=[[0.0], [0.3]],
        state_box=state_box,
    )
    noise = UniformNoise(Box([-0.01, -0.01], [0.01, 0.01]))
    return SystemSpec(state_box, safe_box, dynamics, noise)
