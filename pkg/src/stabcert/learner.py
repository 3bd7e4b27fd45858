"""Joint training of a control policy and a decrease certificate.

The training loss has two parts: a sampled decrease penalty over grid
points, and a hinge that keeps the certificate's Lipschitz constant
small enough for the grid margin to stay meaningful.  The full run
alternates sound verification with gradient training on counterexample
data, starting from a policy pretrained by :mod:`stabcert.ppo`.

Successor states are never stored directly.  The per-point stores keep
raw disturbance draws and the dynamics are re-applied under the current
policy every time the loss is evaluated, so the estimator stays
consistent across policy updates and gradients reach the policy
parameters when those are trainable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var, constant
from .boxes import Box
from .nets import MlpNetwork, init_mlp
from .optim import Adam
from .ppo import PpoConfig, pretrain, save_history_csv
from .system import SystemSpec, check_closed_under_dynamics
from .verifier import (
    Discretization,
    SuccessorStore,
    VerifierReport,
    build_discretization,
    check_all,
    harvest_counterexamples,
    margin_constant,
)

__all__ = [
    "ClosednessError",
    "LearnerConfig",
    "LossBreakdown",
    "RunVerdict",
    "rsm_loss_graph",
    "lipschitz_loss_graph",
    "train_epoch",
    "pretrain_rsm",
    "run_algorithm",
]


class ClosednessError(RuntimeError):
    """The safe set is not closed under the pretrained closed loop."""

    def __init__(self, witness: Box):
        super().__init__(
            "safe-set image under the closed-loop dynamics leaves the safe "
            f"set; witness enclosure {witness}"
        )
        self.witness = witness


@dataclass
class LossBreakdown:
    """Loss terms averaged over one epoch of minibatches."""

    rsm_loss: float
    lipschitz_loss: float
    reg_weight: float

    def __post_init__(self):
        if not (np.isfinite(self.rsm_loss) and np.isfinite(self.lipschitz_loss)):
            raise ValueError("loss terms must be finite")
        if self.rsm_loss < 0.0 or self.lipschitz_loss < 0.0:
            raise ValueError("loss terms must be nonnegative")

    @property
    def total(self) -> float:
        return self.rsm_loss + self.reg_weight * self.lipschitz_loss


@dataclass
class LearnerConfig:
    """Knobs for one full certification run."""

    mesh: float = 0.1
    successor_samples: int = 10
    reg_weight: float = 1e-3
    lipschitz_cap: float = 8.0
    ppo_iters: int = 50
    policy_trainable: bool = False
    max_loop_iters: int = 50
    timeout_seconds: float = 1800.0
    pretrain_epochs: int = 50
    epochs_per_round: int = 50
    minibatch_size: int = 256
    rsm_lr: float = 5e-4
    policy_lr: float = 5e-5
    cells_per_axis: int = 8
    max_grid_points: int = 1_000_000
    policy_hidden: tuple = (128, 128)
    rsm_hidden: tuple = (128, 128)
    value_hidden: tuple = (128, 128)
    policy_init_gain: float | tuple = 1.0
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if self.mesh <= 0.0:
            raise ValueError("mesh must be positive")
        if self.successor_samples < 1:
            raise ValueError("successor_samples must be positive")
        if self.reg_weight < 0.0:
            raise ValueError("reg_weight must be nonnegative")
        if self.lipschitz_cap <= 0.0:
            raise ValueError("lipschitz_cap must be positive")
        for name in ("ppo_iters", "pretrain_epochs", "epochs_per_round"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("max_loop_iters", "minibatch_size", "cells_per_axis",
                     "max_grid_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.timeout_seconds <= 0.0:
            raise ValueError("timeout_seconds must be positive")


def _squeeze_scalar_output(out: Var) -> Var:
    # (n, 1) -> (n,); summing over the unit axis is exact.
    return out.sum(axis=1)


def rsm_loss_graph(
    rsm: MlpNetwork,
    rsm_params: list[Var],
    policy: MlpNetwork,
    policy_params: list[Var],
    system: SystemSpec,
    points: np.ndarray,
    segment_ids: np.ndarray,
    draws: np.ndarray,
    mesh: float,
    margin_const: float,
) -> Var:
    """Sampled decrease penalty averaged over a batch of grid points.

    ``segment_ids`` maps each disturbance draw to its row in ``points``;
    points without draws contribute zero but still count in the average.
    ``margin_const`` enters as a plain number, not a graph node.
    """
    n = len(points)
    if n == 0:
        raise ValueError("empty grid-point batch")
    present = np.unique(segment_ids)
    local_ids = np.searchsorted(present, segment_ids)
    base = points[segment_ids]
    actions = policy.graph(base, policy_params)
    image = constant(base @ system.dynamics.a.T + draws) + actions.matmul(
        constant(system.dynamics.b.T)
    )
    successors = image.clip(system.state_box.lower, system.state_box.upper)
    succ_values = _squeeze_scalar_output(rsm.graph_from(successors, rsm_params))
    point_values = _squeeze_scalar_output(rsm.graph(points[present], rsm_params))
    expected = succ_values.segment_mean(local_ids, len(present))
    residual = (expected - point_values + mesh * margin_const).relu()
    return residual.sum() * (1.0 / n)


def lipschitz_loss_graph(
    policy: MlpNetwork,
    policy_params: list[Var],
    rsm: MlpNetwork,
    rsm_params: list[Var],
    mesh: float,
    dynamics_lipschitz: float,
    lipschitz_cap: float,
) -> Var:
    """Hinge pushing the certificate's Lipschitz constant under the cap.

    The cap bounds the grid margin ``mesh * K``: the certificate constant
    must stay below ``cap / (mesh * (L_f * (L_pi + 1) + 1))``.  Both
    networks receive gradients through their layer-norm products.
    """
    if mesh <= 0.0 or dynamics_lipschitz <= 0.0 or lipschitz_cap <= 0.0:
        raise ValueError("mesh, dynamics_lipschitz, lipschitz_cap must be positive")
    rsm_lip = rsm.lipschitz_graph(rsm_params)
    policy_lip = policy.lipschitz_graph(policy_params)
    threshold = lipschitz_cap / (
        mesh * (dynamics_lipschitz * (policy_lip + 1.0) + 1.0)
    )
    return (rsm_lip - threshold).relu()


def _grads(params: list[Var]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.value)
            for p in params]


def train_epoch(
    system: SystemSpec,
    policy: MlpNetwork,
    rsm: MlpNetwork,
    disc: Discretization,
    store: SuccessorStore,
    config: LearnerConfig,
    policy_trainable: bool,
    policy_opt: Adam,
    rsm_opt: Adam,
    rng: np.random.Generator,
) -> LossBreakdown:
    """One shuffled pass over the grid in minibatches.

    The margin constant is recomputed from the current Lipschitz
    constants before every minibatch.  With ``policy_trainable`` false
    the policy parameters are left bit-identical.
    """
    dyn_lip = system.dynamics.lipschitz_constant()
    rsm_terms, lip_terms = [], []
    order = rng.permutation(disc.n_points)
    for start in range(0, disc.n_points, config.minibatch_size):
        idx = order[start:start + config.minibatch_size]
        segment_ids, draws = store.gather(idx)
        margin_const = margin_constant(
            dyn_lip, policy.lipschitz_constant(), rsm.lipschitz_constant()
        )
        policy_params = policy.param_vars()
        rsm_params = rsm.param_vars()
        decrease = rsm_loss_graph(
            rsm, rsm_params, policy, policy_params, system,
            disc.points[idx], segment_ids, draws, disc.mesh, margin_const,
        )
        hinge = lipschitz_loss_graph(
            policy, policy_params, rsm, rsm_params,
            disc.mesh, dyn_lip, config.lipschitz_cap,
        )
        (decrease + config.reg_weight * hinge).backward()
        rsm.set_parameters(rsm_opt.step(rsm.parameters(), _grads(rsm_params)))
        if policy_trainable:
            policy.set_parameters(
                policy_opt.step(policy.parameters(), _grads(policy_params))
            )
        rsm_terms.append(float(decrease.value))
        lip_terms.append(float(hinge.value))
    return LossBreakdown(
        float(np.mean(rsm_terms)), float(np.mean(lip_terms)), config.reg_weight
    )


def pretrain_rsm(
    system: SystemSpec,
    policy: MlpNetwork,
    rsm: MlpNetwork,
    disc: Discretization,
    store: SuccessorStore,
    config: LearnerConfig,
    epochs: int,
    rng: np.random.Generator,
) -> list[LossBreakdown]:
    """Train the certificate alone for a fixed epoch budget."""
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    policy_opt = Adam(config.policy_lr)
    rsm_opt = Adam(config.rsm_lr)
    return [
        train_epoch(system, policy, rsm, disc, store, config,
                    False, policy_opt, rsm_opt, rng)
        for _ in range(epochs)
    ]


@dataclass
class RunVerdict:
    """Outcome of one full certification run."""

    outcome: str
    loop_iterations: int
    report: VerifierReport
    elapsed_seconds: float
    policy_path: str | None = None
    rsm_path: str | None = None

    def __post_init__(self):
        if self.outcome not in ("stable", "unknown"):
            raise ValueError(f"unexpected outcome {self.outcome!r}")
        if self.outcome == "stable" and not self.report.certified:
            raise ValueError("stable verdict requires a certified report")

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "loop_iterations": self.loop_iterations,
            "elapsed_seconds": self.elapsed_seconds,
            "policy_path": self.policy_path,
            "rsm_path": self.rsm_path,
            "report": self.report.to_dict(),
        }


def _build_networks(system, config, rng):
    n, m = system.state_dim, system.action_dim
    gain = config.policy_init_gain
    gain = list(gain) if isinstance(gain, (tuple, list)) else gain
    policy = init_mlp([n, *config.policy_hidden, m], "identity", rng, gain=gain)
    rsm = init_mlp([n, *config.rsm_hidden, 1], "softplus", rng)
    value = init_mlp([n, *config.value_hidden, 1], "identity", rng)
    return policy, rsm, value


def _ppo_cache_key(policy, value, config):
    blob = "|".join([
        str(config.ppo_iters), policy.params_hash(), value.params_hash(),
        repr(config.ppo),
    ])
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _pretrain_policy(system, policy, value, config, rng, cache_dir):
    """PPO pretraining with an optional on-disk cache.

    Cache entries are keyed by the initial parameters and the full PPO
    configuration, so a hit reproduces the exact result of training.
    """
    if config.ppo_iters == 0:
        return
    if cache_dir is None:
        pretrain(system, policy, value, config.ppo, config.ppo_iters, rng)
        return
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _ppo_cache_key(policy, value, config)
    policy_file = cache_dir / f"{key}_policy.npz"
    value_file = cache_dir / f"{key}_value.npz"
    if policy_file.exists() and value_file.exists():
        policy.set_parameters(MlpNetwork.load(policy_file).parameters())
        value.set_parameters(MlpNetwork.load(value_file).parameters())
        return
    history = pretrain(system, policy, value, config.ppo, config.ppo_iters, rng)
    policy.save(policy_file)
    value.save(value_file)
    save_history_csv(history, cache_dir / f"{key}_history.csv")


class _RunArtifacts:
    """Writes checkpoints, loss curves, and reports under one directory."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._loss_rows = []
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(self, loop_iter, policy, rsm):
        if self.run_dir is None:
            return None, None
        directory = self.run_dir / f"loop_{loop_iter:03d}"
        directory.mkdir(exist_ok=True)
        policy_path = directory / "policy.npz"
        rsm_path = directory / "rsm.npz"
        policy.save(policy_path)
        rsm.save(rsm_path)
        return str(policy_path), str(rsm_path)

    def report(self, loop_iter, report):
        if self.run_dir is None:
            return
        path = self.run_dir / f"loop_{loop_iter:03d}" / "report.json"
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)

    def loss_row(self, loop_iter, epoch, breakdown):
        self._loss_rows.append({
            "loop_iteration": loop_iter,
            "epoch": epoch,
            "rsm_loss": breakdown.rsm_loss,
            "lipschitz_loss": breakdown.lipschitz_loss,
            "total": breakdown.total,
        })

    def finish(self, verdict):
        if self.run_dir is None:
            return
        if self._loss_rows:
            with open(self.run_dir / "losses.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self._loss_rows[0]))
                writer.writeheader()
                writer.writerows(self._loss_rows)
        with open(self.run_dir / "verdict.json", "w") as fh:
            json.dump(verdict.to_dict(), fh, indent=2)


def run_algorithm(
    system: SystemSpec,
    config: LearnerConfig,
    seed: int,
    run_dir=None,
    ppo_cache_dir=None,
    initial_policy: MlpNetwork | None = None,
    initial_rsm: MlpNetwork | None = None,
) -> RunVerdict:
    """Full pipeline: pretrain, discretize, then verify-train until done.

    Raises :class:`ClosednessError` if the safe set is not closed under
    the pretrained policy; the caller decides how to record that.  The
    optional initial networks override the seeded construction (the
    policy override still goes through PPO if ``ppo_iters > 0``).
    """
    start = time.monotonic()
    seeds = np.random.SeedSequence(seed).spawn(5)
    rng_init, rng_ppo, rng_successors, rng_shuffle, rng_harvest = (
        np.random.default_rng(s) for s in seeds
    )
    policy, rsm, value = _build_networks(system, config, rng_init)
    if initial_policy is not None:
        system.policy_matches(initial_policy)
        policy = initial_policy.copy()
    if initial_rsm is not None:
        if initial_rsm.input_dim != system.state_dim or initial_rsm.output_dim != 1:
            raise ValueError("certificate network must map states to scalars")
        rsm = initial_rsm.copy()

    _pretrain_policy(system, policy, value, config, rng_ppo, ppo_cache_dir)
    closed, witness = check_closed_under_dynamics(system, policy)
    if not closed:
        raise ClosednessError(witness)

    disc = build_discretization(system, config.mesh, config.max_grid_points)
    store = SuccessorStore(disc.n_points, system.noise.dim)
    draws = system.noise.sample(
        rng_successors, disc.n_points * config.successor_samples
    ).reshape(disc.n_points, config.successor_samples, system.noise.dim)
    store.add(np.arange(disc.n_points), draws)

    artifacts = _RunArtifacts(run_dir)
    pretrain_rsm(system, policy, rsm, disc, store, config,
                 config.pretrain_epochs, rng_shuffle)

    policy_opt = Adam(config.policy_lr)
    rsm_opt = Adam(config.rsm_lr)

    def timed_out() -> bool:
        return time.monotonic() - start > config.timeout_seconds

    report = None
    loops_used = 0
    policy_path = rsm_path = None
    for loop_iter in range(config.max_loop_iters):
        if loop_iter > 0 and timed_out():
            break
        policy_path, rsm_path = artifacts.checkpoint(loop_iter, policy, rsm)
        report = check_all(system, policy, rsm, disc, config.cells_per_axis)
        artifacts.report(loop_iter, report)
        loops_used = loop_iter + 1
        if report.certified:
            verdict = RunVerdict("stable", loops_used, report,
                                 time.monotonic() - start,
                                 policy_path, rsm_path)
            artifacts.finish(verdict)
            return verdict
        if timed_out():
            break
        harvest_counterexamples(
            store, system, policy, disc.points,
            report.counterexample_indices, config.successor_samples,
            rng_harvest,
        )
        for epoch in range(config.epochs_per_round):
            if timed_out():
                break
            breakdown = train_epoch(
                system, policy, rsm, disc, store, config,
                config.policy_trainable, policy_opt, rsm_opt, rng_shuffle,
            )
            artifacts.loss_row(loop_iter, epoch, breakdown)
    if report is None:
        # max_loop_iters >= 1, so the loop always produced a report.
        raise AssertionError("verification loop did not run")
    verdict = RunVerdict("unknown", loops_used, report,
                         time.monotonic() - start, policy_path, rsm_path)
    artifacts.finish(verdict)
    return verdict
