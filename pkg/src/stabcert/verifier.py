"""Certificate checking on a finite cover of the state space.

The decrease condition of a ranking supermartingale is verified at grid
points whose 1-norm mesh is fine enough that, together with a margin
proportional to the involved Lipschitz constants, the discrete check
implies the condition everywhere outside the safe set.  Expectations
over the disturbance are upper-bounded soundly by splitting the noise
support into cells and propagating each cell through the dynamics and
the certificate network with interval arithmetic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .nets import MlpNetwork
from .system import SystemSpec

__all__ = [
    "Discretization",
    "GridSizeError",
    "SuccessorStore",
    "VerifierReport",
    "build_discretization",
    "margin_constant",
    "bound_expectation_upper",
    "check_all",
    "harvest_counterexamples",
]


class GridSizeError(ValueError):
    """The requested mesh would need more grid points than allowed."""


@dataclass
class Discretization:
    """Grid points covering the state box outside the safe interior."""

    points: np.ndarray
    mesh: float
    spacing: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)


def build_discretization(
    system: SystemSpec, mesh: float, max_points: int = 1_000_000
) -> Discretization:
    """Regular grid with per-axis spacing ``mesh / state_dim``.

    Any state outside the safe box is then within 1-norm distance
    ``mesh / 2`` of a kept grid point.  Points lying deeper than one
    spacing inside the safe box are dropped; the shell just inside the
    boundary is kept so coverage holds right up to the safe set.
    """
    if mesh <= 0.0:
        raise ValueError("mesh must be positive")
    box = system.state_box
    n = box.dim
    target = mesh / n
    counts = np.maximum(np.ceil(box.widths / target).astype(int) + 1, 2)
    if int(np.prod(counts.astype(np.float64))) > max_points:
        raise GridSizeError(
            f"mesh {mesh} needs {int(np.prod(counts.astype(np.float64)))} grid points"
            f" (cap {max_points})"
        )
    axes = [np.linspace(box.lower[i], box.upper[i], counts[i]) for i in range(n)]
    spacing = np.array([ax[1] - ax[0] for ax in axes])
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    safe = system.safe_box
    deep_inside = np.all(
        (pts > safe.lower + spacing) & (pts < safe.upper - spacing), axis=1
    )
    return Discretization(pts[~deep_inside], float(mesh), spacing)


def margin_constant(
    dynamics_lipschitz: float, policy_lipschitz: float, rsm_lipschitz: float
) -> float:
    """Constant converting the grid mesh into a sound decrease margin."""
    return rsm_lipschitz * (dynamics_lipschitz * (policy_lipschitz + 1.0) + 1.0)


def bound_expectation_upper(
    system: SystemSpec,
    policy: MlpNetwork,
    rsm: MlpNetwork,
    points: np.ndarray,
    cells_per_axis: int = 8,
    slack: float = 1e-9,
) -> np.ndarray:
    """Sound upper bound on ``E[V(f(x, pi(x), w))]`` per grid point.

    The action is evaluated exactly at each point; only the disturbance
    is interval-abstracted, cell by cell.  Each cell contributes its
    probability times the upper end of the certificate enclosure, padded
    outward by ``slack``.
    """
    if rsm.output_dim != 1:
        raise ValueError("certificate network must have a scalar output")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    system.policy_matches(policy)
    dyn = system.dynamics
    actions = np.atleast_2d(policy.forward(pts))
    base = pts @ dyn.a.T + actions @ dyn.b.T
    cell_los, cell_his, cell_probs = system.noise.partition(cells_per_axis)
    total = np.zeros(len(pts))
    box = system.state_box
    for c_lo, c_hi, prob in zip(cell_los, cell_his, cell_probs):
        lo = box.clip(base + c_lo)
        hi = box.clip(base + c_hi)
        _, v_hi = rsm.interval_forward_arrays(lo, hi)
        total += prob * (v_hi[:, 0] + slack)
    if np.asarray(points).ndim == 1:
        return total[0]
    return total


@dataclass
class VerifierReport:
    """Outcome of one full pass over the discretization."""

    certified: bool
    mesh: float
    margin_const: float
    rsm_lipschitz: float
    policy_lipschitz: float
    dynamics_lipschitz: float
    n_points: int
    counterexample_indices: np.ndarray
    counterexample_points: np.ndarray
    violation_margins: np.ndarray
    elapsed_seconds: float = 0.0

    @property
    def n_counterexamples(self) -> int:
        return len(self.counterexample_indices)

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "mesh": self.mesh,
            "margin_const": self.margin_const,
            "rsm_lipschitz": self.rsm_lipschitz,
            "policy_lipschitz": self.policy_lipschitz,
            "dynamics_lipschitz": self.dynamics_lipschitz,
            "n_points": self.n_points,
            "n_counterexamples": self.n_counterexamples,
            "counterexample_indices": self.counterexample_indices.tolist(),
            "counterexample_points": self.counterexample_points.tolist(),
            "violation_margins": self.violation_margins.tolist(),
            "elapsed_seconds": self.elapsed_seconds,
        }


def check_all(
    system: SystemSpec,
    policy: MlpNetwork,
    rsm: MlpNetwork,
    disc: Discretization,
    cells_per_axis: int = 8,
) -> VerifierReport:
    """Check the strict decrease condition at every grid point.

    Assumes the safe box was already shown closed under the dynamics.
    The condition at a point is
    ``bound_expectation_upper < V(point) - mesh * margin_const``.
    """
    start = time.monotonic()
    l_f = system.dynamics.lipschitz_constant()
    l_pi = policy.lipschitz_constant()
    l_v = rsm.lipschitz_constant()
    k = margin_constant(l_f, l_pi, l_v)
    values = rsm.forward(disc.points)[:, 0]
    upper = bound_expectation_upper(system, policy, rsm, disc.points, cells_per_axis)
    required = values - disc.mesh * k
    violated = np.flatnonzero(~(upper < required))
    return VerifierReport(
        certified=violated.size == 0,
        mesh=disc.mesh,
        margin_const=k,
        rsm_lipschitz=l_v,
        policy_lipschitz=l_pi,
        dynamics_lipschitz=l_f,
        n_points=disc.n_points,
        counterexample_indices=violated,
        counterexample_points=disc.points[violated],
        violation_margins=(upper - required)[violated],
        elapsed_seconds=time.monotonic() - start,
    )


class SuccessorStore:
    """Per-grid-point collections of sampled disturbances.

    Successor states are reconstructed on demand by re-applying the
    dynamics with the stored draws, so gradients can flow through the
    current policy while the randomness stays fixed.  Lists only grow.
    """

    def __init__(self, n_points: int, noise_dim: int):
        self.n_points = n_points
        self.noise_dim = noise_dim
        self._draws: list[np.ndarray | None] = [None] * n_points

    def add(self, indices: np.ndarray, draws: np.ndarray) -> None:
        """Append ``draws[i]`` (shape ``(k, noise_dim)``) to each index."""
        for j, idx in enumerate(indices):
            new = draws[j]
            old = self._draws[idx]
            self._draws[idx] = new.copy() if old is None else np.vstack([old, new])

    def count(self, idx: int) -> int:
        d = self._draws[idx]
        return 0 if d is None else len(d)

    @property
    def total(self) -> int:
        return sum(self.count(i) for i in range(self.n_points))

    def gather(self, indices: np.ndarray):
        """Flattened draws for the given points.

        Returns ``(segment_ids, draws)`` where ``segment_ids[i]`` maps
        each draw row to its position in ``indices``; points without
        draws are skipped (their positions never appear).
        """
        segs, rows = [], []
        for pos, idx in enumerate(indices):
            d = self._draws[idx]
            if d is not None and len(d):
                segs.append(np.full(len(d), pos, dtype=np.int64))
                rows.append(d)
        if not rows:
            return np.empty(0, dtype=np.int64), np.empty((0, self.noise_dim))
        return np.concatenate(segs), np.vstack(rows)

    def successor_states(
        self, system: SystemSpec, policy: MlpNetwork, points: np.ndarray, idx: int
    ) -> np.ndarray:
        """Materialize this point's successors under the current policy."""
        d = self._draws[idx]
        if d is None:
            return np.empty((0, system.state_dim))
        u = policy.forward(points[idx])
        return system.dynamics.step(
            np.broadcast_to(points[idx], (len(d), system.state_dim)),
            np.broadcast_to(np.atleast_1d(u), (len(d), system.action_dim)),
            d,
        )


def harvest_counterexamples(
    store: SuccessorStore,
    system: SystemSpec,
    policy: MlpNetwork,
    points: np.ndarray,
    indices: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``n_samples`` fresh disturbances per index and append them.

    Returns the successor states generated under the current policy,
    shape ``(len(indices), n_samples, state_dim)``.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample per point")
    indices = np.asarray(indices, dtype=np.int64)
    k = len(indices)
    draws = system.noise.sample(rng, k * n_samples).reshape(k, n_samples, -1)
    store.add(indices, draws)
    pts = points[indices]
    u = np.atleast_2d(policy.forward(pts))
    states = system.dynamics.step(
        np.repeat(pts, n_samples, axis=0),
        np.repeat(u, n_samples, axis=0),
        draws.reshape(k * n_samples, -1),
    )
    return states.reshape(k, n_samples, -1)
