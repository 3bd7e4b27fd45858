"""Dense multi-layer perceptrons with exact gradients, interval bounds,
and Lipschitz estimates.

Networks are ReLU-activated with either an identity or a softplus output
layer.  All arithmetic is float64.  The interval pass produces a sound
enclosure of the image of a box; the Lipschitz estimate is the product of
per-layer operator norms induced by the 1-norm (largest absolute column
sum), which upper-bounds ``|f(x)-f(y)|_1 / |x-y|_1``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Var
from .boxes import Box

__all__ = ["MlpNetwork", "init_mlp", "l1_distance_net"]

_OUTPUT_ACTIVATIONS = ("identity", "softplus")


class MlpNetwork:
    """Fully connected ReLU network.  Weights are ``(out, in)`` matrices."""

    def __init__(self, weights, biases, output_activation: str = "identity"):
        if output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need equally many weight and bias arrays")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.output_activation = output_activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim does not match previous layer")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: parameters must be finite")

    # -- structure --------------------------------------------------------

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Live parameter arrays, interleaved weight/bias per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        expected = self.parameters()
        if len(params) != len(expected):
            raise ValueError("wrong number of parameter arrays")
        for i, (new, old) in enumerate(zip(params, expected)):
            if new.shape != old.shape:
                raise ValueError(f"parameter {i}: shape {new.shape} != {old.shape}")
        k = 0
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[k], dtype=np.float64)
            self.biases[i] = np.asarray(params[k + 1], dtype=np.float64)
            k += 2

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
        )

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.layer_dims).encode())
        h.update(self.output_activation.encode())
        for p in self.parameters():
            h.update(p.tobytes())
        return h.hexdigest()

    # -- evaluation -------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at one point ``(d,)`` or a batch ``(n, d)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != network dim {self.input_dim}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        if self.output_activation == "softplus":
            h = np.logaddexp(0.0, h)
        return h[0] if single else h

    def param_vars(self) -> list[Var]:
        """Graph leaves wrapping the current parameters, same order as
        :meth:`parameters`."""
        return [Var(p) for p in self.parameters()]

    def graph(self, x: np.ndarray, params: list[Var]) -> Var:
        """Differentiable forward pass through the given parameter leaves."""
        h = Var(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return self.graph_from(h, params)

    def graph_from(self, h: Var, params: list[Var]) -> Var:
        """Differentiable forward pass on an existing graph node."""
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            h = h @ w.T + b
            if i < last:
                h = h.relu()
        if self.output_activation == "softplus":
            h = h.softplus()
        return h

    # -- sound bounds -----------------------------------------------------

    def interval_forward_arrays(self, lo: np.ndarray, hi: np.ndarray):
        """Sound output enclosure for a batch of input boxes ``(n, d)``."""
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wp = np.maximum(w, 0.0)
            wn = np.minimum(w, 0.0)
            new_lo = lo @ wp.T + hi @ wn.T + b
            new_hi = hi @ wp.T + lo @ wn.T + b
            lo, hi = new_lo, new_hi
            if i < last:
                lo = np.maximum(lo, 0.0)
                hi = np.maximum(hi, 0.0)
        if self.output_activation == "softplus":
            lo = np.logaddexp(0.0, lo)
            hi = np.logaddexp(0.0, hi)
        return lo, hi

    def interval_forward(self, box: Box) -> Box:
        if box.dim != self.input_dim:
            raise ValueError(f"box dim {box.dim} != network dim {self.input_dim}")
        lo, hi = self.interval_forward_arrays(
            box.lower[None, :], box.upper[None, :]
        )
        return Box(lo[0], hi[0])

    def lipschitz_constant(self) -> float:
        """Product of per-layer 1-norm induced operator norms."""
        out = 1.0
        for w in self.weights:
            out *= float(np.max(np.abs(w).sum(axis=0)))
        return out

    def lipschitz_graph(self, params: list[Var]) -> Var:
        """Differentiable version of :meth:`lipschitz_constant`."""
        out = None
        for i in range(len(self.weights)):
            norm = params[2 * i].abs().sum(axis=0).max()
            out = norm if out is None else out * norm
        return out

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        arrays = {
            "format": np.array("stabcert-mlp-1"),
            "layer_dims": np.array(self.layer_dims, dtype=np.int64),
            "output_activation": np.array(self.output_activation),
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "MlpNetwork":
        with np.load(path, allow_pickle=False) as data:
            if str(data["format"]) != "stabcert-mlp-1":
                raise ValueError(f"{path}: not a network checkpoint")
            dims = data["layer_dims"]
            n_layers = len(dims) - 1
            weights = [data[f"w{i}"] for i in range(n_layers)]
            biases = [data[f"b{i}"] for i in range(n_layers)]
            return cls(weights, biases, str(data["output_activation"]))


def l1_distance_net(center) -> MlpNetwork:
    """Exact ``|x - center|_1`` as a two-layer ReLU network.

    Each coordinate contributes ``relu(x_i - c_i) + relu(c_i - x_i)``.
    Useful as an analytically known certificate on contracting systems.
    """
    center = np.asarray(center, dtype=np.float64)
    d = center.shape[0]
    w1 = np.vstack([np.eye(d), -np.eye(d)])
    b1 = np.concatenate([-center, center])
    w2 = np.ones((1, 2 * d))
    b2 = np.zeros(1)
    return MlpNetwork([w1, w2], [b1, b2], "identity")


def init_mlp(
    layer_dims: list[int],
    output_activation: str,
    rng: np.random.Generator,
    gain: float | list[float] = 1.0,
) -> MlpNetwork:
    """Random network with uniform ``+-gain/sqrt(fan_in)`` weights and biases.

    ``gain`` may be a scalar or one value per layer; shrinking the last
    layer's gain is the supported way to start from a small-Lipschitz,
    small-output function.
    """
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dims")
    n_layers = len(layer_dims) - 1
    gains = [float(gain)] * n_layers if np.isscalar(gain) else [float(g) for g in gain]
    if len(gains) != n_layers:
        raise ValueError("need one gain per layer")
    weights, biases = [], []
    for i in range(n_layers):
        fan_in = layer_dims[i]
        bound = gains[i] / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(layer_dims[i + 1], fan_in)))
        biases.append(rng.uniform(-bound, bound, size=layer_dims[i + 1]))
    return MlpNetwork(weights, biases, output_activation)
