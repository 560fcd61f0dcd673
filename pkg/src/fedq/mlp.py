"""One-hidden-layer MLP binary classifier with hand-derived gradients.

The network is sigmoid(W2 @ relu(W1 @ x + b1) + b2). Gradients support
per-sample weights, which the mixture trainer needs for its weighted
M-step. All parameters are float64 and serialize to a flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, ZeroTotalWeight

# Probabilities are clamped away from {0, 1} so log-losses stay finite.
PROB_FLOOR = 1e-12


@dataclass
class LearnerConfig:
    """Hyperparameters for local training."""

    hidden_units: int = 32
    learning_rate: float = 0.1
    local_steps: int = 10
    batch_size: int = 32
    seed: int = 0
    grad_clip: float | None = None

    def validate(self) -> None:
        if self.hidden_units < 1:
            raise ConfigInvalid("hidden_units must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigInvalid("learning_rate must be > 0")
        if self.local_steps < 1:
            raise ConfigInvalid("local_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigInvalid("grad_clip must be > 0 when set")


@dataclass
class MlpParameters:
    """Parameter record; also reused as the container for gradients."""

    W1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (1, hidden)
    b2: float

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "MlpParameters":
        return MlpParameters(self.W1.copy(), self.b1.copy(), self.W2.copy(), float(self.b2))


def param_dim(d: int, hidden: int) -> int:
    """Length of the flattened parameter vector."""
    return hidden * d + hidden + hidden + 1


def init_params(d: int, hidden_units: int, seed: int) -> MlpParameters:
    """Glorot-uniform weights, zero biases, deterministic for a given seed."""
    if d < 1:
        raise ConfigInvalid("input dimension must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (d + hidden_units))
    W1 = rng.uniform(-lim1, lim1, size=(hidden_units, d))
    lim2 = np.sqrt(6.0 / (hidden_units + 1))
    W2 = rng.uniform(-lim2, lim2, size=(1, hidden_units))
    return MlpParameters(W1=W1, b1=np.zeros(hidden_units), W2=W2, b2=0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp for large |z|.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_matrix(p: MlpParameters, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.d:
        raise DimensionMismatch(f"expected (n, {p.d}) features, got {X.shape}")
    return X


def _raw_scores(p: MlpParameters, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre-activation caches used by both forward and backward passes."""
    Z1 = X @ p.W1.T + p.b1
    H = np.maximum(Z1, 0.0)
    z2 = H @ p.W2.ravel() + p.b2
    return Z1, H, z2


def forward_batch(p: MlpParameters, X: np.ndarray) -> np.ndarray:
    """Predicted probabilities for a feature matrix, clamped to (0, 1)."""
    X = _check_matrix(p, X)
    _, _, z2 = _raw_scores(p, X)
    return np.clip(_sigmoid(z2), PROB_FLOOR, 1.0 - PROB_FLOOR)


def forward(p: MlpParameters, x: np.ndarray) -> float:
    """Predicted probability for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.d:
        raise DimensionMismatch(f"expected a length-{p.d} vector, got shape {x.shape}")
    return float(forward_batch(p, x[None, :])[0])


def loss_batch(p: MlpParameters, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy against clamped probabilities."""
    y = np.asarray(y, dtype=np.float64)
    probs = forward_batch(p, X)
    return -(y * np.log(probs) + (1.0 - y) * np.log(1.0 - probs))


def loss(p: MlpParameters, x: np.ndarray, y: int) -> float:
    """Binary cross-entropy of a single sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.d:
        raise DimensionMismatch(f"expected a length-{p.d} vector, got shape {x.shape}")
    return float(loss_batch(p, x[None, :], np.array([y]))[0])


def weighted_grad(p: MlpParameters, X: np.ndarray, y: np.ndarray, q: np.ndarray) -> MlpParameters:
    """Gradient of (1/sum(q)) * sum_i q_i * loss(p, x_i, y_i).

    The returned record has the same shape as the parameters. The ReLU
    subgradient at 0 is taken as 0; the output clamp is treated as the
    identity for gradient purposes.
    """
    X = _check_matrix(p, X)
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if X.shape[0] == 0:
        raise ZeroTotalWeight("empty batch")
    if y.shape != (X.shape[0],) or q.shape != (X.shape[0],):
        raise DimensionMismatch("labels/weights must match the batch length")
    total = q.sum()
    if total <= 0.0:
        raise ZeroTotalWeight("sum of sample weights is zero")
    w = q / total
    Z1, H, z2 = _raw_scores(p, X)
    probs = _sigmoid(z2)
    d2 = w * (probs - y)  # (n,)
    gW2 = (d2 @ H)[None, :]
    gb2 = float(d2.sum())
    D1 = np.outer(d2, p.W2.ravel())
    D1[Z1 <= 0.0] = 0.0
    gW1 = D1.T @ X
    gb1 = D1.sum(axis=0)
    return MlpParameters(W1=gW1, b1=gb1, W2=gW2, b2=gb2)


def grad_global_norm(g: MlpParameters) -> float:
    """Euclidean norm over every gradient entry."""
    return float(np.sqrt(np.sum(flatten(g) ** 2)))


def sgd_step(p: MlpParameters, g: MlpParameters, learning_rate: float,
             grad_clip: float | None = None) -> MlpParameters:
    """One gradient-descent step, optionally clipping g by global norm."""
    scale = 1.0
    if grad_clip is not None:
        norm = grad_global_norm(g)
        if norm > grad_clip:
            scale = grad_clip / norm
    step = learning_rate * scale
    return MlpParameters(
        W1=p.W1 - step * g.W1,
        b1=p.b1 - step * g.b1,
        W2=p.W2 - step * g.W2,
        b2=float(p.b2 - step * g.b2),
    )


def predict(p: MlpParameters, x: np.ndarray, threshold: float = 0.5) -> int:
    """Hard label; a probability exactly at the threshold maps to 1."""
    return 1 if forward(p, x) >= threshold else 0


def flatten(p: MlpParameters) -> np.ndarray:
    """Row-major (W1, b1, W2, b2) concatenation as float64."""
    return np.concatenate([
        p.W1.ravel(),
        p.b1,
        p.W2.ravel(),
        np.array([p.b2], dtype=np.float64),
    ])


def unflatten(flat: np.ndarray, d: int, hidden: int) -> MlpParameters:
    """Inverse of :func:`flatten`; bit-exact round trip."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_dim(d, hidden),):
        raise DimensionMismatch(
            f"expected {param_dim(d, hidden)} entries for d={d}, hidden={hidden}, got {flat.shape}")
    offset = hidden * d
    W1 = flat[:offset].reshape(hidden, d).copy()
    b1 = flat[offset:offset + hidden].copy()
    W2 = flat[offset + hidden:offset + 2 * hidden].reshape(1, hidden).copy()
    b2 = float(flat[offset + 2 * hidden])
    return MlpParameters(W1=W1, b1=b1, W2=W2, b2=b2)


def serialize(p: MlpParameters) -> np.ndarray:
    """(d, hidden) header followed by the flat parameter vector."""
    return np.concatenate([np.array([p.d, p.hidden], dtype=np.float64), flatten(p)])


def deserialize(vec: np.ndarray) -> MlpParameters:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] < 2:
        raise DimensionMismatch("serialized parameter vector too short")
    d, hidden = int(vec[0]), int(vec[1])
    return unflatten(vec[2:], d, hidden)
