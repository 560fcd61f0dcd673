"""Q-learning selection agent over compressed model states.

One Q-output per environment; a round's action is a set of N distinct
environments sampled from softmax(Q / tau) without replacement. The value
of a set action is the mean of its members' Q-outputs, which reduces to
vanilla single-action Q-learning at N = 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, EmptyBuffer


@dataclass
class DqnConfig:
    """Agent hyperparameters; xi is the reward base, tau the softmax temperature."""

    gamma: float = 0.95
    xi: float = 64.0
    q_learning_rate: float = 1e-3
    minibatch: int = 32
    capacity: int = 1000
    tau: float = 1.0
    q_hidden: int = 64
    d_pca: int = 16

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigInvalid("gamma must be in [0, 1)")
        if self.xi <= 1.0:
            raise ConfigInvalid("xi must be > 1")
        if self.q_learning_rate <= 0:
            raise ConfigInvalid("q_learning_rate must be > 0")
        if self.minibatch < 1:
            raise ConfigInvalid("minibatch must be >= 1")
        if self.capacity < 1:
            raise ConfigInvalid("capacity must be >= 1")
        if self.tau <= 0:
            raise ConfigInvalid("tau must be > 0")
        if self.q_hidden < 1:
            raise ConfigInvalid("q_hidden must be >= 1")
        if self.d_pca < 1:
            raise ConfigInvalid("d_pca must be >= 1")


@dataclass
class QNetwork:
    """One-hidden-layer ReLU network with a linear output per environment."""

    W1: np.ndarray  # (hidden, state_dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (num_envs, hidden)
    b2: np.ndarray  # (num_envs,)

    @property
    def state_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def num_envs(self) -> int:
        return self.W2.shape[0]

    def copy(self) -> "QNetwork":
        return QNetwork(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


@dataclass
class Transition:
    """One stored experience: state, selected set, reward, next state."""

    state: np.ndarray
    action: tuple[int, ...]
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO store of transitions; eviction is strictly oldest-first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigInvalid("capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)


def init_qnetwork(state_dim: int, hidden: int, num_envs: int, seed: int) -> QNetwork:
    """Glorot-uniform weights, zero biases, deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (state_dim + hidden))
    W1 = rng.uniform(-lim1, lim1, size=(hidden, state_dim))
    lim2 = np.sqrt(6.0 / (hidden + num_envs))
    W2 = rng.uniform(-lim2, lim2, size=(num_envs, hidden))
    return QNetwork(W1=W1, b1=np.zeros(hidden), W2=W2, b2=np.zeros(num_envs))


def q_values(qnet: QNetwork, state: np.ndarray) -> np.ndarray:
    """Q-vector with one entry per environment; no output activation."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (qnet.state_dim,):
        raise DimensionMismatch(f"expected state of length {qnet.state_dim}, got {state.shape}")
    h = np.maximum(qnet.W1 @ state + qnet.b1, 0.0)
    return qnet.W2 @ h + qnet.b2


def softmax_probs(q: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def select_environments(qnet: QNetwork, state: np.ndarray, n_select: int,
                        tau: float, rng: np.random.Generator) -> list[int]:
    """Sample N distinct environment ids from softmax(Q / tau).

    Ids are drawn one at a time with the remaining probabilities
    renormalized after each draw. Returns the ids in ascending order.
    """
    probs = softmax_probs(q_values(qnet, state), tau)
    num_envs = probs.shape[0]
    if not 1 <= n_select <= num_envs:
        raise ConfigInvalid(f"n_select must be in [1, {num_envs}], got {n_select}")
    remaining = list(range(num_envs))
    chosen: list[int] = []
    for _ in range(n_select):
        sub = probs[remaining]
        cdf = np.cumsum(sub / sub.sum())
        pick = int(np.searchsorted(cdf, rng.random(), side="right"))
        pick = min(pick, len(remaining) - 1)
        chosen.append(remaining.pop(pick))
    return sorted(chosen)


def reward(accuracy: float, target: float, xi: float) -> float:
    """Exponential accuracy-gap reward xi**(accuracy - target) - 1."""
    return float(xi ** (accuracy - target) - 1.0)


def store(buffer: ReplayBuffer, transition: Transition) -> None:
    """Append a transition, evicting the oldest entry when full."""
    buffer.entries.append(transition)


def sample_minibatch(buffer: ReplayBuffer, batch: int, rng: np.random.Generator) -> list[Transition]:
    """B uniform draws: with replacement while the buffer is smaller than B."""
    n = len(buffer)
    if n == 0:
        raise EmptyBuffer("cannot sample from an empty replay buffer")
    if n < batch:
        idx = rng.integers(0, n, size=batch)
    else:
        idx = rng.choice(n, size=batch, replace=False)
    return [buffer.entries[int(i)] for i in idx]


def td_target(transition: Transition, qnet: QNetwork, gamma: float) -> float:
    """Bootstrapped target; the max runs over every single-environment output."""
    if transition.terminal:
        return float(transition.reward)
    return float(transition.reward + gamma * q_values(qnet, transition.next_state).max())


def composite_q(qnet: QNetwork, state: np.ndarray, action: tuple[int, ...]) -> float:
    """Value of a set action: the mean of the selected environments' outputs."""
    q = q_values(qnet, state)
    return float(q[list(action)].mean())


def q_grad(qnet: QNetwork, minibatch: list[Transition], targets: np.ndarray) -> QNetwork:
    """Gradient of (1/B) * sum_j (y_j - mean_{i in a_j} Q(s_j)[i])^2.

    Targets are constants; no gradient flows through them. The returned
    record has the same shape as the network parameters.
    """
    B = len(minibatch)
    S = np.vstack([t.state for t in minibatch])
    Z1 = S @ qnet.W1.T + qnet.b1
    H = np.maximum(Z1, 0.0)
    Q = H @ qnet.W2.T + qnet.b2  # (B, num_envs)
    mask = np.zeros_like(Q)
    for j, t in enumerate(minibatch):
        ids = list(t.action)
        mask[j, ids] = 1.0 / len(ids)
    qhat = (Q * mask).sum(axis=1)
    err = -2.0 * (np.asarray(targets, dtype=np.float64) - qhat) / B  # (B,)
    dQ = err[:, None] * mask
    gW2 = dQ.T @ H
    gb2 = dQ.sum(axis=0)
    D1 = dQ @ qnet.W2
    D1[Z1 <= 0.0] = 0.0
    gW1 = D1.T @ S
    gb1 = D1.sum(axis=0)
    return QNetwork(W1=gW1, b1=gb1, W2=gW2, b2=gb2)


def train_step(qnet: QNetwork, minibatch: list[Transition], gamma: float,
               q_learning_rate: float) -> QNetwork:
    """One SGD step on the squared TD error of a minibatch.

    Targets are computed against the network as passed in, i.e. the
    parameters from before this step.
    """
    if not minibatch:
        raise EmptyBuffer("minibatch is empty")
    targets = np.array([td_target(t, qnet, gamma) for t in minibatch])
    g = q_grad(qnet, minibatch, targets)
    return QNetwork(
        W1=qnet.W1 - q_learning_rate * g.W1,
        b1=qnet.b1 - q_learning_rate * g.b1,
        W2=qnet.W2 - q_learning_rate * g.W2,
        b2=qnet.b2 - q_learning_rate * g.b2,
    )


def q_flatten(qnet: QNetwork) -> np.ndarray:
    """Row-major (W1, b1, W2, b2) concatenation, used by gradient checks."""
    return np.concatenate([qnet.W1.ravel(), qnet.b1, qnet.W2.ravel(), qnet.b2])


def q_unflatten(flat: np.ndarray, state_dim: int, hidden: int, num_envs: int) -> QNetwork:
    flat = np.asarray(flat, dtype=np.float64)
    sizes = [hidden * state_dim, hidden, num_envs * hidden, num_envs]
    if flat.shape != (sum(sizes),):
        raise DimensionMismatch("flat vector length does not match the declared shape")
    a = flat[:sizes[0]].reshape(hidden, state_dim).copy()
    b = flat[sizes[0]:sizes[0] + sizes[1]].copy()
    c = flat[sizes[0] + sizes[1]:sizes[0] + sizes[1] + sizes[2]].reshape(num_envs, hidden).copy()
    d = flat[sizes[0] + sizes[1] + sizes[2]:].copy()
    return QNetwork(W1=a, b1=b, W2=c, b2=d)
