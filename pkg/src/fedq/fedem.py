"""Federated EM over a mixture of shared component models.

Each environment t keeps a simplex weight vector pi_t over the M global
components. A round alternates an E-step (per-sample responsibilities),
an M-step for pi_t (column means) and for each component (weighted local
SGD), and a sample-count-weighted aggregation of the local copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mlp
from .errors import (
    AllZeroRow,
    EmptyPosteriors,
    ShapeMismatch,
    ZeroTotalWeight,
)
from .mlp import LearnerConfig, MlpParameters


@dataclass
class ComponentSet:
    """The M global component models; all share (d, hidden)."""

    components: list[MlpParameters]

    @property
    def num_components(self) -> int:
        return len(self.components)

    def copy(self) -> "ComponentSet":
        return ComponentSet([c.copy() for c in self.components])


def responsibilities(losses: np.ndarray, pi_t: np.ndarray) -> np.ndarray:
    """Posterior component probabilities from per-sample losses.

    Row i is softmax over m of log(pi_t[m]) - losses[i, m], i.e. each entry
    is proportional to pi_t[m] * exp(-loss). Computed in log space; a zero
    mixture weight contributes log 0 = -inf and therefore zero posterior.
    """
    losses = np.asarray(losses, dtype=np.float64)
    pi_t = np.asarray(pi_t, dtype=np.float64)
    if losses.ndim != 2 or pi_t.shape != (losses.shape[1],):
        raise ShapeMismatch("losses must be (n, M) with pi_t of length M")
    if not np.any(pi_t > 0.0):
        raise AllZeroRow("every mixture weight is zero")
    with np.errstate(divide="ignore"):
        log_pi = np.where(pi_t > 0.0, np.log(pi_t), -np.inf)
    logits = log_pi[None, :] - losses
    shift = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shift)
    return expd / expd.sum(axis=1, keepdims=True)


def component_losses(X: np.ndarray, y: np.ndarray, theta: ComponentSet) -> np.ndarray:
    """Per-sample loss under each component; column m belongs to component m."""
    return np.column_stack([mlp.loss_batch(c, X, y) for c in theta.components])


def e_step(shard, theta: ComponentSet, pi_t: np.ndarray) -> np.ndarray:
    """Responsibility matrix (n_t, M) over a shard's training samples."""
    losses = component_losses(shard.train_X, shard.train_y, theta)
    return responsibilities(losses, pi_t)


def m_step_pi(q: np.ndarray) -> np.ndarray:
    """Updated mixture weights: the column mean of the responsibilities."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise EmptyPosteriors("posterior matrix has no rows")
    return q.mean(axis=0)


def m_step_theta(shard, q: np.ndarray, theta_m: MlpParameters, m: int,
                 cfg: LearnerConfig, seed: int | None = None) -> MlpParameters:
    """Local update of one component via weighted mini-batch SGD.

    Runs cfg.local_steps steps on the q[:, m]-weighted cross-entropy,
    starting from a copy of theta_m. Batches covering only zero-weight
    samples are skipped. The global record is never mutated.
    """
    X, y = shard.train_X, shard.train_y
    col = np.asarray(q, dtype=np.float64)[:, m]
    if col.sum() <= 0.0:
        raise ZeroTotalWeight(f"component {m} has zero responsibility mass on env {shard.env_id}")
    n = X.shape[0]
    theta = theta_m.copy()
    full_batch = cfg.batch_size >= n
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    for _ in range(cfg.local_steps):
        if full_batch:
            Xb, yb, qb = X, y, col
        else:
            idx = rng.choice(n, size=cfg.batch_size, replace=False)
            Xb, yb, qb = X[idx], y[idx], col[idx]
            if qb.sum() <= 0.0:
                continue
        g = mlp.weighted_grad(theta, Xb, yb, qb)
        theta = mlp.sgd_step(theta, g, cfg.learning_rate, cfg.grad_clip)
    return theta


def aggregate(contribs: list[tuple[int, MlpParameters, int]]) -> MlpParameters:
    """Sample-count-weighted mean of local parameter copies.

    ``contribs`` holds (env_id, parameters, n_t) triples; the sum runs in
    ascending env_id order so the result is invariant to list order. The
    denominator is the total count over the contributing environments.
    """
    if not contribs:
        raise ValueError("aggregate needs at least one contribution")
    ordered = sorted(contribs, key=lambda c: c[0])
    d, hidden = ordered[0][1].d, ordered[0][1].hidden
    for _, theta, n_t in ordered:
        if (theta.d, theta.hidden) != (d, hidden):
            raise ShapeMismatch("all contributions must share (d, hidden)")
        if n_t < 1:
            raise ValueError("every contribution needs n_t >= 1")
    n = sum(n_t for _, _, n_t in ordered)
    acc = np.zeros(mlp.param_dim(d, hidden))
    for _, theta, n_t in ordered:
        acc = acc + (n_t / n) * mlp.flatten(theta)
    return mlp.unflatten(acc, d, hidden)


def local_nll(shard, theta: ComponentSet, pi_t: np.ndarray) -> float:
    """Mean negative log-likelihood of a shard under the mixture.

    Per sample: -ln sum_m pi_t[m] * exp(-loss_m), evaluated with
    log-sum-exp stabilization. Clamped losses keep the value finite.
    """
    losses = component_losses(shard.train_X, shard.train_y, theta)
    pi_t = np.asarray(pi_t, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_pi = np.where(pi_t > 0.0, np.log(pi_t), -np.inf)
    logits = log_pi[None, :] - losses
    peak = logits.max(axis=1)
    lse = peak + np.log(np.exp(logits - peak[:, None]).sum(axis=1))
    return float(-lse.mean())


def global_nll(shards, theta: ComponentSet, Pi: np.ndarray) -> float:
    """Train-size-weighted average of local negative log-likelihoods."""
    counts = np.array([s.n_t for s in shards], dtype=np.float64)
    n = counts.sum()
    total = 0.0
    for shard, n_t in zip(shards, counts):
        total += (n_t / n) * local_nll(shard, theta, Pi[shard.env_id])
    return float(total)


def mixture_predict_batch(X: np.ndarray, theta: ComponentSet, pi_t: np.ndarray) -> np.ndarray:
    """Mixture probability sum_m pi_t[m] * forward_m(x) for each row."""
    pi_t = np.asarray(pi_t, dtype=np.float64)
    out = np.zeros(np.asarray(X).shape[0])
    for weight, comp in zip(pi_t, theta.components):
        out = out + weight * mlp.forward_batch(comp, X)
    return out


def mixture_predict(x: np.ndarray, theta: ComponentSet, pi_t: np.ndarray) -> float:
    """Mixture probability for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    return float(mixture_predict_batch(x[None, :], theta, pi_t)[0])
