"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from fedq.data import EnvironmentShard


def make_shard(train_X, train_y, test_X=None, test_y=None, env_id=0,
               id_offset=0) -> EnvironmentShard:
    """Build a shard directly from arrays, synthesizing row ids."""
    train_X = np.asarray(train_X, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if test_X is None:
        test_X = np.empty((0, train_X.shape[1]))
        test_y = np.empty(0, dtype=np.int64)
    test_X = np.asarray(test_X, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n_train, n_test = train_X.shape[0], test_X.shape[0]
    return EnvironmentShard(
        env_id=env_id,
        train_ids=np.arange(id_offset, id_offset + n_train),
        test_ids=np.arange(id_offset + n_train, id_offset + n_train + n_test),
        train_X=train_X,
        train_y=train_y,
        test_X=test_X,
        test_y=test_y,
    )


def finite_difference(fn, flat: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    flat = np.asarray(flat, dtype=np.float64)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += eps
        down = flat.copy()
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2.0 * eps)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float = 1e-4, floor: float = 1e-6) -> None:
    """Relative comparison wherever the gradient is meaningfully nonzero."""
    mask = np.abs(numeric) > floor
    if not mask.any():
        return
    rel = np.abs(analytic[mask] - numeric[mask]) / np.abs(numeric[mask])
    assert rel.max() < rel_tol, f"max relative gradient error {rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
