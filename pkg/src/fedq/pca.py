"""PCA compression of flattened model parameters into a small state vector.

The projection is fit once on the parameter vectors uploaded during the
initialization round and then frozen, so the selection agent sees a
stationary state space for the rest of the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .errors import DimensionMismatch
from .fedem import ComponentSet

# Residuals below this norm are treated as linearly dependent during the
# deterministic completion of a rank-deficient basis.
_COMPLETION_TOL = 1e-10


@dataclass
class PcaProjection:
    """Frozen linear projection onto the top principal directions."""

    mean: np.ndarray   # (D,)
    basis: np.ndarray  # (d_pca, D), orthonormal rows
    d_pca: int
    rank_deficient: bool = False
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]


def _sign_fix(row: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry made positive; ties resolve to the first index.
    j = int(np.argmax(np.abs(row)))
    return -row if row[j] < 0.0 else row


def fit_pca(rows: np.ndarray, d_pca: int) -> PcaProjection:
    """Fit a projection from an (R, D) matrix of flattened parameters.

    Basis rows are the top right singular vectors of the row-centered
    matrix in descending singular-value order. If the data has rank below
    d_pca, the basis is completed deterministically with unit vectors
    orthogonalized against the principal rows and the projection is
    flagged rank_deficient instead of failing.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionMismatch("fit matrix must be 2-D")
    R, D = rows.shape
    if R < 2:
        raise ValueError("need at least two rows to fit a projection")
    if not 1 <= d_pca <= min(D, R - 1):
        raise ValueError(f"d_pca must be in [1, {min(D, R - 1)}], got {d_pca}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(R, D) * np.finfo(np.float64).eps * (svals[0] if svals.size else 0.0)
    rank = int(np.sum(svals > tol))
    keep = min(rank, d_pca)
    basis_rows = [_sign_fix(vt[i]) for i in range(keep)]
    deficient = keep < d_pca
    if deficient:
        for k in range(D):
            if len(basis_rows) == d_pca:
                break
            v = np.zeros(D)
            v[k] = 1.0
            for b in basis_rows:
                v = v - (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > _COMPLETION_TOL:
                basis_rows.append(_sign_fix(v / norm))
    basis = np.vstack(basis_rows)
    return PcaProjection(mean=mean, basis=basis, d_pca=d_pca,
                         rank_deficient=deficient, singular_values=svals[:d_pca].copy())


def project(proj: PcaProjection, flat: np.ndarray) -> np.ndarray:
    """Coordinates of a flattened parameter vector in the fitted basis."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (proj.input_dim,):
        raise DimensionMismatch(f"expected length {proj.input_dim}, got {flat.shape}")
    return proj.basis @ (flat - proj.mean)


def build_state(proj: PcaProjection, theta: ComponentSet) -> np.ndarray:
    """Concatenated per-component projections, in component order."""
    return np.concatenate([project(proj, mlp.flatten(c)) for c in theta.components])


def projection_to_vector(proj: PcaProjection) -> np.ndarray:
    """(D, d_pca) header followed by mean and row-major basis, all float64."""
    return np.concatenate([
        np.array([proj.input_dim, proj.d_pca], dtype=np.float64),
        proj.mean,
        proj.basis.ravel(),
    ])


def projection_from_vector(vec: np.ndarray) -> PcaProjection:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] < 2:
        raise DimensionMismatch("serialized projection too short")
    D, d_pca = int(vec[0]), int(vec[1])
    if vec.shape[0] != 2 + D + d_pca * D:
        raise DimensionMismatch("serialized projection has the wrong length")
    mean = vec[2:2 + D].copy()
    basis = vec[2 + D:].reshape(d_pca, D).copy()
    return PcaProjection(mean=mean, basis=basis, d_pca=d_pca)
