"""
Dense linear algebra and seeded sampling shared by every other service.

Matrices and vectors are float64 numpy arrays. Randomness comes from RngStream, a
(master_seed, stream_id) pair mapped onto numpy's SeedSequence so that independent trials get
independent, order-insensitive streams.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from flatdiv.core.error_handler import (
    EigenDecompositionError,
    InvalidParameterError,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

DenseMatrix = NDArray[np.float64]
DenseVector = NDArray[np.float64]

_UINT64 = 2**64


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (master_seed, stream_id)."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= value < _UINT64:
                raise InvalidParameterError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        seed_seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seed_seq))

    def derive(self, *labels: int) -> 'RngStream':
        """
        Child stream identified by a path of integer labels.

        Args:
            labels: Nonnegative integers, e.g. (draw, purpose)

        Returns:
            RngStream with the same master seed and a stream id hashed from the labels
        """
        seed_seq = np.random.SeedSequence(entropy=self.stream_id, spawn_key=tuple(int(x) for x in labels))
        child_id = int(seed_seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(master_seed=self.master_seed, stream_id=child_id)


def as_matrix(a, name: str = "matrix") -> DenseMatrix:
    """Validate a 2-D finite float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> DenseVector:
    """Validate a 1-D finite float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ShapeMismatchError(f"{name} must be a nonempty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def gaussian_matrix(rng: RngStream, rows: int, cols: int, variance: float) -> DenseMatrix:
    """
    Matrix with i.i.d. N(0, variance) entries.

    Args:
        rng: Stream to draw from; the same stream always yields the same matrix
        rows: Number of rows
        cols: Number of columns
        variance: Entry variance

    Returns:
        (rows, cols) float64 array
    """
    if rows < 1 or cols < 1:
        raise InvalidParameterError(f"rows and cols must be >= 1, got ({rows}, {cols})")
    if variance < 0:
        raise InvalidParameterError(f"variance must be nonnegative, got {variance}")
    return rng.generator().normal(0.0, np.sqrt(variance), size=(rows, cols))


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"cannot multiply {a.shape} by {b.shape}",
            details={"left": list(a.shape), "right": list(b.shape)},
        )
    return a @ b


def gram(a: DenseMatrix) -> DenseMatrix:
    """AᵀA, symmetrized so the result is exactly symmetric."""
    a = as_matrix(a, "a")
    m = a.T @ a
    return (m + m.T) / 2.0


def sym_eigen(m: DenseMatrix, symmetry_tol: float = 1e-10) -> Tuple[DenseVector, DenseMatrix]:
    """
    Eigendecomposition of a symmetric matrix with eigenvalues sorted descending.

    Args:
        m: Square symmetric matrix
        symmetry_tol: Relative tolerance on ‖m - mᵀ‖

    Returns:
        (eigenvalues, eigenvectors) with m = V diag(λ) Vᵀ

    Raises:
        ShapeMismatchError: m is not square or not symmetric
        EigenDecompositionError: LAPACK failed to converge
    """
    m = as_matrix(m, "m")
    if m.shape[0] != m.shape[1]:
        raise ShapeMismatchError(f"sym_eigen needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > symmetry_tol * scale:
        raise ShapeMismatchError("sym_eigen needs a symmetric matrix")

    try:
        eigvals, eigvecs = scipy.linalg.eigh(m, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise EigenDecompositionError(f"eigh failed for {m.shape} matrix: {exc}") from exc

    return eigvals[::-1].copy(), eigvecs[:, ::-1].copy()


@dataclass(frozen=True)
class Spectrum:
    """Cached eigendecomposition of a gram matrix."""

    eigvals: DenseVector
    eigvecs: DenseMatrix

    @classmethod
    def of(cls, m: DenseMatrix) -> 'Spectrum':
        eigvals, eigvecs = sym_eigen(m)
        return cls(eigvals=eigvals, eigvecs=eigvecs)

    @property
    def top(self) -> float:
        return float(self.eigvals[0])

    def apply(self, weights: DenseVector, x):
        """V diag(weights) Vᵀ x for a vector or a stack of row vectors."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.eigvecs @ (weights * (self.eigvecs.T @ x))
        return ((x @ self.eigvecs) * weights) @ self.eigvecs.T
