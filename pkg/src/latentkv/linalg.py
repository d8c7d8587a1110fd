"""Dense linear-algebra kernels shared by every conversion stage.

All math is done in 64-bit floats; the file format is the only place a
32-bit representation may appear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

# Maximum tolerated asymmetry before sym_eig refuses the input.
SYMMETRY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigResult:
    """Symmetric eigendecomposition, eigenvalues sorted descending.

    ``eigenvectors[:, j]`` pairs with ``eigenvalues[j]``; columns are
    orthonormal.
    """

    eigenvalues: Array
    eigenvectors: Array


def sym_eig(s: Array) -> EigResult:
    """Eigendecomposition of a symmetric matrix.

    The input is symmetrised as (S + S^T)/2 before solving; inputs whose
    asymmetry exceeds ``SYMMETRY_TOL`` are rejected.  Eigenvalues come back
    in descending order, ties keeping the solver's stable order.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("sym_eig input contains non-finite entries")
    if s.size:
        defect = float(np.max(np.abs(s - s.T)))
        if defect > SYMMETRY_TOL:
            raise ValueError(f"input is not symmetric (defect {defect:.3e})")
    sym = (s + s.T) / 2.0
    w, v = np.linalg.eigh(sym)
    order = np.argsort(-w, kind="stable")
    return EigResult(eigenvalues=w[order], eigenvectors=v[:, order])


def covariance(x: Array) -> Array:
    """Second-moment matrix X^T X / (n - 1) of n row samples.

    Deliberately does not subtract the mean: callers that want a centred
    covariance subtract the column means first.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"covariance needs a 2-D sample matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {n}")
    return x.T @ x / (n - 1)


def orthonormal_defect(u: Array) -> float:
    """max |U^T U - I|, zero for matrices with orthonormal columns."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"orthonormal_defect needs a 2-D matrix, got shape {u.shape}")
    if u.shape[1] == 0:
        return 0.0
    gram = u.T @ u
    return float(np.max(np.abs(gram - np.eye(u.shape[1]))))


def random_orthogonal(dim: int, rng: np.random.Generator) -> Array:
    """Draw an orthogonal matrix from the Haar distribution via QR."""
    if dim == 0:
        return np.zeros((0, 0))
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # Fix the QR sign ambiguity so the distribution is uniform.
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def canonical_signs(vectors: Array) -> Array:
    """Flip eigenvector columns so the largest-magnitude entry is positive.

    Makes PCA bases deterministic up to the solver's tie handling.
    """
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0.0] = 1.0
    return vectors * signs
