"""Dense linear-algebra kernels: symmetric eigendecomposition, SPD solve,
pairwise squared distances.

All three are deterministic pure functions, accumulate in float64 regardless
of the input dtype, and refuse non-finite input at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    NonFiniteError,
    NonSymmetricError,
    NotPositiveDefiniteError,
)

# Cyclic Jacobi stops when the off-diagonal Frobenius norm drops below this,
# or after the sweep cap for ill-scaled inputs.
_JACOBI_OFF_TOL = 1e-10
_JACOBI_MAX_SWEEPS = 100

_SYMMETRY_TOL = 1e-9


def check_finite(arr, name: str = "input") -> np.ndarray:
    """Return ``arr`` as a float64 ndarray, rejecting NaN/Inf."""
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return out


@dataclass(frozen=True)
class EigResult:
    """Spectral decomposition A = V diag(w) V^T.

    ``eigenvalues`` are sorted descending; column i of ``eigenvectors`` is the
    unit eigenvector paired with eigenvalue i.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(a) -> EigResult:
    """Full eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    Raises NonSymmetricError if max|A - A^T| exceeds 1e-9 (relative to
    max(1, max|A|)), NonFiniteError on NaN/Inf.
    """
    a = check_finite(a, "a")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if float(np.abs(a - a.T).max(initial=0.0)) > _SYMMETRY_TOL * scale:
        raise NonSymmetricError("matrix asymmetry exceeds 1e-9")

    n = a.shape[0]
    work = (a + a.T) / 2.0  # kill representation roundoff before rotating
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off_sq = np.sum(work**2) - np.sum(np.diag(work) ** 2)
        if off_sq < _JACOBI_OFF_TOL**2:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                diff = work[q, q] - work[p, p]
                if abs(diff) + 100.0 * abs(apq) == abs(diff):
                    t = apq / diff  # apq negligible: first-order rotation
                else:
                    tau = diff / (2.0 * apq)
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                    if t == 0.0:  # sign(0) -> pick the +45 degree rotation
                        t = 1.0 / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                work[p, q] = 0.0
                work[q, p] = 0.0
                col_p = v[:, p].copy()
                col_q = v[:, q].copy()
                v[:, p] = c * col_p - s * col_q
                v[:, q] = s * col_p + c * col_q

    eigenvalues = np.diag(work).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return EigResult(eigenvalues=eigenvalues[order], eigenvectors=v[:, order])


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with L L^T = a; raises NotPositiveDefiniteError."""
    a = check_finite(a, "a")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        diag = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not np.isfinite(diag) or diag <= 0.0:
            raise NotPositiveDefiniteError(f"non-positive pivot at column {j}")
        lower[j, j] = np.sqrt(diag)
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def solve_spd(a, b) -> np.ndarray:
    """Solve a X = b for symmetric positive-definite ``a`` via Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides (columns).
    """
    a = check_finite(a, "a")
    b = check_finite(b, "b")
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatchError(f"rhs rows {b.shape[0]} != system size {a.shape[0]}")
    lower = cholesky(a)
    n = a.shape[0]
    # forward substitution L y = b
    y = np.zeros_like(b)
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    # back substitution L^T x = y
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    return x[:, 0] if squeeze else x


def pairwise_sq_dist(a, b) -> np.ndarray:
    """D[i, j] = squared Euclidean distance between a[i] and b[j].

    Computed from explicit differences (not the norm expansion), so identical
    points give exact zeros. Chunked over rows of ``a`` to bound memory.
    """
    a = check_finite(a, "a")
    b = check_finite(b, "b")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimensionality {a.shape[1]} != {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m))
    # ~64 MB of f64 scratch per chunk
    chunk = max(1, int(8_000_000 // max(1, m * a.shape[1])))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        diff = a[start:stop, None, :] - b[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    return out
