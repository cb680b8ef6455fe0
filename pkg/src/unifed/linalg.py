"""Dense linear algebra used throughout the package.

Matrices and vectors are plain ``numpy.ndarray`` objects (float64).  The
eigensolver is a cyclic Jacobi method with a round-robin pair ordering, so
each sweep applies ``n/2`` disjoint rotations at a time with vectorized
numpy operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-9


class LinalgError(ValueError):
    pass


class NotPositiveDefiniteError(LinalgError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(LinalgError):
    pass


@dataclass(frozen=True)
class JacobiConfig:
    tol: float = 1e-12
    max_sweeps: int = 100


def as_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise LinalgError(f"expected a vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise LinalgError("vector has non-finite entries")
    return w


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise LinalgError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix has non-finite entries")
    return a


def check_symmetric(a) -> np.ndarray:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise LinalgError(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise LinalgError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return a


def s_norm(w, S) -> float:
    """Induced norm ``sqrt(w^T S w)`` for a positive definite ``S``."""
    w = as_vector(w)
    S = check_symmetric(S)
    if S.shape[0] != w.shape[0]:
        raise LinalgError(f"dimension mismatch: w has {w.shape[0]}, S is {S.shape}")
    q = float(w @ S @ w)
    if q <= -1e-12 or (q <= 0.0 and np.any(w != 0.0)):
        raise NotPositiveDefiniteError(f"w^T S w = {q:.3e} is not positive")
    return float(np.sqrt(max(q, 0.0)))


def cholesky(S) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == S``.

    Raises ``NotPositiveDefiniteError`` carrying the index of the first
    non-positive pivot.
    """
    S = check_symmetric(S)
    n = S.shape[0]
    L = np.zeros_like(S)
    for j in range(n):
        pivot = S[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite: pivot {j} = {pivot:.3e}", pivot=j
            )
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1:, j] = (S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def is_positive_definite(S) -> bool:
    try:
        cholesky(S)
    except LinalgError:
        return False
    return True


def _round_robin(n):
    """Pairings for a round-robin tournament over ``n`` players (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def symmetric_eigh(A, config: JacobiConfig | None = None):
    """Eigenvalues (ascending) and eigenvectors of a symmetric matrix.

    Converges when the off-diagonal Frobenius norm drops below
    ``config.tol * ||A||_F``.
    """
    config = config or JacobiConfig()
    A = check_symmetric(A).copy()
    n = A.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    # Symmetrize exactly; the rotations below assume it.
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    fro = float(np.linalg.norm(A))
    if fro == 0.0 or n == 1:
        return np.diag(A).copy(), V

    size = n + (n % 2)
    if size != n:
        # Padding with a decoupled zero row keeps the pairing schedule even.
        A = np.pad(A, ((0, 1), (0, 1)))
        V = np.pad(V, ((0, 1), (0, 1)))
        V[n, n] = 1.0
    schedule = _round_robin(size)

    def off_norm(M):
        off = M.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.linalg.norm(off))

    for _ in range(config.max_sweeps):
        if off_norm(A) < config.tol * fro:
            break
        for p, q in schedule:
            lo = np.minimum(p, q)
            hi = np.maximum(p, q)
            app = A[lo, lo]
            aqq = A[hi, hi]
            apq = A[lo, hi]
            nz = apq != 0.0
            c = np.ones_like(apq)
            s = np.zeros_like(apq)
            if np.any(nz):
                tau = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                sign = np.where(tau >= 0.0, 1.0, -1.0)
                t = sign / (np.abs(tau) + np.hypot(1.0, tau))
                c[nz] = 1.0 / np.sqrt(1.0 + t * t)
                s[nz] = t * c[nz]
            # Columns then rows: A <- J^T A J with disjoint plane rotations.
            colp = A[:, lo].copy()
            colq = A[:, hi]
            A[:, lo] = c * colp - s * colq
            A[:, hi] = s * colp + c * colq
            rowp = A[lo, :].copy()
            rowq = A[hi, :]
            A[lo, :] = c[:, None] * rowp - s[:, None] * rowq
            A[hi, :] = s[:, None] * rowp + c[:, None] * rowq
            A[lo, hi] = 0.0
            A[hi, lo] = 0.0
            vp = V[:, lo].copy()
            vq = V[:, hi]
            V[:, lo] = c * vp - s * vq
            V[:, hi] = s * vp + c * vq
    else:
        if off_norm(A) >= config.tol * fro:
            raise ConvergenceError(
                f"Jacobi did not converge in {config.max_sweeps} sweeps "
                f"(off-norm {off_norm(A):.3e}, target {config.tol * fro:.3e})"
            )

    A = A[:n, :n]
    V = V[:n, :n]
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def eigenvalues(A, config: JacobiConfig | None = None) -> np.ndarray:
    return symmetric_eigh(A, config)[0]


def smallest_eigenvalue(A, config: JacobiConfig | None = None) -> float:
    A = check_symmetric(A)
    if A.shape[0] > 1024:
        raise LinalgError(f"matrix too large for the dense eigensolver: {A.shape}")
    return float(eigenvalues(A, config)[0])


def sqrtm_psd(A, clamp: float = -1e-10) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix.

    Eigenvalues in ``[clamp, 0)`` are treated as round-off and set to zero.
    """
    w, V = symmetric_eigh(A)
    if w.size and w[0] < clamp * max(1.0, abs(float(w[-1]))):
        raise NotPositiveDefiniteError(f"matrix is not PSD: eigenvalue {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T
