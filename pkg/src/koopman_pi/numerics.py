"""Dense linear-algebra kernels shared by identification and policy iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)


class MatrixLogError(ValueError):
    """Spectrum outside the domain of the principal logarithm."""


class NotHurwitzError(ValueError):
    pass


class RiccatiError(RuntimeError):
    pass


@dataclass
class LeastSquaresProblem:
    """``min ||A Z - B||_F^2 + ridge * ||Z||_F^2``."""

    A: np.ndarray
    B: np.ndarray
    ridge: float = 0.0

    def solve(self) -> np.ndarray:
        return solve_least_squares(self.A, self.B, self.ridge)


def solve_least_squares(A, B, ridge: float = 0.0) -> np.ndarray:
    """Minimum-norm (ridge-)regularized least-squares solution.

    Uses a complete orthogonal factorization (QR with column pivoting) of
    ``A``, or of the augmented matrix ``[A; sqrt(ridge) I]`` when
    ``ridge > 0``. The normal equations are never formed.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    vector_rhs = B.ndim == 1
    if vector_rhs:
        B = B[:, None]
    if A.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite entries in least-squares problem")
    if ridge > 0:
        n = A.shape[1]
        A = np.vstack([A, np.sqrt(ridge) * np.eye(n)])
        B = np.vstack([B, np.zeros((n, B.shape[1]))])
    cond = np.finfo(float).eps * max(A.shape)
    Z = linalg.lstsq(A, B, cond=cond, lapack_driver="gelsy", check_finite=False)[0]
    return Z[:, 0] if vector_rhs else Z


def solve_ridge_normal(A, B, ridge: float) -> np.ndarray:
    """Ridge solution via Cholesky of ``A^T A + ridge I``.

    Several times faster than the orthogonal route for tall dense problems;
    the ridge bounds the conditioning of the normal matrix. Falls back to
    :func:`solve_least_squares` if the factorization fails.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if not ridge > 0:
        raise ValueError("normal-equation solve needs a positive ridge")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite entries in least-squares problem")
    G = A.T @ A
    G[np.diag_indices_from(G)] += ridge
    try:
        c = linalg.cho_factor(G, check_finite=False)
    except linalg.LinAlgError:
        log.debug("Cholesky failed; using orthogonal least squares")
        return solve_least_squares(A, B, ridge)
    return linalg.cho_solve(c, A.T @ B, check_finite=False)


def relative_ridge(A, factor: float = 1e-8) -> float:
    """``factor * trace(A^T A) / N``, the default Tikhonov weight for feature fits."""
    A = np.asarray(A)
    return factor * float(np.sum(A * A)) / A.shape[1]


def matrix_log(U) -> np.ndarray:
    """Principal matrix logarithm.

    Raises :class:`MatrixLogError` if an eigenvalue lies on the closed
    negative real axis (including zero).
    """
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError("matrix_log needs a square matrix")
    if not np.all(np.isfinite(U)):
        raise MatrixLogError("non-finite entries")
    eig = linalg.eigvals(U)
    scale = max(1.0, float(np.max(np.abs(eig)))) if eig.size else 1.0
    for lam in eig:
        if abs(lam) <= 1e-14 * scale or (lam.real <= 0 and abs(lam.imag) <= 1e-12 * scale):
            raise MatrixLogError(f"eigenvalue {lam:.6g} has no principal logarithm")
    out = linalg.logm(U, disp=False)[0]
    if np.isrealobj(U):
        if np.max(np.abs(out.imag), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(out.real), initial=0.0)):
            raise MatrixLogError("principal logarithm of the real input is not real")
        out = out.real
    return out


def is_hurwitz(A, margin: float = 0.0) -> bool:
    A = np.atleast_2d(A)
    return bool(np.all(linalg.eigvals(A).real < -margin))


def solve_lyapunov(A, Qs) -> np.ndarray:
    """Symmetric ``P`` with ``A^T P + P A + Qs = 0`` for Hurwitz ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Qs = np.atleast_2d(np.asarray(Qs, dtype=float))
    if not is_hurwitz(A):
        raise NotHurwitzError(f"A is not Hurwitz; eigenvalues {linalg.eigvals(A)}")
    P = linalg.solve_continuous_lyapunov(A.T, -Qs)
    return 0.5 * (P + P.T)


def _bass_gain(A, B, R):
    # shifted controllability Gramian; -(A + alpha I) must be anti-stable for Z > 0
    n = A.shape[0]
    alpha = float(np.max(np.abs(linalg.eigvals(A).real))) + 1.0
    As = A + alpha * np.eye(n)
    Z = linalg.solve_continuous_lyapunov(As, 2.0 * B @ B.T)
    Z = 0.5 * (Z + Z.T)
    try:
        K = linalg.solve(Z, B, assume_a="pos").T
    except linalg.LinAlgError:
        K = linalg.lstsq(Z, B)[0].T
    return K


def stabilizing_gain(A, B, R=None) -> np.ndarray:
    """Some ``K`` with ``A - B K`` Hurwitz."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    m = B.shape[1]
    if is_hurwitz(A):
        return np.zeros((m, A.shape[0]))
    K = _bass_gain(A, B, R)
    if not is_hurwitz(A - B @ K):
        raise RiccatiError("could not find an initial stabilizing gain; is (A, B) stabilizable?")
    return K


def solve_care(A, B, Qs, R, K0=None, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Stabilizing solution of ``A^T P + P A - P B R^{-1} B^T P + Qs = 0``.

    Kleinman-Newton iteration: each step solves a Lyapunov equation for the
    current closed loop and updates ``K = R^{-1} B^T P``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Qs = np.atleast_2d(np.asarray(Qs, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K = stabilizing_gain(A, B, R) if K0 is None else np.atleast_2d(np.asarray(K0, dtype=float))
    if not is_hurwitz(A - B @ K):
        raise RiccatiError("initial gain does not stabilize A - B K")
    P_prev = None
    last_delta = np.inf
    for it in range(max_iter):
        Ak = A - B @ K
        P = solve_lyapunov(Ak, Qs + K.T @ R @ K)
        K = linalg.solve(R, B.T @ P, assume_a="pos")
        if P_prev is not None:
            delta = linalg.norm(P - P_prev) / max(linalg.norm(P_prev), 1e-300)
            if delta <= tol:
                return P
            # rounding floor reached: Newton steps stopped contracting
            if delta <= 1e-9 and delta >= last_delta:
                log.debug("Kleinman stagnated at relative step %.2e after %d iterations", delta, it)
                return P
            last_delta = delta
        P_prev = P
    raise RiccatiError(f"Kleinman iteration did not converge in {max_iter} steps")


def lqr_gain(A, B, Qs, R) -> tuple[np.ndarray, np.ndarray]:
    """``(K, P)`` for the continuous-time LQR problem."""
    P = solve_care(A, B, Qs, R)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    B = np.asarray(B, dtype=float).reshape(P.shape[0], -1)
    return linalg.solve(R, B.T @ P, assume_a="pos"), P


class StreamingLeastSquares:
    """Row-streamed least squares via repeated QR of ``[R; new rows]``.

    Keeps only the ``N x N`` triangular factor and the rotated right-hand
    side, so tall pooled problems never need to be held in memory.
    """

    def __init__(self, n_cols: int, n_rhs: int):
        self.R = np.zeros((0, n_cols))
        self.QtB = np.zeros((0, n_rhs))
        self.rows = 0

    def add(self, A, B) -> None:
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("non-finite entries in least-squares rows")
        stacked = np.vstack([self.R, A])
        Q, R = linalg.qr(stacked, mode="economic", check_finite=False)
        self.QtB = Q.T @ np.vstack([self.QtB, B])
        self.R = R
        self.rows += A.shape[0]

    def solve(self) -> np.ndarray:
        if self.rows == 0:
            raise ValueError("no rows added")
        return linalg.lstsq(self.R, self.QtB, lapack_driver="gelsy", check_finite=False)[0]
