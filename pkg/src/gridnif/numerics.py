"""Dense symmetric linear algebra and scalar minimization primitives.

Everything operates on plain numpy arrays and is deterministic: the
eigensolver uses a fixed cyclic sweep order, eigenvectors carry a fixed
sign convention, and the scalar minimizer is a golden-section search with
a fixed shrink ratio.  Network blocks in this project are at most a few
hundred rows, so robustness is preferred over asymptotic speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative asymmetry above which an input is rejected as non-symmetric.
SYM_TOL = 1e-9

# lambda_min below this fraction of lambda_max counts as singular/indefinite.
DEFINITE_TOL = 1e-12

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NumericsError(ValueError):
    """Structurally invalid input: asymmetric, indefinite, or bad interval."""


def check_symmetric(a, tol: float = SYM_TOL) -> np.ndarray:
    """Return ``a`` as a float array, rejecting non-square/non-symmetric input."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise NumericsError(f"expected a square matrix, got shape {m.shape}")
    scale = np.max(np.abs(m))
    if scale > 0.0:
        asym = np.max(np.abs(m - m.T)) / scale
        if asym > tol:
            raise NumericsError(f"matrix is not symmetric (relative asymmetry {asym:.3e})")
    return m


@dataclass(frozen=True)
class EigDecomp:
    """Full spectral decomposition A = V diag(w) V^T.

    ``eigenvalues`` ascending; ``eigenvectors`` orthonormal columns with the
    largest-magnitude component of each column nonnegative.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(a, sym_tol: float = SYM_TOL) -> EigDecomp:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations."""
    m = check_symmetric(a, sym_tol)
    n = m.shape[0]
    A = m.copy()
    V = np.eye(n)
    fro = np.linalg.norm(m)
    if fro > 0.0:
        stop = 1e-14 * fro
        for _ in range(100):
            off = math.sqrt(max(0.0, np.sum(A * A) - np.sum(np.diag(A) ** 2)))
            if off <= stop:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = A[p, q]
                    if abs(apq) <= 1e-18 * fro:
                        continue
                    theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    # two-sided rotation on rows/columns p, q
                    col_p = A[:, p].copy()
                    col_q = A[:, q].copy()
                    A[:, p] = c * col_p - s * col_q
                    A[:, q] = s * col_p + c * col_q
                    row_p = A[p, :].copy()
                    row_q = A[q, :].copy()
                    A[p, :] = c * row_p - s * row_q
                    A[q, :] = s * row_p + c * row_q
                    vec_p = V[:, p].copy()
                    vec_q = V[:, q].copy()
                    V[:, p] = c * vec_p - s * vec_q
                    V[:, q] = s * vec_p + c * vec_q
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    w = w[order]
    V = V[:, order]
    # sign convention: largest-magnitude component of each column nonnegative
    for j in range(n):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0.0:
            V[:, j] = -V[:, j]
    return EigDecomp(eigenvalues=w, eigenvectors=V)


def spectral_norm(a) -> float:
    """Largest absolute eigenvalue of a symmetric matrix."""
    w = sym_eig(a).eigenvalues
    return float(np.max(np.abs(w)))


def kappa_sqrt(a) -> float:
    """Condition number of the principal square root of an SPD matrix.

    Equals sqrt(lambda_max / lambda_min).  Rejects singular or indefinite
    input, which for network blocks signals a disconnected or degenerate
    feeder.
    """
    w = sym_eig(a).eigenvalues
    lo, hi = float(w[0]), float(w[-1])
    if hi <= 0.0 or lo <= DEFINITE_TOL * hi:
        raise NumericsError(
            f"matrix is singular or indefinite (lambda_min={lo:.3e}, lambda_max={hi:.3e})"
        )
    return math.sqrt(hi / lo)


def sqrt_psd(a) -> np.ndarray:
    """Symmetric positive definite square root B with B @ B == A."""
    dec = sym_eig(a)
    w = dec.eigenvalues
    hi = float(w[-1])
    if hi <= 0.0 or float(w[0]) <= -DEFINITE_TOL * hi:
        raise NumericsError("matrix is not positive definite; no real square root")
    root = dec.eigenvectors @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ dec.eigenvectors.T
    return 0.5 * (root + root.T)


def invsqrt_psd(a) -> np.ndarray:
    """Inverse of the principal square root of an SPD matrix."""
    dec = sym_eig(a)
    w = dec.eigenvalues
    hi = float(w[-1])
    if hi <= 0.0 or float(w[0]) <= DEFINITE_TOL * hi:
        raise NumericsError("matrix is singular or indefinite; cannot form inverse root")
    inv_root = dec.eigenvectors @ np.diag(1.0 / np.sqrt(w)) @ dec.eigenvectors.T
    return 0.5 * (inv_root + inv_root.T)


def operator_norm(m) -> float:
    """Spectral norm of a general (possibly non-symmetric) matrix."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    gram = m.T @ m
    return math.sqrt(max(0.0, spectral_norm(0.5 * (gram + gram.T))))


def minimize_scalar(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section minimizer of a unimodal function on [lo, hi].

    Returns a point within ``tol`` of the argmin.  Deterministic: the
    bracket shrinks by the golden ratio each iteration.
    """
    if not tol > 0.0:
        raise NumericsError(f"tol must be positive, got {tol}")
    if lo > hi:
        raise NumericsError(f"empty interval [{lo}, {hi}]")
    if hi - lo <= tol:
        return 0.5 * (lo + hi)
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)
