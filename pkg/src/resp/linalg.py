"""Kronecker-structured dense linear algebra.

Nothing in here ever materializes a Kronecker product. Stacked matrices are
interpreted as ``n`` vertically stacked ``q x r`` blocks ``C_j`` and products
``(A kron B) C`` are formed block by block.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

JITTER = 1e-8
SYMMETRY_TOL = 1e-10

__all__ = [
    "KronDimensionError",
    "SingularMatrixError",
    "SPDFactor",
    "count_flops",
    "kron_apply",
    "kron_vec_right",
    "kron_whiten",
    "spd_solve",
]


class KronDimensionError(ValueError):
    """Raised when operands of a structured product do not conform."""

    def __init__(self, what: str, left: int, right: int):
        self.what = what
        self.left = left
        self.right = right
        super().__init__(f"dimension mismatch in {what}: {left} != {right}")


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky failed even after jitter; ``pivot`` is the offending pivot."""

    def __init__(self, message: str, pivot: float, index: int):
        self.pivot = pivot
        self.index = index
        super().__init__(f"{message} (pivot {pivot:.3e} at index {index})")


# multiply-add accounting for instrumented tests
_flop_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar(
    "_flop_counters", default=()
)


@dataclass
class FlopCount:
    calls: int = 0
    madds: int = 0


@contextlib.contextmanager
def count_flops():
    """Record multiply-adds issued by :func:`kron_apply` inside the block."""
    counter = FlopCount()
    token = _flop_counters.set(_flop_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _flop_counters.reset(token)


def _record(madds: int) -> None:
    for c in _flop_counters.get():
        c.calls += 1
        c.madds += madds


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got ndim={x.ndim}")
    return x, False


def kron_apply(A, B, C):
    """Compute ``(A kron B) C`` without forming ``A kron B``.

    ``C`` has ``n*q`` rows split into ``n`` blocks of ``q`` rows. Output block
    ``i`` is ``B @ sum_j A[i, j] C_j``, for ``O(mnqr + mpqr)`` work.
    A 1-D ``C`` is treated as a column and a 1-D result is returned.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C2, was_vec = _as_2d(C)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("A and B must be matrices")
    m, n = A.shape
    p, q = B.shape
    if C2.shape[0] != n * q:
        raise KronDimensionError("rows(C) vs cols(A)*cols(B)", C2.shape[0], n * q)
    r = C2.shape[1]
    blocks = C2.reshape(n, q, r)
    mixed = np.tensordot(A, blocks, axes=(1, 0))  # (m, q, r)
    out = np.matmul(B, mixed).reshape(m * p, r)
    _record(m * n * q * r + m * p * q * r)
    return out[:, 0] if was_vec else out


def kron_vec_right(A, c, B):
    """Compute ``(A kron c) B`` as ``(A B) kron c`` for a column vector ``c``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    c = np.asarray(c, dtype=float).ravel()
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("A and B must be matrices")
    if A.shape[1] != B.shape[0]:
        raise KronDimensionError("cols(A) vs rows(B)", A.shape[1], B.shape[0])
    AB = A @ B
    m, r = AB.shape
    return (AB[:, None, :] * c[None, :, None]).reshape(m * c.size, r)


def _check_symmetric(M):
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny)
    asym = np.max(np.abs(M - M.T))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def _failed_pivot(M, index):
    # pivot of an unpivoted Cholesky at the first failing column
    if index == 0:
        return float(M[0, 0])
    L = sla.cholesky(M[:index, :index], lower=True)
    ell = sla.solve_triangular(L, M[:index, index], lower=True)
    return float(M[index, index] - ell @ ell)


def _cholesky(M):
    L, info = sla.lapack.dpotrf(M, lower=1, clean=1)
    if info == 0:
        return L, None
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return None, info - 1


class SPDFactor:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    On failure the factorization is retried once with
    ``JITTER * mean(diag(M))`` added to the diagonal.
    """

    def __init__(self, M, check_symmetry: bool = True):
        M = np.array(M, dtype=float, copy=True)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValueError("matrix has non-finite entries")
        if check_symmetry:
            _check_symmetric(M)
        self.n = M.shape[0]
        self.jitter = 0.0
        L, bad = _cholesky(M)
        if L is None:
            self.jitter = JITTER * float(np.mean(np.diag(M)))
            Mj = M + self.jitter * np.eye(self.n)
            L, bad = _cholesky(Mj)
            if L is None:
                raise SingularMatrixError(
                    "Cholesky failed after jitter", _failed_pivot(Mj, bad), bad
                )
        self.L = L

    def solve(self, rhs):
        return sla.cho_solve((self.L, True), np.asarray(rhs, dtype=float))

    def whiten(self, rhs):
        """``L^{-1} rhs``."""
        return sla.solve_triangular(self.L, np.asarray(rhs, dtype=float), lower=True)

    def inverse(self):
        inv = self.solve(np.eye(self.n))
        return 0.5 * (inv + inv.T)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def spd_solve(M, rhs):
    """Solve ``M x = rhs`` for symmetric positive-definite ``M``."""
    return SPDFactor(M).solve(rhs)


def kron_whiten(fa: SPDFactor, fb: SPDFactor, x):
    """Apply ``(L_a^{-1} kron L_b^{-1})`` to a stacked vector or matrix.

    Equivalent to ``kron_apply(inv(L_a), inv(L_b), x)`` but with triangular
    solves in place of explicit inverses.
    """
    x2, was_vec = _as_2d(x)
    n, q = fa.n, fb.n
    if x2.shape[0] != n * q:
        raise KronDimensionError("rows(x) vs n_a*n_b", x2.shape[0], n * q)
    r = x2.shape[1]
    blocks = x2.reshape(n, q * r)
    mixed = fa.whiten(blocks).reshape(n, q, r)
    side = fb.whiten(mixed.transpose(1, 0, 2).reshape(q, n * r))
    out = side.reshape(q, n, r).transpose(1, 0, 2).reshape(n * q, r)
    return out[:, 0] if was_vec else out
