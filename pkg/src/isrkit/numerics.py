"""Deterministic dense linear algebra used by the ISR algorithms.

Bases are stored row-wise: a ``q x d`` array whose rows are orthonormal
vectors of ``R^d``.  Every decomposition fixes the orientation of its
singular/eigen vectors so that the entry of largest magnitude is positive,
which makes all outputs reproducible bit for bit on a given platform.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidMatrix

DEFAULT_RANK_TOL = 1e-8


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    return a


def sign_normalize(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip rows so that each row's largest-magnitude entry is positive.

    Returns the flipped rows and the +-1 multipliers that were applied.
    Ties in magnitude (up to a relative 1e-10) resolve to the lowest column index.
    """
    rows = np.array(rows, dtype=float, copy=True)
    if rows.size == 0:
        return rows, np.ones(rows.shape[0])
    mag = np.abs(rows)
    # entries within rounding of the row maximum count as tied
    tied = mag >= mag.max(axis=1, keepdims=True) * (1.0 - 1e-10)
    idx = np.argmax(tied, axis=1)
    signs = np.where(rows[np.arange(rows.shape[0]), idx] < 0, -1.0, 1.0)
    return rows * signs[:, None], signs


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns ``(values, vectors)`` with eigenvalues ascending and the
    eigenvectors as the *rows* of ``vectors``, so ``a = vectors.T @ diag(values) @ vectors``.
    The input is symmetrized as ``(a + a.T) / 2`` first.
    """
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidMatrix(f"sym_eig needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    values, vecs = np.linalg.eigh(a)
    rows, _ = sign_normalize(vecs.T)
    return values, rows


def svd(a, full_matrices: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Singular value decomposition ``a = u.T @ diag(s) @ vt``.

    ``u`` holds left singular vectors as rows, ``vt`` right singular vectors
    as rows; ``s`` is descending.  Each left vector is sign-normalized and its
    right partner flipped to match.
    """
    a = _as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=full_matrices)
    u_rows, signs = sign_normalize(u.T)
    vt = np.array(vt, copy=True)
    r = min(len(s), vt.shape[0])
    vt[:r] *= signs[:r, None]
    if vt.shape[0] > r:
        vt[r:], _ = sign_normalize(vt[r:])
    return u_rows, s, vt


def numerical_rank(a, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol * s_max``."""
    a = _as_matrix(a)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def null_space(rows, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as rows) of ``{v : rows @ v = 0}``.

    The numerical rank counts singular values above ``tol`` times the largest
    one.  Returns a ``(d - rank) x d`` array.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2:
        raise InvalidMatrix(f"null_space expects a 2-D array, got {rows.shape}")
    d = rows.shape[1]
    if rows.shape[0] == 0:
        return np.eye(d)
    rows = _as_matrix(rows, "rows")
    _, s, vt = np.linalg.svd(rows, full_matrices=True)
    rank = 0 if s.size == 0 or s[0] == 0.0 else int(np.sum(s > tol * s[0]))
    basis, _ = sign_normalize(vt[rank:])
    return basis


def _check_basis_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = _as_matrix(np.atleast_2d(a), "a")
    b = _as_matrix(np.atleast_2d(b), "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"ambient dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"subspace dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians, ascending) between two row-orthonormal bases.

    Cosines come from the singular values of ``a @ b.T``.  Angles whose sine is
    below ``1/sqrt(2)`` are taken from the sines instead (singular values of
    the part of ``b`` orthogonal to ``a``), since ``arccos`` loses about half
    the available digits near zero.
    """
    a, b = _check_basis_pair(a, b)
    if a.shape[0] == 0:
        return np.zeros(0)
    cos = np.linalg.svd(a @ b.T, compute_uv=False)
    theta_cos = np.arccos(np.clip(cos, 0.0, 1.0))
    b_perp = b - (b @ a.T) @ a
    sin = np.sort(np.linalg.svd(b_perp, compute_uv=False))
    theta_sin = np.arcsin(np.clip(sin, 0.0, 1.0))
    angles = np.where(sin ** 2 < 0.5, theta_sin, theta_cos)
    return np.clip(np.sort(angles), 0.0, np.pi / 2)


def flag_mean(bases: Sequence[np.ndarray], r: int) -> np.ndarray:
    """Flag mean of a collection of subspaces.

    Concatenates the transposed bases into a ``d x (N q)`` matrix and returns
    its top-``r`` left singular vectors as rows.
    """
    if len(bases) == 0:
        raise EmptyInput("flag_mean needs at least one basis")
    mats = [_as_matrix(np.atleast_2d(b), "basis") for b in bases]
    d = mats[0].shape[1]
    if any(m.shape[1] != d for m in mats):
        raise DimensionMismatch("all bases must share the ambient dimension")
    if not 0 <= r <= d:
        raise DimensionMismatch(f"r={r} must lie in [0, {d}]")
    stacked = np.hstack([m.T for m in mats])
    u, _, _ = svd(stacked, full_matrices=r > min(stacked.shape))
    return u[:r]


def random_orthonormal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed ``d x d`` orthonormal matrix.

    QR of a standard Gaussian draw, with the triangular factor's diagonal
    made positive so the factorization (and hence the output) is unique.
    For ``d = 1`` the result is ``[[1.0]]`` (the draw is still consumed).
    """
    if d < 1:
        raise DimensionMismatch("d must be >= 1")
    g = rng.standard_normal((d, d))
    if d == 1:
        return np.ones((1, 1))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs[None, :]
