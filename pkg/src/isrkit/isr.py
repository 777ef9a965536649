"""Invariant-feature subspace recovery.

Each fit looks only at per-environment moments (class-conditional means,
class-conditional covariances, or unconditional means), identifies the
subspace along which those moments move between environments, and returns
its orthogonal complement as the invariant-feature subspace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import numerics
from .datamodel import POSITIVE_LABEL
from .errors import (
    DegenerateEnvironments,
    DimensionMismatch,
    InsufficientVariance,
    InvalidParameter,
    TooFewEnvironments,
)

METHODS = ("mean", "cov", "cov_robust", "multiclass", "regression")

# relative Frobenius size below which a mean-centered moment matrix counts as zero
_DEGENERATE_REL = 1e-12


@dataclass(frozen=True)
class IsrConfig:
    """Hyperparameters shared by the ISR fits.

    ``d_s=None`` selects the spurious dimension automatically by counting
    eigen/singular values above ``rank_tol * max``.  That is only reliable
    with (near-)population moments; with small samples every noisy direction
    clears the threshold.
    """

    d_s: int | None = None
    rank_tol: float = numerics.DEFAULT_RANK_TOL
    cov_pair_min_gap: float = 1e-6
    robust_n_pairs: int | None = None
    scale_alpha: float = 0.0

    def __post_init__(self):
        if self.d_s is not None and self.d_s < 0:
            raise InvalidParameter(f"d_s must be >= 0, got {self.d_s}")
        if not 0.0 <= self.scale_alpha <= 1.0:
            raise InvalidParameter(f"scale_alpha must lie in [0, 1], got {self.scale_alpha}")
        if self.rank_tol <= 0 or self.cov_pair_min_gap < 0:
            raise InvalidParameter("rank_tol must be > 0 and cov_pair_min_gap >= 0")
        if self.robust_n_pairs is not None and self.robust_n_pairs < 1:
            raise InvalidParameter("robust_n_pairs must be >= 1")


@dataclass(frozen=True)
class IsrProjection:
    method: str
    invariant_basis: np.ndarray
    spurious_basis: np.ndarray
    spectrum: np.ndarray
    d_s_used: int
    partial: bool = False
    info: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.invariant_basis.shape[1]

    @property
    def d_inv(self) -> int:
        return self.invariant_basis.shape[0]


def _require_envs(data, minimum: int = 2) -> tuple[int, ...]:
    ids = tuple(data.env_ids)
    if len(ids) < minimum:
        raise TooFewEnvironments(f"need at least {minimum} environments, got {len(ids)}")
    return ids


def _resolve_d_s(cfg: IsrConfig, d: int, magnitudes: np.ndarray) -> int:
    if cfg.d_s is None:
        top = float(np.max(magnitudes)) if magnitudes.size else 0.0
        return int(np.sum(magnitudes > cfg.rank_tol * top)) if top > 0 else 0
    if cfg.d_s >= d:
        raise InvalidParameter(f"d_s={cfg.d_s} must be smaller than the input dimension {d}")
    return cfg.d_s


def mean_pca(means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """PCA of a stack of environment means (one row per environment).

    Returns ascending eigenvalues and row eigenvectors of ``M~.T @ M~ / E``
    where ``M~`` is the column-centered matrix.  Raises
    :class:`DegenerateEnvironments` when the centered matrix is numerically zero.
    """
    means = np.asarray(means, dtype=float)
    centered = means - means.mean(axis=0)
    if np.linalg.norm(centered) <= _DEGENERATE_REL * np.linalg.norm(means):
        raise DegenerateEnvironments("environment means coincide; nothing separates the environments")
    cov = centered.T @ centered / means.shape[0]
    return numerics.sym_eig(cov)


def _split_by_eigs(values, vecs, n_spu, data_d, rank_tol, path):
    # vecs rows are ascending by eigenvalue
    if path == "null_space":
        spurious = vecs[::-1][:n_spu]
        invariant = numerics.null_space(spurious, rank_tol)
    elif path == "smallest":
        invariant = vecs[: data_d - n_spu]
        spurious = vecs[data_d - n_spu:][::-1]
    else:
        raise InvalidParameter(f"unknown path {path!r}; use 'null_space' or 'smallest'")
    return invariant, spurious


def _isr_from_means(method, data, means, cfg, path):
    d = data.d
    E = means.shape[0]
    values, vecs = mean_pca(means)
    d_s = _resolve_d_s(cfg, d, values)
    if path == "smallest":
        # take the d - d_s lowest eigenvectors directly
        n_spu = d_s
    else:
        n_spu = min(d_s, E - 1)
    invariant, spurious = _split_by_eigs(values, vecs, n_spu, d, cfg.rank_tol, path)
    return IsrProjection(
        method=method,
        invariant_basis=invariant,
        spurious_basis=spurious,
        spectrum=values,
        d_s_used=d_s,
        partial=E - 1 < d_s,
        info={"path": path},
    )


def isr_mean(data, cfg: IsrConfig = IsrConfig(), path: str = "null_space") -> IsrProjection:
    """ISR-Mean: PCA on the positive-class means of the environments.

    With ``path="null_space"`` the top ``min(d_s, E-1)`` eigenvectors form the
    spurious basis and the invariant basis is their null space; when
    ``E - 1 < d_s`` only the identifiable spurious directions are removed and
    the projection is flagged ``partial``.  ``path="smallest"`` instead keeps
    the ``d - d_s`` eigenvectors with the smallest eigenvalues.
    """
    ids = _require_envs(data)
    means = np.vstack([data.cond_mean(e, POSITIVE_LABEL) for e in ids])
    return _isr_from_means("mean", data, means, cfg, path)


def isr_regression(data, cfg: IsrConfig = IsrConfig(), path: str = "null_space") -> IsrProjection:
    """ISR-Regression: ISR-Mean on the unconditional environment means."""
    ids = _require_envs(data)
    means = np.vstack([data.env_mean(e) for e in ids])
    return _isr_from_means("regression", data, means, cfg, path)


def covariance_pairs(data, cfg: IsrConfig = IsrConfig()) -> tuple[list, dict]:
    """Environment pairs whose positive-class covariances differ.

    Returns ``[(gap, e1, e2), ...]`` sorted by decreasing relative Frobenius
    gap (ties keep enumeration order), plus the covariance per environment.
    """
    ids = _require_envs(data)
    covs = {e: data.cond_cov(e, POSITIVE_LABEL) for e in ids}
    pairs = []
    for e1, e2 in combinations(ids, 2):
        diff = np.linalg.norm(covs[e1] - covs[e2])
        scale = max(np.linalg.norm(covs[e1]), np.linalg.norm(covs[e2]))
        gap = diff / scale if scale > 0 else 0.0
        if gap > cfg.cov_pair_min_gap:
            pairs.append((gap, e1, e2))
    pairs.sort(key=lambda p: -p[0])
    if not pairs:
        raise InsufficientVariance(
            "no pair of environments has distinct positive-class covariances"
        )
    return pairs, covs


def _cov_pair_split(delta, d, cfg):
    values, vecs = numerics.sym_eig(delta)
    order = np.argsort(np.abs(values), kind="stable")
    values, vecs = values[order], vecs[order]
    d_s = _resolve_d_s(cfg, d, np.abs(values))
    return values, vecs[: d - d_s], vecs[d - d_s:][::-1], d_s


def isr_cov(data, cfg: IsrConfig = IsrConfig()) -> IsrProjection:
    """ISR-Cov: eigendecomposition of the difference of two class covariances.

    Uses the pair of environments with the largest relative covariance gap.
    The spectrum is ordered by ascending absolute value; the ``d - d_s``
    eigenvectors of smallest magnitude span the invariant subspace.
    """
    pairs, covs = covariance_pairs(data, cfg)
    gap, e1, e2 = pairs[0]
    values, invariant, spurious, d_s = _cov_pair_split(covs[e1] - covs[e2], data.d, cfg)
    return IsrProjection(
        method="cov",
        invariant_basis=invariant,
        spurious_basis=spurious,
        spectrum=values,
        d_s_used=d_s,
        info={"pair": (e1, e2), "gap": gap},
    )


def isr_cov_robust(data, cfg: IsrConfig = IsrConfig()) -> IsrProjection:
    """ISR-Cov over several environment pairs, averaged with the flag mean."""
    pairs, covs = covariance_pairs(data, cfg)
    E = len(tuple(data.env_ids))
    budget = cfg.robust_n_pairs or min(10, E * (E - 1) // 2)
    used = pairs[:budget]
    d = data.d
    values, inv0, _, d_s = _cov_pair_split(covs[used[0][1]] - covs[used[0][2]], d, cfg)
    bases = [inv0]
    for _, e1, e2 in used[1:]:
        _, inv, _, _ = _cov_pair_split(covs[e1] - covs[e2], d, IsrConfig(
            d_s=d_s, rank_tol=cfg.rank_tol, cov_pair_min_gap=cfg.cov_pair_min_gap))
        bases.append(inv)
    invariant = numerics.flag_mean(bases, d - d_s)
    spurious = numerics.null_space(invariant, cfg.rank_tol)
    return IsrProjection(
        method="cov_robust",
        invariant_basis=invariant,
        spurious_basis=spurious,
        spectrum=values,
        d_s_used=d_s,
        info={"pairs": [(e1, e2) for _, e1, e2 in used]},
    )


def isr_multiclass(data, cfg: IsrConfig = IsrConfig()) -> IsrProjection:
    """ISR-Multiclass: flag-mean style aggregation of per-class ISR-Mean spans.

    For each class the environment means are PCA'd and the eigenvectors with
    eigenvalue above ``rank_tol * max`` are kept, at most ``E - 1`` and, when
    ``d_s`` is given, at most ``d_s`` (a class cannot move along more spurious
    directions than exist; extra sample eigenvectors are pure noise).  The
    kept vectors of all classes are concatenated column-wise and the top
    ``d_s`` left singular vectors of that matrix span the spurious subspace.
    """
    ids = _require_envs(data)
    E = len(ids)
    k = data.n_classes
    d = data.d
    columns = []
    per_class = []
    for label in range(k):
        means = np.vstack([data.cond_mean(e, label) for e in ids])
        try:
            values, vecs = mean_pca(means)
        except DegenerateEnvironments:
            per_class.append(0)
            continue
        keep = values > cfg.rank_tol * values[-1]
        n_keep = min(int(keep.sum()), E - 1)
        if cfg.d_s is not None:
            n_keep = min(n_keep, cfg.d_s)
        columns.append(vecs[::-1][:n_keep].T)
        per_class.append(n_keep)
    if sum(per_class) == 0:
        raise DegenerateEnvironments("no class shows any variation of its means across environments")
    m_total = np.hstack(columns)
    u, s, _ = numerics.svd(m_total, full_matrices=True)
    spectrum = np.zeros(d)
    spectrum[: s.size] = s[:d]
    d_s = _resolve_d_s(cfg, d, spectrum)
    spurious = u[:d_s]
    invariant = numerics.null_space(spurious, cfg.rank_tol)
    return IsrProjection(
        method="multiclass",
        invariant_basis=invariant,
        spurious_basis=spurious,
        spectrum=spectrum,
        d_s_used=d_s,
        partial=(E - 1) * k < d_s,
        info={"per_class_rank": per_class},
    )


FITTERS = {
    "mean": isr_mean,
    "cov": isr_cov,
    "cov_robust": isr_cov_robust,
    "multiclass": isr_multiclass,
    "regression": isr_regression,
}


def fit(method: str, data, cfg: IsrConfig = IsrConfig()) -> IsrProjection:
    try:
        fitter = FITTERS[method]
    except KeyError:
        raise InvalidParameter(f"unknown ISR method {method!r}; expected one of {METHODS}") from None
    return fitter(data, cfg)


def apply_projection(proj: IsrProjection, x) -> np.ndarray:
    """Map inputs onto the invariant basis: ``x -> P' x`` row-wise."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != proj.d:
        raise DimensionMismatch(f"expected inputs with {proj.d} columns, got shape {x.shape}")
    return x @ proj.invariant_basis.T


def subspace_scale(proj: IsrProjection, x, alpha: float) -> np.ndarray:
    """Shrink the spurious component of ``x`` by ``alpha`` (1 keeps it, 0 removes it)."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != proj.d:
        raise DimensionMismatch(f"expected inputs with {proj.d} columns, got shape {x.shape}")
    if alpha == 1.0:
        return x.copy()
    s = proj.spurious_basis
    return x - (1.0 - alpha) * (x @ s.T) @ s


@dataclass(frozen=True)
class PcaReduction:
    """Centered projection onto the leading principal components."""

    mean: np.ndarray
    components: np.ndarray
    explained: np.ndarray

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.mean.shape[0]:
            raise DimensionMismatch(f"expected {self.mean.shape[0]} columns, got shape {x.shape}")
        return (x - self.mean) @ self.components.T


def fit_pca(x, dim: int) -> PcaReduction:
    x = np.asarray(x, dtype=float)
    if not 1 <= dim <= x.shape[1]:
        raise InvalidParameter(f"PCA dimension must lie in [1, {x.shape[1]}], got {dim}")
    mean = x.mean(axis=0)
    _, s, vt = numerics.svd(x - mean)
    return PcaReduction(mean=mean, components=vt[:dim], explained=s[:dim] ** 2 / x.shape[0])
