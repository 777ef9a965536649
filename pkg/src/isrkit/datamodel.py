"""Multi-environment datasets and the moment estimators ISR consumes.

Two providers share one duck-typed interface (``env_ids``, ``d``, ``task``,
``n_classes``, ``cond_mean``, ``cond_cov``, ``env_mean``):

* :class:`MultiEnvData` estimates moments from samples.
* :class:`PopulationData` returns the exact (infinite-sample) moments of a
  linear latent model ``x = R z``.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyClass,
    EmptyInput,
    InsufficientSamples,
    InvalidParameter,
    Unsupported,
)

TASKS = ("binary", "multiclass", "regression")

# label treated as "positive" by the binary ISR fits
POSITIVE_LABEL = 1


@dataclass(frozen=True)
class EnvDataset:
    env_id: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DimensionMismatch(f"x must be 2-D, got shape {x.shape}")
        y = np.asarray(self.y)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DimensionMismatch(f"env {self.env_id}: {x.shape[0]} rows of x but y has shape {y.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidParameter(f"env {self.env_id}: x has non-finite entries")
        if y.dtype.kind == "f" and not np.all(np.isfinite(y)):
            raise InvalidParameter(f"env {self.env_id}: y has non-finite entries")
        if self.env_id < 0:
            raise InvalidParameter(f"env_id must be >= 0, got {self.env_id}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class GroupKey:
    label: int
    env_id: int


@dataclass(frozen=True)
class MultiEnvData:
    """Labeled samples partitioned by environment."""

    envs: tuple[EnvDataset, ...]
    task: str = "binary"
    n_classes: int | None = None
    d: int = field(init=False)

    def __post_init__(self):
        envs = tuple(self.envs)
        if not envs:
            raise EmptyInput("MultiEnvData needs at least one environment")
        if self.task not in TASKS:
            raise InvalidParameter(f"unknown task {self.task!r}; expected one of {TASKS}")
        d = envs[0].x.shape[1]
        if any(e.x.shape[1] != d for e in envs):
            raise DimensionMismatch("all environments must share the input dimension")
        ids = [e.env_id for e in envs]
        if len(set(ids)) != len(ids):
            raise InvalidParameter(f"duplicate env ids in {ids}")
        k = self.n_classes
        if self.task == "binary":
            k = 2
        if self.task != "regression":
            if k is None:
                k = int(max((e.y.max() for e in envs if e.n), default=0)) + 1
            for e in envs:
                if e.n and (np.any(e.y < 0) or np.any(e.y >= k) or np.any(e.y != np.round(e.y))):
                    raise InvalidParameter(f"env {e.env_id}: labels must be integers in [0, {k})")
            envs = tuple(EnvDataset(e.env_id, e.x, e.y.astype(int)) for e in envs)
        else:
            k = None
            envs = tuple(EnvDataset(e.env_id, e.x, e.y.astype(float)) for e in envs)
        object.__setattr__(self, "envs", envs)
        object.__setattr__(self, "n_classes", k)
        object.__setattr__(self, "d", d)

    @property
    def env_ids(self) -> tuple[int, ...]:
        return tuple(e.env_id for e in self.envs)

    @property
    def E(self) -> int:
        return len(self.envs)

    def env(self, env_id: int) -> EnvDataset:
        for e in self.envs:
            if e.env_id == env_id:
                return e
        raise KeyError(f"no environment {env_id}")

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All rows stacked in environment order: ``(x, y, env)``."""
        x = np.vstack([e.x for e in self.envs])
        y = np.concatenate([e.y for e in self.envs])
        env = np.concatenate([np.full(e.n, e.env_id) for e in self.envs])
        return x, y, env

    def _rows(self, env_id: int, label) -> np.ndarray:
        e = self.env(env_id)
        if label is None:
            return e.x
        return e.x[e.y == label]

    def cond_mean(self, env_id: int, label) -> np.ndarray:
        rows = self._rows(env_id, label)
        if rows.shape[0] == 0:
            raise EmptyClass(f"env {env_id} has no samples with label {label}")
        return rows.mean(axis=0)

    def env_mean(self, env_id: int) -> np.ndarray:
        rows = self._rows(env_id, None)
        if rows.shape[0] == 0:
            raise EmptyClass(f"env {env_id} is empty")
        return rows.mean(axis=0)

    def cond_cov(self, env_id: int, label) -> np.ndarray:
        rows = self._rows(env_id, label)
        if rows.shape[0] < 2:
            raise InsufficientSamples(
                f"env {env_id}, label {label}: need >= 2 samples, have {rows.shape[0]}"
            )
        centered = rows - rows.mean(axis=0)
        cov = centered.T @ centered / rows.shape[0]
        return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class PopulationData:
    """Exact moments of ``x = R z`` given latent moments per (env, label).

    ``latent_means`` / ``latent_covs`` are keyed by ``(env_id, label)`` for
    classification; ``env_latent_means`` / ``env_latent_covs`` by ``env_id``
    hold the unconditional moments (required for regression).
    """

    mixing: np.ndarray
    env_ids: tuple[int, ...]
    task: str = "binary"
    n_classes: int | None = None
    latent_means: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)
    latent_covs: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)
    env_latent_means: Mapping[int, np.ndarray] = field(default_factory=dict)
    env_latent_covs: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.mixing, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise DimensionMismatch(f"mixing matrix must be square, got {r.shape}")
        object.__setattr__(self, "mixing", r)
        object.__setattr__(self, "env_ids", tuple(self.env_ids))
        if self.task == "binary":
            object.__setattr__(self, "n_classes", 2)

    @property
    def d(self) -> int:
        return self.mixing.shape[0]

    @property
    def E(self) -> int:
        return len(self.env_ids)

    def cond_mean(self, env_id: int, label) -> np.ndarray:
        try:
            m = self.latent_means[(env_id, label)]
        except KeyError:
            raise EmptyClass(f"no population mean for env {env_id}, label {label}") from None
        return self.mixing @ np.asarray(m, dtype=float)

    def cond_cov(self, env_id: int, label) -> np.ndarray:
        try:
            c = self.latent_covs[(env_id, label)]
        except KeyError:
            raise Unsupported(f"no population covariance for env {env_id}, label {label}") from None
        cov = self.mixing @ np.asarray(c, dtype=float) @ self.mixing.T
        return 0.5 * (cov + cov.T)

    def env_mean(self, env_id: int) -> np.ndarray:
        try:
            m = self.env_latent_means[env_id]
        except KeyError:
            raise Unsupported(f"no unconditional population mean for env {env_id}") from None
        return self.mixing @ np.asarray(m, dtype=float)

    def env_cov(self, env_id: int) -> np.ndarray:
        try:
            c = self.env_latent_covs[env_id]
        except KeyError:
            raise Unsupported(f"no unconditional population covariance for env {env_id}") from None
        return self.mixing @ np.asarray(c, dtype=float) @ self.mixing.T


def cond_mean(data, env_id: int, label) -> np.ndarray:
    """Mean of the inputs in ``env_id`` carrying ``label``."""
    return data.cond_mean(env_id, label)


def cond_cov(data, env_id: int, label) -> np.ndarray:
    """Class-conditional covariance with divisor ``n``."""
    return data.cond_cov(env_id, label)


def env_mean(data, env_id: int) -> np.ndarray:
    return data.env_mean(env_id)


def population_mode(spec) -> PopulationData:
    """Closed-form moments of a benchmark generator spec (no sampling)."""
    from .benchgen import population_moments

    return population_moments(spec)


def from_arrays(
    x: np.ndarray,
    y: np.ndarray,
    env: np.ndarray,
    task: str = "binary",
    n_classes: int | None = None,
) -> MultiEnvData:
    """Split pooled rows into environments; rows with ``env < 0`` are dropped."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    env = np.asarray(env, dtype=int)
    ids = sorted(int(e) for e in np.unique(env) if e >= 0)
    if not ids:
        raise EmptyInput("no rows carry an environment label")
    envs = [EnvDataset(e, x[env == e], y[env == e]) for e in ids]
    return MultiEnvData(tuple(envs), task=task, n_classes=n_classes)


def group_keys(y: np.ndarray, env: np.ndarray) -> list[GroupKey]:
    pairs = sorted({(int(a), int(b)) for a, b in zip(y, env)})
    return [GroupKey(a, b) for a, b in pairs]
