"""Seeded generators for the linear unit-test benchmarks.

Families
--------
Example2       cow/camel style mixture, labels from the sign of ``1^T z_c``
Example3       linear spiral: ``z ~ N(+-(gamma, mu_e), 0.1^2 I)``, ``+`` for label 1
Example3Prime  Example3 with ``sigma_e ~ Unif(0.1, 0.3)`` per environment
MulticlassLUT  class- and environment-dependent means, ``k`` classes
RegressionLUT  ``y = w_c^T z_c + b_c``, ``z_e = W_e z_c + b_e``

Every random draw comes from its own ``SeedSequence(seed, spawn_key=...)``
keyed by purpose and environment id, so adding environments or samples never
changes what the existing ones look like.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import EnvDataset, MultiEnvData, PopulationData
from .errors import InvalidSpec, Unsupported
from .numerics import random_orthonormal, sign_normalize

FAMILIES = ("Example2", "Example3", "Example3Prime", "MulticlassLUT", "RegressionLUT")

DEFAULT_PARAMS = {
    "Example2": {"nu_c": 0.02, "nu_e": 1.0, "noise_std": 0.1},
    "Example3": {"gamma": 0.1, "sigma_c": 0.1, "sigma_e": 0.1},
    "Example3Prime": {"gamma": 0.1, "sigma_c": 0.1, "sigma_e_low": 0.1, "sigma_e_high": 0.3},
    "MulticlassLUT": {"nu_inv": 0.1, "nu_spu": 1.0, "sigma_c": 0.1, "sigma_e": 0.1},
    "RegressionLUT": {"nu_inv": 1.0, "nu_spu": 50.0, "sigma_c": 0.1, "noise_y": 0.1},
}

EXAMPLE2_SCHEDULE = ((0.95, 0.3), (0.97, 0.5), (0.99, 0.7))

TASK_OF = {
    "Example2": "binary",
    "Example3": "binary",
    "Example3Prime": "binary",
    "MulticlassLUT": "multiclass",
    "RegressionLUT": "regression",
}

# spawn-key purposes
_MIXING, _GLOBAL, _ENV, _TRAIN, _TEST, _SHUFFLE, _ORACLE, _ORACLE_SHUFFLE = range(8)

_MAX_REDRAWS = 20


@dataclass(frozen=True)
class GenSpec:
    family: str
    d_c: int = 5
    d_s: int = 5
    E: int = 2
    n_per_env: int = 10_000
    seed: int = 0
    scrambled: bool = False
    k: int = 2
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.d_c < 1 or self.d_s < 1:
            raise InvalidSpec("d_c and d_s must be >= 1")
        if self.E < 1 or self.n_per_env < 0:
            raise InvalidSpec("E must be >= 1 and n_per_env >= 0")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be a non-negative 64-bit integer")
        if self.family == "MulticlassLUT" and self.k < 1:
            raise InvalidSpec("k must be >= 1")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.family])
        if unknown:
            raise InvalidSpec(f"unknown parameters for {self.family}: {sorted(unknown)}")
        p = self.param
        if self.family == "Example3Prime" and not 0 < p("sigma_e_low") <= p("sigma_e_high"):
            raise InvalidSpec("need 0 < sigma_e_low <= sigma_e_high")

    @property
    def d(self) -> int:
        return self.d_c + self.d_s

    @property
    def task(self) -> str:
        return TASK_OF[self.family]

    @property
    def n_classes(self) -> int | None:
        if self.family == "MulticlassLUT":
            return self.k
        return 2 if self.task == "binary" else None

    def param(self, name: str) -> float:
        return float(self.params.get(name, DEFAULT_PARAMS[self.family][name]))

    @property
    def tag(self) -> str:
        """Family label for result tables; encodes non-default shape parameters."""
        tag = self.family
        if self.family == "MulticlassLUT":
            tag += f"-k{self.k}"
        if (self.d_c, self.d_s) != (5, 5):
            tag += f"-dc{self.d_c}-ds{self.d_s}"
        return tag


@dataclass(frozen=True)
class Truth:
    mixing: np.ndarray
    d_c: int
    d_s: int
    env_params: dict
    global_params: dict
    z_train: dict
    z_test: dict

    @property
    def invariant_index(self) -> np.ndarray:
        return np.arange(self.d_c)

    @property
    def spurious_index(self) -> np.ndarray:
        return np.arange(self.d_c, self.d_c + self.d_s)


@dataclass(frozen=True)
class BenchInstance:
    train: MultiEnvData
    test: MultiEnvData
    spec: GenSpec
    truth: Truth


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def mixing_matrix(spec: GenSpec) -> np.ndarray:
    """``R``: identity, or a seeded random orthonormal matrix when scrambled."""
    if not spec.scrambled:
        return np.eye(spec.d)
    return random_orthonormal(spec.d, _rng(spec.seed, _MIXING))


def global_params(spec: GenSpec) -> dict:
    rng = _rng(spec.seed, _GLOBAL)
    f = spec.family
    if f == "Example2":
        return {"mu_c": np.ones(spec.d_c), "mu_e": np.ones(spec.d_s)}
    if f in ("Example3", "Example3Prime"):
        return {"gamma": spec.param("gamma") * np.ones(spec.d_c)}
    if f == "MulticlassLUT":
        return {"mu_y": rng.random((spec.k, spec.d_c))}
    return {
        "mu_c": np.ones(spec.d_c),
        "w_c": rng.standard_normal(spec.d_c),
        "b_c": float(rng.standard_normal()),
    }


def env_params(spec: GenSpec, env_id: int) -> dict:
    rng = _rng(spec.seed, _ENV, env_id)
    f = spec.family
    if f == "Example2":
        if env_id < len(EXAMPLE2_SCHEDULE):
            p, s = EXAMPLE2_SCHEDULE[env_id]
        else:
            p, s = rng.uniform(0.9, 1.0), rng.uniform(0.3, 0.7)
        return {"p": float(p), "s": float(s)}
    if f == "Example3":
        return {"mu_e": rng.standard_normal(spec.d_s), "sigma_e": spec.param("sigma_e")}
    if f == "Example3Prime":
        mu_e = rng.standard_normal(spec.d_s)
        sigma_e = rng.uniform(spec.param("sigma_e_low"), spec.param("sigma_e_high"))
        return {"mu_e": mu_e, "sigma_e": float(sigma_e)}
    if f == "MulticlassLUT":
        return {"mu_ye": rng.random((spec.k, spec.d_s))}
    full_rank = min(spec.d_s, spec.d_c)
    for _ in range(_MAX_REDRAWS):
        w = rng.standard_normal((spec.d_s, spec.d_c))
        b = rng.standard_normal(spec.d_s)
        if np.linalg.matrix_rank(w) == full_rank:
            return {"W": w, "b": b}
    raise InvalidSpec(f"could not draw a full-rank W for env {env_id}")


def _sample_env(spec: GenSpec, gp: dict, ep: dict, n: int, rng: np.random.Generator):
    """Latents ``z`` (n x d) and labels for one environment."""
    f = spec.family
    d_c, d_s = spec.d_c, spec.d_s
    if f == "Example2":
        p, s = ep["p"], ep["s"]
        probs = [p * s, (1 - p) * s, p * (1 - s), (1 - p) * (1 - s)]
        j = rng.choice(4, size=n, p=probs)
        sign_c = np.where(j < 2, 1.0, -1.0)
        sign_e = np.where((j == 0) | (j == 3), 1.0, -1.0)
        noise = spec.param("noise_std")
        z_c = sign_c[:, None] * (gp["mu_c"] + noise * rng.standard_normal((n, d_c))) * spec.param("nu_c")
        z_e = sign_e[:, None] * (gp["mu_e"] + noise * rng.standard_normal((n, d_s))) * spec.param("nu_e")
        y = (z_c.sum(axis=1) > 0).astype(int)
    elif f in ("Example3", "Example3Prime"):
        y = rng.integers(0, 2, size=n)
        sign = np.where(y == 1, 1.0, -1.0)[:, None]
        z_c = sign * gp["gamma"] + spec.param("sigma_c") * rng.standard_normal((n, d_c))
        z_e = sign * ep["mu_e"] + ep["sigma_e"] * rng.standard_normal((n, d_s))
    elif f == "MulticlassLUT":
        y = rng.integers(0, spec.k, size=n)
        z_c = (gp["mu_y"][y] + spec.param("sigma_c") * rng.standard_normal((n, d_c))) * spec.param("nu_inv")
        z_e = (ep["mu_ye"][y] + spec.param("sigma_e") * rng.standard_normal((n, d_s))) * spec.param("nu_spu")
    else:
        z_c = (gp["mu_c"] + spec.param("sigma_c") * rng.standard_normal((n, d_c))) * spec.param("nu_inv")
        y = z_c @ gp["w_c"] + gp["b_c"] + spec.param("noise_y") * rng.standard_normal(n)
        z_e = (z_c @ ep["W"].T + ep["b"]) * spec.param("nu_spu")
    return np.hstack([z_c, z_e]), y


def _draw(spec, gp, eps, purpose):
    zs, ys = {}, {}
    for e in range(spec.E):
        zs[e], ys[e] = _sample_env(spec, gp, eps[e], spec.n_per_env, _rng(spec.seed, purpose, e))
    return zs, ys


def _shuffle_spurious(spec, zs, purpose):
    out = {}
    for e, z in zs.items():
        perm = _rng(spec.seed, purpose, e).permutation(z.shape[0])
        z = z.copy()
        z[:, spec.d_c:] = z[perm, spec.d_c:]
        out[e] = z
    return out


def _to_data(spec, r, zs, ys) -> MultiEnvData:
    envs = tuple(EnvDataset(e, zs[e] @ r.T, ys[e]) for e in sorted(zs))
    return MultiEnvData(envs, task=spec.task, n_classes=spec.n_classes)


def gen(spec: GenSpec) -> BenchInstance:
    """Draw training and (spurious-shuffled) test environments for ``spec``."""
    r = mixing_matrix(spec)
    gp = global_params(spec)
    eps = {e: env_params(spec, e) for e in range(spec.E)}
    z_train, y_train = _draw(spec, gp, eps, _TRAIN)
    z_test, y_test = _draw(spec, gp, eps, _TEST)
    truth = Truth(r, spec.d_c, spec.d_s, eps, gp, z_train, z_test)
    train = _to_data(spec, r, z_train, y_train)
    test_raw = _to_data(spec, r, z_test, y_test)
    inst = BenchInstance(train=train, test=test_raw, spec=spec, truth=truth)
    return replace(inst, test=make_test_envs(inst))


def shuffled_test_latents(instance: BenchInstance) -> dict:
    """Test latents with ``z_e`` rows permuted within each environment."""
    return _shuffle_spurious(instance.spec, instance.truth.z_test, _SHUFFLE)


def make_test_envs(instance: BenchInstance) -> MultiEnvData:
    """Test environments with ``z_e`` permuted across rows within each environment.

    Labels and invariant latents stay in place, which breaks every
    label/spurious correlation while keeping each marginal intact.
    """
    zs = shuffled_test_latents(instance)
    ys = {e.env_id: e.y for e in instance.test.envs}
    return _to_data(instance.spec, instance.truth.mixing, zs, ys)


def oracle_split(instance: BenchInstance) -> MultiEnvData:
    """Fresh test-style draw (spurious latents shuffled) for training an empirical oracle."""
    spec, truth = instance.spec, instance.truth
    zs, ys = _draw(spec, truth.global_params, truth.env_params, _ORACLE)
    zs = _shuffle_spurious(spec, zs, _ORACLE_SHUFFLE)
    return _to_data(spec, truth.mixing, zs, ys)


def truth_invariant_basis(instance_or_spec) -> np.ndarray:
    """Row-orthonormal basis of the invariant-feature subspace in input space.

    This is the span of the first ``d_c`` columns of ``R^{-T}``: the vectors
    ``p`` for which ``p^T R`` is supported on the invariant latent axes.
    """
    if isinstance(instance_or_spec, BenchInstance):
        r, d_c = instance_or_spec.truth.mixing, instance_or_spec.truth.d_c
    elif isinstance(instance_or_spec, GenSpec):
        r, d_c = mixing_matrix(instance_or_spec), instance_or_spec.d_c
    else:
        r, d_c = instance_or_spec
    return invariant_basis_of(r, d_c)


def invariant_basis_of(r: np.ndarray, d_c: int) -> np.ndarray:
    cols = np.linalg.inv(np.asarray(r, dtype=float)).T[:, :d_c]
    q, _ = np.linalg.qr(cols)
    basis, _ = sign_normalize(q.T)
    return basis


def gaussian_binary_params(spec: GenSpec) -> tuple[np.ndarray, float, float]:
    """``(mu_c, sigma_c, eta)`` of the invariant latents, positive class = label 1."""
    if spec.family not in ("Example3", "Example3Prime"):
        raise Unsupported(f"{spec.family} has no Gaussian binary closed form")
    gp = global_params(spec)
    return gp["gamma"], spec.param("sigma_c"), 0.5


def population_moments(spec: GenSpec) -> PopulationData:
    """Exact moments of every environment of ``spec``."""
    f = spec.family
    if f == "Example2":
        raise Unsupported("Example2 class-conditional moments have no closed form")
    r = mixing_matrix(spec)
    gp = global_params(spec)
    ids = tuple(range(spec.E))
    eps = {e: env_params(spec, e) for e in ids}
    d_c, d_s = spec.d_c, spec.d_s
    means, covs, env_means, env_covs = {}, {}, {}, {}
    if f in ("Example3", "Example3Prime"):
        s_c = spec.param("sigma_c")
        for e in ids:
            m1 = np.concatenate([gp["gamma"], eps[e]["mu_e"]])
            cov = np.diag(np.concatenate([np.full(d_c, s_c**2), np.full(d_s, eps[e]["sigma_e"] ** 2)]))
            means[(e, 1)], means[(e, 0)] = m1, -m1
            covs[(e, 0)] = covs[(e, 1)] = cov
            env_means[e] = np.zeros(spec.d)
            env_covs[e] = cov + np.outer(m1, m1)
        return PopulationData(r, ids, "binary", 2, means, covs, env_means, env_covs)
    if f == "MulticlassLUT":
        nu_i, nu_s = spec.param("nu_inv"), spec.param("nu_spu")
        cov = np.diag(np.concatenate([
            np.full(d_c, (nu_i * spec.param("sigma_c")) ** 2),
            np.full(d_s, (nu_s * spec.param("sigma_e")) ** 2),
        ]))
        for e in ids:
            for y in range(spec.k):
                means[(e, y)] = np.concatenate([nu_i * gp["mu_y"][y], nu_s * eps[e]["mu_ye"][y]])
                covs[(e, y)] = cov
        return PopulationData(r, ids, "multiclass", spec.k, means, covs)
    nu_i, nu_s, s_c = spec.param("nu_inv"), spec.param("nu_spu"), spec.param("sigma_c")
    mean_c = nu_i * gp["mu_c"]
    for e in ids:
        w, b = eps[e]["W"], eps[e]["b"]
        env_means[e] = np.concatenate([mean_c, nu_s * (w @ mean_c + b)])
        lift = np.vstack([np.eye(d_c), nu_s * w])
        env_covs[e] = (nu_i * s_c) ** 2 * lift @ lift.T
    return PopulationData(r, ids, "regression", None, env_latent_means=env_means, env_latent_covs=env_covs)
