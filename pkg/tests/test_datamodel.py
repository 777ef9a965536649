import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isrkit import datamodel as dm
from isrkit.benchgen import GenSpec, env_params, gen, global_params, mixing_matrix
from isrkit.errors import DimensionMismatch, EmptyClass, InsufficientSamples, InvalidParameter, Unsupported


def _data(x, y, env=None, task="binary"):
    x = np.asarray(x, dtype=float)
    env = np.zeros(len(y), dtype=int) if env is None else env
    return dm.from_arrays(x, np.asarray(y), env, task=task)


# ---------------------------------------------------------------- cond_mean

def test_cond_mean_singleton():
    assert np.array_equal(dm.cond_mean(_data([[3, 4]], [1]), 0, 1), [3, 4])


def test_cond_mean_two_points():
    assert np.array_equal(dm.cond_mean(_data([[1, 0], [3, 0]], [1, 1]), 0, 1), [2, 0])


def test_cond_mean_filters_label():
    data = _data([[1, 0], [3, 0], [100, 100]], [1, 1, 0])
    assert np.array_equal(dm.cond_mean(data, 0, 1), [2, 0])


def test_cond_mean_concentration():
    rng = np.random.default_rng(2024)
    n, sigma = 100_000, 0.1
    x = np.array([1.0, 1.0]) + sigma * rng.standard_normal((n, 2))
    m = dm.cond_mean(_data(x, np.ones(n, dtype=int)), 0, 1)
    assert np.all(np.abs(m - 1.0) < 3 * sigma / np.sqrt(n))


def test_cond_mean_empty_class():
    with pytest.raises(EmptyClass):
        dm.cond_mean(_data([[1, 2]], [0]), 0, 1)


# ----------------------------------------------------------------- env_mean

def test_env_mean_singleton():
    assert np.array_equal(dm.env_mean(_data([[3, 4]], [0.5], task="regression"), 0), [3, 4])


def test_env_mean_two_points_ignores_labels():
    data = _data([[1, 0], [3, 0]], [0, 1])
    assert np.array_equal(dm.env_mean(data, 0), [2, 0])


def test_env_mean_concentration():
    rng = np.random.default_rng(2025)
    n, sigma = 100_000, 0.1
    x = np.array([1.0, -2.0]) + sigma * rng.standard_normal((n, 2))
    m = dm.env_mean(_data(x, rng.standard_normal(n), task="regression"), 0)
    assert np.all(np.abs(m - [1.0, -2.0]) < 3 * sigma / np.sqrt(n))


# ----------------------------------------------------------------- cond_cov

def test_cond_cov_two_points():
    c = dm.cond_cov(_data([[0, 0], [2, 0]], [1, 1]), 0, 1)
    assert np.array_equal(c, [[1, 0], [0, 0]])


def test_cond_cov_identical_samples():
    c = dm.cond_cov(_data([[1.5, -2.0]] * 4, [1] * 4), 0, 1)
    assert np.array_equal(c, np.zeros((2, 2)))


def test_cond_cov_matches_numpy_biased(rng):
    x = rng.standard_normal((50, 4))
    c = dm.cond_cov(_data(x, np.ones(50, dtype=int)), 0, 1)
    assert np.allclose(c, np.cov(x.T, bias=True))
    assert np.array_equal(c, c.T)


def test_cond_cov_insufficient():
    with pytest.raises(InsufficientSamples):
        dm.cond_cov(_data([[0, 0], [1, 1]], [1, 0]), 0, 1)


def test_population_cov_hand_example():
    spec = GenSpec("Example3", d_c=1, d_s=1, E=1, params={"sigma_c": 0.1, "sigma_e": 0.3})
    pop = dm.population_mode(spec)
    assert np.allclose(pop.cond_cov(0, 1), np.diag([0.01, 0.09]), atol=1e-15)


# -------------------------------------------------------- population_mode

@pytest.mark.parametrize("scrambled", [False, True])
def test_population_example3_cond_mean(scrambled):
    spec = GenSpec("Example3", E=3, seed=4, scrambled=scrambled)
    pop = dm.population_mode(spec)
    r, gamma = mixing_matrix(spec), global_params(spec)["gamma"]
    for e in range(3):
        z = np.concatenate([gamma, env_params(spec, e)["mu_e"]])
        assert np.allclose(pop.cond_mean(e, 1), r @ z, atol=1e-14)
        assert np.allclose(pop.cond_mean(e, 0), -(r @ z), atol=1e-14)


@pytest.mark.parametrize("family", ["Example3", "Example3Prime", "MulticlassLUT"])
def test_population_cov_label_free(family):
    spec = GenSpec(family, E=2, seed=1, scrambled=True)
    pop = dm.population_mode(spec)
    for e in range(2):
        assert np.array_equal(pop.cond_cov(e, 0), pop.cond_cov(e, 1))


def test_population_regression_env_mean():
    spec = GenSpec("RegressionLUT", E=3, seed=2, params={"nu_inv": 1.0, "nu_spu": 1.0})
    pop = dm.population_mode(spec)
    mu_c = global_params(spec)["mu_c"]
    a = np.eye(spec.d)[:, : spec.d_c]
    b_mat = np.eye(spec.d)[:, spec.d_c:]
    for e in range(3):
        ep = env_params(spec, e)
        expected = a @ mu_c + b_mat @ (ep["W"] @ mu_c + ep["b"])
        assert np.allclose(pop.env_mean(e), expected, atol=1e-12)


def test_population_example2_unsupported():
    with pytest.raises(Unsupported):
        dm.population_mode(GenSpec("Example2"))


def test_population_regression_has_no_conditional_cov():
    pop = dm.population_mode(GenSpec("RegressionLUT", E=2))
    with pytest.raises(Unsupported):
        pop.cond_cov(0, 1)


# ------------------------------------------------------------ properties

@given(st.integers(0, 2**32 - 1))
def test_estimators_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    x = rng.standard_normal((n, 3))
    y = np.ones(n, dtype=int)
    perm = rng.permutation(n)
    a, b = _data(x, y), _data(x[perm], y[perm])
    assert np.allclose(dm.cond_mean(a, 0, 1), dm.cond_mean(b, 0, 1), atol=1e-13)
    assert np.allclose(dm.cond_cov(a, 0, 1), dm.cond_cov(b, 0, 1), atol=1e-13)


def test_finite_sample_converges_to_population():
    base = GenSpec("Example3Prime", E=2, seed=7, scrambled=True)
    pop = dm.population_mode(base)
    devs = []
    for n in (1_000, 10_000, 100_000):
        data = gen(GenSpec("Example3Prime", E=2, seed=7, scrambled=True, n_per_env=n)).train
        dev = 0.0
        for e in range(2):
            for label in (0, 1):
                dev = max(dev, np.max(np.abs(data.cond_mean(e, label) - pop.cond_mean(e, label))))
                dev = max(dev, np.max(np.abs(data.cond_cov(e, label) - pop.cond_cov(e, label))))
        devs.append(dev)
    assert devs[0] > devs[1] > devs[2]
    max_sigma = max(base.param("sigma_c"), base.param("sigma_e_high"))
    assert devs[2] < 5 * max_sigma / np.sqrt(100_000)


# ------------------------------------------------------- containers

def test_from_arrays_drops_unlabelled_envs():
    data = dm.from_arrays(np.eye(3), np.array([0, 1, 1]), np.array([0, -1, 1]))
    assert data.env_ids == (0, 1)
    assert data.env(1).n == 1


def test_multienv_rejects_mismatched_dims():
    with pytest.raises(DimensionMismatch):
        dm.MultiEnvData((dm.EnvDataset(0, np.ones((2, 2)), np.zeros(2)), dm.EnvDataset(1, np.ones((2, 3)), np.zeros(2))))


def test_multienv_rejects_duplicate_ids():
    e = dm.EnvDataset(0, np.ones((2, 2)), np.zeros(2))
    with pytest.raises(InvalidParameter):
        dm.MultiEnvData((e, e))


def test_multienv_rejects_bad_labels():
    with pytest.raises(InvalidParameter):
        dm.MultiEnvData((dm.EnvDataset(0, np.ones((2, 2)), np.array([0, 2])),), task="binary")


def test_env_dataset_rejects_nonfinite():
    with pytest.raises(InvalidParameter):
        dm.EnvDataset(0, np.array([[np.nan]]), np.zeros(1))


def test_group_keys_sorted_unique():
    keys = dm.group_keys(np.array([1, 0, 1, 1]), np.array([2, 0, 2, 0]))
    assert keys == [dm.GroupKey(0, 0), dm.GroupKey(1, 0), dm.GroupKey(1, 2)]
