"""Invariant-feature subspace recovery for domain generalization.

Modules
-------
numerics    deterministic eigen/SVD helpers, null spaces, principal angles, flag mean
datamodel   multi-environment datasets and population moments
isr         ISR-Mean, ISR-Cov (plain and robust), ISR-Multiclass, ISR-Regression
predictors  ERM heads, the closed-form optimal invariant predictor, metrics
benchgen    seeded linear unit-test benchmarks
harness     environment-complexity sweeps and aggregation
cli         ``isrkit`` command line
"""
from .benchgen import BenchInstance, GenSpec, gen, make_test_envs, truth_invariant_basis
from .datamodel import EnvDataset, MultiEnvData, PopulationData, from_arrays
from .errors import IsrError
from .isr import IsrConfig, IsrProjection, apply_projection, fit, subspace_scale

__version__ = "0.1.0"

__all__ = [
    "BenchInstance",
    "EnvDataset",
    "GenSpec",
    "IsrConfig",
    "IsrError",
    "IsrProjection",
    "MultiEnvData",
    "PopulationData",
    "apply_projection",
    "fit",
    "from_arrays",
    "gen",
    "make_test_envs",
    "subspace_scale",
    "truth_invariant_basis",
]
