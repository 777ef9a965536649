"""Environment-complexity sweeps over (benchmark x algorithm x E x seed).

Each cell generates one benchmark instance, fits every requested algorithm
on its training environments and scores the fitted model on the
spurious-shuffled test environments.  The instance is generated once per
(spec, E, seed) and shared by all algorithms of that cell group.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import isr, predictors
from .benchgen import BenchInstance, GenSpec, gen, oracle_split, truth_invariant_basis
from .errors import EmptyInput, InvalidParameter, IsrError
from .numerics import principal_angles

ALGORITHMS = ("isr_mean", "isr_cov", "isr_cov_robust", "isr_multiclass", "isr_regression", "erm", "oracle")
METRICS = ("mean_error", "rmse", "r2", "worst_group", "recovery_angle")
DEFAULT_METRICS = ("mean_error", "recovery_angle")

ISR_METHOD = {
    "isr_mean": "mean",
    "isr_cov": "cov",
    "isr_cov_robust": "cov_robust",
    "isr_multiclass": "multiclass",
    "isr_regression": "regression",
}
# tasks each ISR variant accepts
ISR_TASKS = {
    "isr_mean": ("binary",),
    "isr_cov": ("binary",),
    "isr_cov_robust": ("binary",),
    "isr_multiclass": ("binary", "multiclass"),
    "isr_regression": ("regression",),
}
REGRESSION_ONLY = ("rmse", "r2")


@dataclass(frozen=True)
class ResultRecord:
    family: str
    scrambled: bool
    algorithm: str
    E: int
    seed: int
    metric: str
    value: float
    wall_time_s: float = 0.0
    partial: bool = False
    failed: bool = False
    reason: str = ""


@dataclass(frozen=True)
class ExperimentGrid:
    """A sweep definition.  ``specs`` are templates whose ``E`` and ``seed`` are overridden."""

    specs: tuple
    algorithms: tuple
    E_range: tuple
    seeds: tuple
    metrics: tuple = DEFAULT_METRICS
    isr_config: isr.IsrConfig = field(default_factory=isr.IsrConfig)
    fit_config: predictors.FitConfig = predictors.HARNESS_FIT

    def __post_init__(self):
        for name in ("specs", "algorithms", "seeds", "metrics"):
            value = tuple(getattr(self, name))
            if not value:
                raise InvalidParameter(f"grid {name} must be nonempty")
            object.__setattr__(self, name, value)
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise InvalidParameter(f"unknown algorithms {bad}; valid: {', '.join(ALGORITHMS)}")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise InvalidParameter(f"unknown metrics {bad}; valid: {', '.join(METRICS)}")
        lo, hi = (int(v) for v in self.E_range)
        if lo < 2 or hi < lo:
            raise InvalidParameter(f"E_range must satisfy 2 <= min <= max, got {self.E_range}")
        object.__setattr__(self, "E_range", (lo, hi))
        for spec in self.specs:
            check_compatible(spec, self.algorithms, self.metrics)

    def cells(self) -> list[GenSpec]:
        lo, hi = self.E_range
        return [
            replace(spec, E=E, seed=int(seed))
            for spec in self.specs
            for E in range(lo, hi + 1)
            for seed in self.seeds
        ]


def check_compatible(spec: GenSpec, algorithms, metrics) -> None:
    for a in algorithms:
        if a in ISR_TASKS and spec.task not in ISR_TASKS[a]:
            raise InvalidParameter(f"{a} does not apply to {spec.family} ({spec.task} task)")
    if spec.task != "regression":
        bad = [m for m in metrics if m in REGRESSION_ONLY]
        if bad:
            raise InvalidParameter(f"metrics {bad} are only defined for regression benchmarks")


def recovery_angle(proj: isr.IsrProjection, truth_basis: np.ndarray) -> float:
    """Largest principal angle between the recovered and true invariant spans.

    When the dimensions differ the missing directions count as ``pi/2``.
    """
    if proj.d_inv != truth_basis.shape[0]:
        return math.pi / 2
    if proj.d_inv == 0:
        return 0.0
    return float(np.max(principal_angles(proj.invariant_basis, truth_basis)))


def _per_env(model, data, fn):
    return [fn(model, e.x, e.y) for e in data.envs if e.n]


def evaluate(model: predictors.LinearModel, data, task: str, metric: str) -> float:
    """Score ``model`` on ``data`` (averaged over its environments)."""
    if task == "regression":
        if metric == "mean_error":
            vals = _per_env(model, data, predictors.mse)
        elif metric == "rmse":
            vals = _per_env(model, data, predictors.rmse)
        elif metric == "r2":
            vals = _per_env(model, data, predictors.r_squared)
        elif metric == "worst_group":
            return float(max(_per_env(model, data, predictors.mse)))
        else:
            raise InvalidParameter(f"metric {metric!r} is not a test-set score")
        return float(np.mean(vals))
    if metric == "mean_error":
        return float(np.mean(_per_env(model, data, predictors.classification_error)))
    if metric == "worst_group":
        x, y, env = data.pooled()
        groups = predictors.group_metrics(model, x, y, env, predictors.classification_error)
        return predictors.worst_group(groups)[0]
    raise InvalidParameter(f"metric {metric!r} is not defined for {task} tasks")


def fit_algorithm(instance: BenchInstance, algorithm: str, isr_cfg: isr.IsrConfig,
                  fit_cfg: predictors.FitConfig):
    """Fit ``algorithm`` on the training split; returns ``(model, projection or None)``."""
    spec, train = instance.spec, instance.train
    x, y, _ = train.pooled()
    k = train.n_classes
    if algorithm == "erm":
        return predictors.fit_head(spec.task, x, y, fit_cfg, k), None
    if algorithm == "oracle":
        basis = truth_invariant_basis(instance)
        head = predictors.fit_head(spec.task, x @ basis.T, y, fit_cfg, k)
        return predictors.compose(head, basis), None
    if algorithm not in ISR_METHOD:
        raise InvalidParameter(f"unknown algorithm {algorithm!r}; valid: {', '.join(ALGORITHMS)}")
    cfg = isr_cfg if isr_cfg.d_s is not None else replace(isr_cfg, d_s=spec.d_s)
    proj = isr.fit(ISR_METHOD[algorithm], train, cfg)
    if cfg.scale_alpha == 0.0:
        head = predictors.fit_head(spec.task, isr.apply_projection(proj, x), y, fit_cfg, k)
        return predictors.compose(head, proj.invariant_basis), proj
    scaled = isr.subspace_scale(proj, x, cfg.scale_alpha)
    head = predictors.fit_head(spec.task, scaled, y, fit_cfg, k)
    # fold the linear scaling map into the head
    s = proj.spurious_basis
    scale_map = np.eye(proj.d) - (1.0 - cfg.scale_alpha) * s.T @ s
    return predictors.compose(head, scale_map), proj


def fit_shuffled_oracle(instance: BenchInstance,
                        fit_cfg: predictors.FitConfig = predictors.HARNESS_FIT) -> predictors.LinearModel:
    """Empirical oracle: ERM trained on an independent spurious-shuffled draw.

    The ``"oracle"`` algorithm instead fits the head on the true invariant
    projection of the training split; both estimate the same predictor.
    """
    x, y, _ = oracle_split(instance).pooled()
    return predictors.fit_head(instance.spec.task, x, y, fit_cfg, instance.train.n_classes)


def _metrics_for(algorithm: str, metrics) -> list[str]:
    return [m for m in metrics if m != "recovery_angle" or algorithm in ISR_METHOD]


def run_algorithm(instance: BenchInstance, algorithm: str, metrics=DEFAULT_METRICS,
                  isr_cfg: isr.IsrConfig = isr.IsrConfig(),
                  fit_cfg: predictors.FitConfig = predictors.HARNESS_FIT,
                  timing: bool = False) -> list[ResultRecord]:
    spec = instance.spec
    names = _metrics_for(algorithm, metrics)
    base = dict(family=spec.tag, scrambled=spec.scrambled, algorithm=algorithm, E=spec.E, seed=spec.seed)
    start = time.perf_counter()
    try:
        model, proj = fit_algorithm(instance, algorithm, isr_cfg, fit_cfg)
        values = []
        for m in names:
            if m == "recovery_angle":
                values.append(recovery_angle(proj, truth_invariant_basis(instance)))
            else:
                values.append(evaluate(model, instance.test, spec.task, m))
    except (IsrError, np.linalg.LinAlgError) as exc:
        reason = f"{type(exc).__name__}: {exc}"
        return [ResultRecord(metric=m, value=math.nan, failed=True, reason=reason, **base) for m in names]
    elapsed = time.perf_counter() - start if timing else 0.0
    partial = bool(proj.partial) if proj is not None else False
    return [
        ResultRecord(metric=m, value=float(v), wall_time_s=elapsed, partial=partial, **base)
        for m, v in zip(names, values)
    ]


def run_cell(spec: GenSpec, algorithm: str, seed: int | None = None, metrics=DEFAULT_METRICS,
             isr_cfg: isr.IsrConfig = isr.IsrConfig(),
             fit_cfg: predictors.FitConfig = predictors.HARNESS_FIT,
             timing: bool = False) -> list[ResultRecord]:
    """Generate the instance for ``spec`` (at ``seed`` if given) and run one algorithm on it."""
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    check_compatible(spec, [algorithm], metrics)
    return run_algorithm(gen(spec), algorithm, metrics, isr_cfg, fit_cfg, timing)


def _run_group(args) -> list[ResultRecord]:
    spec, algorithms, metrics, isr_cfg, fit_cfg, timing = args
    instance = gen(spec)
    out = []
    for a in algorithms:
        out.extend(run_algorithm(instance, a, metrics, isr_cfg, fit_cfg, timing))
    return out


def run_grid(grid: ExperimentGrid, jobs: int = 1, timing: bool = False) -> list[ResultRecord]:
    """All records of ``grid`` in (spec, E, seed, algorithm, metric) order.

    The output does not depend on ``jobs``: groups are independent and
    results are collected in submission order.
    """
    tasks = [(c, grid.algorithms, grid.metrics, grid.isr_config, grid.fit_config, timing) for c in grid.cells()]
    if jobs <= 1:
        groups = map(_run_group, tasks)
        return [r for g in groups for r in g]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return [r for g in pool.map(_run_group, tasks) for r in g]


@dataclass(frozen=True)
class Aggregate:
    family: str
    scrambled: bool
    algorithm: str
    E: int
    metric: str
    n: int
    n_failed: int
    mean: float
    ci_low: float
    ci_high: float


def mean_ci(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval (``1.96 * sd / sqrt(n)``, ``ddof=1``)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    mean = float(np.mean(v))
    half = 1.96 * float(np.std(v, ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return mean, mean - half, mean + half


def aggregate(records) -> list[Aggregate]:
    """Per (family, scrambled, algorithm, E, metric) mean and CI, failed records excluded."""
    records = list(records)
    if not records:
        raise EmptyInput("no records to aggregate")
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.family, r.scrambled, r.algorithm, r.E, r.metric), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        ok = [r.value for r in rs if not r.failed]
        mean, lo, hi = mean_ci(ok)
        out.append(Aggregate(*key, n=len(ok), n_failed=len(rs) - len(ok), mean=mean, ci_low=lo, ci_high=hi))
    return out
