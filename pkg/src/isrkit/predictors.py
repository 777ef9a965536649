"""Linear ERM heads, the closed-form optimal invariant predictor, and metrics.

Two solvers are available for the convex classification losses:

``"gd"``
    Plain full-batch gradient descent from zero on the raw features.
``"newton"``
    Damped Newton with backtracking on column-standardized features.  Same
    optimum when ``l2 == 0``; converges in a handful of iterations, which is
    what the benchmark harness needs at 10^5 rows.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .datamodel import GroupKey
from .errors import DegenerateLabels, DimensionMismatch, EmptyInput, InvalidParameter

TASKS = ("binary", "multiclass", "regression")


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 10_000
    step: float = 0.1
    tol: float = 1e-8
    ridge: float = 1e-8
    method: str = "gd"
    l2: float = 0.0
    newton_iters: int = 100

    def __post_init__(self):
        if self.method not in ("gd", "newton"):
            raise InvalidParameter(f"unknown solver {self.method!r}")
        if min(self.max_iters, self.step, self.tol, self.newton_iters) <= 0 or self.ridge < 0 or self.l2 < 0:
            raise InvalidParameter("FitConfig values must be positive")


# solver settings the harness uses for its heads
HARNESS_FIT = FitConfig(method="newton", l2=1e-6, tol=1e-10)


@dataclass(frozen=True)
class LinearModel:
    """``weights`` is ``k x p`` (k=1 for binary and regression)."""

    weights: np.ndarray
    bias: np.ndarray
    task: str

    @property
    def p(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.p:
            raise DimensionMismatch(f"model expects {self.p} features, got shape {x.shape}")
        scores = x @ self.weights.T + self.bias
        return scores[:, 0] if self.weights.shape[0] == 1 else scores

    def predict(self, x) -> np.ndarray:
        f = self.decision_function(x)
        if self.task == "binary":
            return (f > 0).astype(int)
        if self.task == "multiclass":
            return np.argmax(f, axis=1)
        return f

    def predict_proba(self, x) -> np.ndarray:
        f = self.decision_function(x)
        if self.task == "binary":
            return expit(f)
        if self.task == "multiclass":
            return softmax(f, axis=1)
        raise InvalidParameter("regression models have no class probabilities")


def compose(model: LinearModel, basis) -> LinearModel:
    """Pull a head fitted on ``x @ basis.T`` back to the original inputs."""
    basis = np.asarray(basis, dtype=float)
    return LinearModel(model.weights @ basis, model.bias.copy(), model.task)


def _augment(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd, mu, sd


def _unstandardize(theta, mu, sd):
    # theta: (k, p+1) on standardized columns -> weights, bias on raw columns
    w = theta[:, :-1] / sd
    b = theta[:, -1] - w @ mu
    return w, b


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"x {x.shape} and y {y.shape} do not match")
    if x.shape[0] == 0:
        raise EmptyInput("no training rows")
    if not np.all(np.isfinite(x)):
        raise InvalidParameter("x has non-finite entries")
    return x, y


# ---------------------------------------------------------------- logistic

def logistic_loss(theta, xa, t, l2=0.0) -> float:
    """Mean logistic loss; ``t`` in {-1, +1}, ``theta = (w, b)`` on augmented ``xa``."""
    f = xa @ theta
    return float(np.mean(np.logaddexp(0.0, -t * f)) + 0.5 * l2 * theta[:-1] @ theta[:-1])


def logistic_grad(theta, xa, t, l2=0.0) -> np.ndarray:
    f = xa @ theta
    g = xa.T @ (-t * expit(-t * f)) / xa.shape[0]
    g[:-1] += l2 * theta[:-1]
    return g


def _newton(loss, grad, hess, theta, cfg, trace):
    value = loss(theta)
    if trace is not None:
        trace.append(value)
    for _ in range(cfg.newton_iters):
        g = grad(theta)
        if np.max(np.abs(g)) <= cfg.tol:
            break
        h = hess(theta)
        h[np.diag_indices_from(h)] += 1e-12
        try:
            direction = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(h, g, rcond=None)[0]
        decrement = float(g @ direction)
        t = 1.0
        while True:
            cand = theta - t * direction
            cand_value = loss(cand)
            if cand_value <= value - 1e-4 * t * decrement or t < 1e-10:
                break
            t *= 0.5
        if cand_value > value:
            break
        theta, improvement, value = cand, value - cand_value, cand_value
        if trace is not None:
            trace.append(value)
        if improvement <= 1e-15 * max(1.0, abs(value)):
            break
    return theta


def fit_logistic(x, y, cfg: FitConfig = FitConfig(), trace: list | None = None) -> LinearModel:
    """Logistic regression; labels are read as positive when ``y > 0``.

    ``trace`` (if given) receives the loss after every accepted iterate.
    """
    x, y = _check_xy(x, y)
    t = np.where(y > 0, 1.0, -1.0)
    if np.all(t == t[0]):
        raise DegenerateLabels("logistic regression needs both classes")
    if cfg.method == "gd":
        xa = _augment(x)
        theta = np.zeros(xa.shape[1])
        if trace is not None:
            trace.append(logistic_loss(theta, xa, t, cfg.l2))
        for _ in range(cfg.max_iters):
            g = logistic_grad(theta, xa, t, cfg.l2)
            if np.linalg.norm(g) <= cfg.tol:
                break
            theta = theta - cfg.step * g
            if trace is not None:
                trace.append(logistic_loss(theta, xa, t, cfg.l2))
        return LinearModel(theta[None, :-1], theta[-1:], "binary")

    xs, mu, sd = _standardize(x)
    xa = _augment(xs)
    n = xa.shape[0]

    def hess(theta):
        f = xa @ theta
        s = expit(f)
        h = (xa * (s * (1 - s))[:, None]).T @ xa / n
        h[np.diag_indices(h.shape[0] - 1)] += cfg.l2
        return h

    theta = _newton(
        lambda th: logistic_loss(th, xa, t, cfg.l2),
        lambda th: logistic_grad(th, xa, t, cfg.l2),
        hess,
        np.zeros(xa.shape[1]),
        cfg,
        trace,
    )
    w, b = _unstandardize(theta[None, :], mu, sd)
    return LinearModel(w, b, "binary")


# ----------------------------------------------------------------- softmax

def _softmax_scores(theta, xa):
    # theta: (k-1, p+1); the last class has logits pinned at zero
    f = xa @ theta.T
    return np.hstack([f, np.zeros((xa.shape[0], 1))])


def softmax_loss(theta, xa, y, l2=0.0) -> float:
    """Mean cross-entropy; ``theta`` is ``(k-1) x (p+1)``, the last class pinned to 0."""
    logp = log_softmax(_softmax_scores(theta, xa), axis=1)
    w = theta[:, :-1]
    return float(-np.mean(logp[np.arange(xa.shape[0]), y]) + 0.5 * l2 * np.sum(w * w))


def softmax_grad(theta, xa, y, l2=0.0) -> np.ndarray:
    p = softmax(_softmax_scores(theta, xa), axis=1)
    p[np.arange(xa.shape[0]), y] -= 1.0
    g = p[:, :-1].T @ xa / xa.shape[0]
    g[:, :-1] += l2 * theta[:, :-1]
    return g


def fit_softmax(x, y, k: int | None = None, cfg: FitConfig = FitConfig(), trace: list | None = None) -> LinearModel:
    """Multinomial logistic regression over labels ``0..k-1``."""
    x, y = _check_xy(x, y)
    y = y.astype(int)
    if k is None:
        k = int(y.max()) + 1
    if np.any(y < 0) or np.any(y >= k):
        raise InvalidParameter(f"labels must lie in [0, {k})")
    if np.unique(y).size < 2:
        raise DegenerateLabels("softmax regression needs at least two classes present")
    if cfg.method == "gd":
        xa = _augment(x)
        theta = np.zeros((k - 1, xa.shape[1]))
        if trace is not None:
            trace.append(softmax_loss(theta, xa, y, cfg.l2))
        for _ in range(cfg.max_iters):
            g = softmax_grad(theta, xa, y, cfg.l2)
            if np.linalg.norm(g) <= cfg.tol:
                break
            theta = theta - cfg.step * g
            if trace is not None:
                trace.append(softmax_loss(theta, xa, y, cfg.l2))
        w, b = theta[:, :-1], theta[:, -1]
    else:
        xs, mu, sd = _standardize(x)
        xa = _augment(xs)
        n, q = xa.shape
        shape = (k - 1, q)
        rows = np.arange(n)
        memo = {}

        def log_probs(vec):
            # line search, gradient and Hessian revisit the same iterate
            key = vec.tobytes()
            if key not in memo:
                memo.clear()
                memo[key] = log_softmax(_softmax_scores(vec.reshape(shape), xa), axis=1)
            return memo[key]

        def loss(vec):
            w = vec.reshape(shape)[:, :-1]
            return float(-np.mean(log_probs(vec)[rows, y]) + 0.5 * cfg.l2 * np.sum(w * w))

        def grad(vec):
            p = np.exp(log_probs(vec))
            p[rows, y] -= 1.0
            g = p[:, :-1].T @ xa / n
            g[:, :-1] += cfg.l2 * vec.reshape(shape)[:, :-1]
            return g.ravel()

        def hess(vec):
            # H = blockdiag_a(X^T diag(p_a) X) - V^T V with V = [p_a * X]_a
            p = np.exp(log_probs(vec)[:, :-1])
            v = (p[:, :, None] * xa[:, None, :]).reshape(n, -1)
            h = -(v.T @ v)
            for a in range(k - 1):
                sl = slice(a * q, (a + 1) * q)
                h[sl, sl] += xa.T @ v[:, sl]
                h[a * q + np.arange(q - 1), a * q + np.arange(q - 1)] += cfg.l2 * n
            return h / n

        vec = _newton(
            loss,
            grad,
            hess,
            np.zeros((k - 1) * q),
            cfg,
            trace,
        )
        w, b = _unstandardize(vec.reshape(shape), mu, sd)
    weights = np.vstack([w, np.zeros((1, x.shape[1]))])
    bias = np.concatenate([b, [0.0]])
    return LinearModel(weights, bias, "multiclass")


# ---------------------------------------------------------- least squares

def fit_linreg(x, y, cfg: FitConfig = FitConfig()) -> LinearModel:
    """Ridge-stabilized least squares ``(A^T A + eps I)^{-1} A^T y`` with ``A = [x, 1]``.

    Solved as the equivalent stacked least-squares problem for accuracy.
    """
    x, y = _check_xy(x, y)
    y = y.astype(float)
    if not np.all(np.isfinite(y)):
        raise InvalidParameter("y has non-finite entries")
    xa = _augment(x)
    q = xa.shape[1]
    a = np.vstack([xa, np.sqrt(cfg.ridge) * np.eye(q)])
    rhs = np.concatenate([y, np.zeros(q)])
    theta = np.linalg.lstsq(a, rhs, rcond=None)[0]
    return LinearModel(theta[None, :-1], theta[-1:], "regression")


def fit_head(task: str, x, y, cfg: FitConfig = FitConfig(), k: int | None = None) -> LinearModel:
    """Fit the ERM head matching ``task``."""
    if task == "binary":
        return fit_logistic(x, y, cfg)
    if task == "multiclass":
        return fit_softmax(x, y, k, cfg)
    if task == "regression":
        return fit_linreg(x, y, cfg)
    raise InvalidParameter(f"unknown task {task!r}")


# ------------------------------------------------- optimal invariant predictor

def optimal_invariant_weights(mu_c, sigma_c: float, eta: float) -> tuple[np.ndarray, float]:
    """Bayes-optimal logistic head on invariant latents ``z_c ~ N(y mu_c, sigma_c^2 I)``.

    Returns ``w* = 2 mu_c / sigma_c^2`` and ``b* = log(eta / (1 - eta))``.
    """
    if not 0.0 < eta < 1.0:
        raise InvalidParameter(f"eta must lie in (0, 1), got {eta}")
    mu_c = np.asarray(mu_c, dtype=float)
    return 2.0 * mu_c / sigma_c**2, float(np.log(eta / (1.0 - eta)))


def oracle_predictor(spec) -> LinearModel:
    """Closed-form optimal invariant predictor for a binary Gaussian benchmark.

    The returned model acts on observed inputs: it inverts the mixing matrix,
    keeps the invariant latents and applies ``(w*, b*)`` to them.
    """
    from .benchgen import gaussian_binary_params, mixing_matrix

    mu_c, sigma_c, eta = gaussian_binary_params(spec)
    w_star, b_star = optimal_invariant_weights(mu_c, sigma_c, eta)
    r = mixing_matrix(spec)
    latent_w = np.zeros(r.shape[0])
    latent_w[: mu_c.size] = w_star
    w_x = np.linalg.solve(r.T, latent_w)
    return LinearModel(w_x[None, :], np.array([b_star]), "binary")


# ------------------------------------------------------------------ metrics

def _check_eval(model_or_pred, x, y):
    y = np.asarray(y)
    if y.shape[0] == 0:
        raise EmptyInput("no evaluation rows")
    pred = model_or_pred.predict(x) if isinstance(model_or_pred, LinearModel) else np.asarray(model_or_pred)
    if pred.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{pred.shape[0]} predictions for {y.shape[0]} labels")
    return pred, y


def classification_error(model, x, y) -> float:
    pred, y = _check_eval(model, x, y)
    if isinstance(model, LinearModel) and model.task == "binary":
        y = (y > 0).astype(int)
    return float(np.mean(pred != y))


def mse(model, x, y) -> float:
    pred, y = _check_eval(model, x, y)
    return float(np.mean((pred - y.astype(float)) ** 2))


def rmse(model, x, y) -> float:
    return float(np.sqrt(mse(model, x, y)))


def r_squared(model, x, y) -> float:
    pred, y = _check_eval(model, x, y)
    y = y.astype(float)
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum((y - pred) ** 2))
    if sst == 0.0:
        return 1.0 if sse == 0.0 else 0.0
    return 1.0 - sse / sst


def group_metrics(model, x, y, env, metric, label_bins=None) -> dict[GroupKey, float | None]:
    """Evaluate ``metric`` on every (label, environment) group.

    For regression pass ``label_bins`` (bin edges) to define the label part of
    the group key via ``np.digitize``.
    """
    y = np.asarray(y)
    env = np.asarray(env, dtype=int)
    labels = np.digitize(y, label_bins) if label_bins is not None else y.astype(int)
    out = {}
    for lab in np.unique(labels):
        for e in np.unique(env):
            mask = (labels == lab) & (env == e)
            key = GroupKey(int(lab), int(e))
            out[key] = metric(model, x[mask], y[mask]) if mask.any() else None
    return out


def worst_group(values: Mapping[GroupKey, float | None], higher_is_better: bool = False) -> tuple[float, GroupKey]:
    """Worst value over nonempty groups; ties go to the smallest key."""
    items = sorted(
        ((k, v) for k, v in values.items() if v is not None and not np.isnan(v)),
        key=lambda kv: (kv[0].label, kv[0].env_id),
    )
    if not items:
        raise EmptyInput("all groups are empty")
    best_key, best_val = items[0]
    for key, val in items[1:]:
        if (val < best_val) if higher_is_better else (val > best_val):
            best_key, best_val = key, val
    return float(best_val), best_key
