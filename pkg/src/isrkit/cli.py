"""``isrkit`` command line: run, generate, postprocess, plotdata.

Exit codes: 0 success, 2 usage/config/input error, 3 some grid cells failed.

Config files for ``run`` are flat ``key = value`` lines (``#`` starts a
comment).  Recognised keys::

    grid.families     comma list; Example2, Example3, Example3Prime, MulticlassLUT,
                      RegressionLUT, or the scrambled aliases Example2s, Example3s,
                      Example3sPrime
    grid.scrambled    false | true | both   (applies to unaliased names; default false)
    grid.algorithms   comma list of isr_mean, isr_cov, isr_cov_robust, isr_multiclass,
                      isr_regression, erm, oracle
    grid.E_range      lo..hi or a single integer
    grid.seeds        comma list and/or lo..hi ranges
    grid.metrics      comma list of mean_error, rmse, r2, worst_group, recovery_angle
    data.d_c, data.d_s, data.k     integer, comma list or lo..hi range (d_s and k
                                   lists expand into one benchmark per value)
    data.n_per_env                 integer
    param.<name>                   family parameter override (e.g. param.sigma_c)
    isr.d_s, isr.rank_tol, isr.cov_pair_min_gap, isr.robust_n_pairs, isr.scale_alpha
    fit.method, fit.l2, fit.tol, fit.step, fit.max_iters, fit.newton_iters, fit.ridge

``--set key=value`` flags override the file.  ``ISR_SEED`` replaces the seed
list of ``run`` and the seed of ``generate``.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import benchgen, harness, isr, predictors, tables
from .datamodel import GroupKey, from_arrays
from .errors import ConfigError, IsrError

EXIT_OK, EXIT_USAGE, EXIT_FAILED_CELLS = 0, 2, 3

ALIASES = {
    "Example2s": ("Example2", True),
    "Example3s": ("Example3", True),
    "Example3sPrime": ("Example3Prime", True),
}
METHOD_TASK = {
    "mean": "binary",
    "cov": "binary",
    "cov_robust": "binary",
    "multiclass": "multiclass",
    "regression": "regression",
}
POSTPROCESS_METHODS = tuple(METHOD_TASK) + ("erm",)


# ------------------------------------------------------------------ config

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_int_list(text: str, key: str) -> list[int]:
    """``"0,2,5..7"`` -> ``[0, 2, 5, 6, 7]``."""
    values = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if ".." in part:
                lo, hi = (int(v) for v in part.split(".."))
                if hi < lo:
                    raise ConfigError(f"{key}: empty range {part!r}")
                values.extend(range(lo, hi + 1))
            else:
                values.append(int(part))
    except ValueError:
        raise ConfigError(f"{key}: expected integers or lo..hi ranges, got {text!r}") from None
    return values


def _names(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _number(key: str, text: str, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a {kind.__name__}, got {text!r}") from None


def _optional_int(key, text):
    return None if text.lower() in ("", "none", "auto") else _number(key, text, int)


_ISR_KEYS = {
    "d_s": _optional_int,
    "rank_tol": lambda k, v: _number(k, v),
    "cov_pair_min_gap": lambda k, v: _number(k, v),
    "robust_n_pairs": _optional_int,
    "scale_alpha": lambda k, v: _number(k, v),
}
_FIT_KEYS = {f.name: f.type for f in fields(predictors.FitConfig)}


def _family_list(cfg) -> list[tuple[str, bool]]:
    names = _names(cfg.get("grid.families", ""))
    if not names:
        raise ConfigError("grid.families must list at least one family")
    mode = cfg.get("grid.scrambled", "false")
    if mode not in ("true", "false", "both"):
        raise ConfigError(f"grid.scrambled must be true, false or both, got {mode!r}")
    valid = list(benchgen.FAMILIES) + list(ALIASES)
    out = []
    for name in names:
        if name in ALIASES:
            out.append(ALIASES[name])
        elif name in benchgen.FAMILIES:
            flags = {"true": [True], "false": [False], "both": [False, True]}[mode]
            out.extend((name, s) for s in flags)
        else:
            raise ConfigError(f"unknown family {name!r}; valid: {', '.join(valid)}")
    return out


def build_grid(cfg: dict[str, str]) -> harness.ExperimentGrid:
    """Turn a parsed config mapping into an :class:`ExperimentGrid`."""
    known_prefix = ("grid.", "data.", "param.", "isr.", "fit.")
    grid_keys = {"grid.families", "grid.scrambled", "grid.algorithms", "grid.E_range", "grid.seeds", "grid.metrics"}
    data_keys = {"data.d_c", "data.d_s", "data.k", "data.n_per_env"}
    for key in cfg:
        ok = (
            key in grid_keys or key in data_keys or key.startswith("param.")
            or (key.startswith("isr.") and key[4:] in _ISR_KEYS)
            or (key.startswith("fit.") and key[4:] in _FIT_KEYS)
        )
        if not ok or not key.startswith(known_prefix):
            raise ConfigError(f"unknown config key {key!r}")

    algorithms = _names(cfg.get("grid.algorithms", ""))
    if not algorithms:
        raise ConfigError(f"grid.algorithms is empty; valid: {', '.join(harness.ALGORITHMS)}")
    bad = [a for a in algorithms if a not in harness.ALGORITHMS]
    if bad:
        raise ConfigError(f"unknown algorithms {bad}; valid: {', '.join(harness.ALGORITHMS)}")
    metrics = _names(cfg.get("grid.metrics", ",".join(harness.DEFAULT_METRICS)))
    bad = [m for m in metrics if m not in harness.METRICS]
    if bad or not metrics:
        raise ConfigError(f"unknown metrics {bad}; valid: {', '.join(harness.METRICS)}")

    e_values = parse_int_list(cfg.get("grid.E_range", "2..10"), "grid.E_range")
    if not e_values:
        raise ConfigError("grid.E_range is empty")
    seeds = parse_int_list(cfg.get("grid.seeds", "0..9"), "grid.seeds")
    if "ISR_SEED" in os.environ:
        seeds = [_number("ISR_SEED", os.environ["ISR_SEED"], int)]
    if not seeds:
        raise ConfigError("grid.seeds is empty")

    d_c_values = parse_int_list(cfg.get("data.d_c", "5"), "data.d_c")
    d_s_values = parse_int_list(cfg.get("data.d_s", "5"), "data.d_s")
    k_values = parse_int_list(cfg.get("data.k", "2"), "data.k")
    n_per_env = _number("data.n_per_env", cfg.get("data.n_per_env", "10000"), int)
    params = {k[len("param."):]: _number(k, v) for k, v in cfg.items() if k.startswith("param.")}

    specs = []
    for (family, scrambled), d_c, d_s in product(_family_list(cfg), d_c_values, d_s_values):
        ks = k_values if family == "MulticlassLUT" else [2]
        accepted = {p: v for p, v in params.items() if p in benchgen.DEFAULT_PARAMS[family]}
        for k in ks:
            specs.append(benchgen.GenSpec(family, d_c=d_c, d_s=d_s, n_per_env=n_per_env,
                                          scrambled=scrambled, k=k, params=accepted))
    unused = set(params) - {p for f in benchgen.FAMILIES for p in benchgen.DEFAULT_PARAMS[f]}
    if unused:
        raise ConfigError(f"unknown family parameters {sorted(unused)}")

    isr_kwargs = {k[4:]: _ISR_KEYS[k[4:]](k, v) for k, v in cfg.items() if k.startswith("isr.")}
    fit_kwargs = {}
    for k, v in cfg.items():
        if k.startswith("fit."):
            name = k[4:]
            fit_kwargs[name] = v if name == "method" else _number(k, v, int if "iters" in name else float)
    return harness.ExperimentGrid(
        specs=tuple(specs),
        algorithms=tuple(algorithms),
        E_range=(min(e_values), max(e_values)),
        seeds=tuple(seeds),
        metrics=tuple(metrics),
        isr_config=isr.IsrConfig(**isr_kwargs),
        fit_config=replace(predictors.HARNESS_FIT, **fit_kwargs),
    )


def load_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    cfg = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text, path))
    for item in overrides:
        cfg.update(parse_config_text(item, "--set"))
    return cfg


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    grid = build_grid(load_config(args.config, args.set or []))
    records = harness.run_grid(grid, jobs=args.jobs, timing=args.timing)
    out = Path(args.out)
    tables.write_results(out, records)
    summary = Path(args.summary) if args.summary else out.with_suffix(".summary.json")
    n_failed = sum(r.failed for r in records)
    tables.write_json(summary, {
        "n_records": len(records),
        "n_failed": n_failed,
        "aggregates": tables.aggregates_json(harness.aggregate(records)),
    })
    return EXIT_FAILED_CELLS if n_failed else EXIT_OK


def _stem(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix == ".csv" else p


def cmd_generate(args) -> int:
    seed = int(os.environ.get("ISR_SEED", args.seed))
    params = dict(parse_config_text(item, "--param").popitem() for item in (args.param or []))
    params = {k: _number(k, v) for k, v in params.items()}
    spec = benchgen.GenSpec(
        args.family, d_c=args.d_c, d_s=args.d_s, E=args.E, n_per_env=args.n_per_env,
        seed=seed, scrambled=args.scrambled, k=args.k, params=params,
    )
    inst = benchgen.gen(spec)
    stem = _stem(args.out)
    integer = spec.task != "regression"
    for suffix, data in (("", inst.train), (".test", inst.test)):
        x, y, env = data.pooled()
        tables.write_features(f"{stem}{suffix}.csv", x, y, env, integer)
    z_test = benchgen.shuffled_test_latents(inst)
    write_latents(f"{stem}.latent.csv", inst, z_test)
    tables.write_json(f"{stem}.truth.json", {
        "spec": {
            "family": spec.family, "d_c": spec.d_c, "d_s": spec.d_s, "E": spec.E,
            "n_per_env": spec.n_per_env, "seed": spec.seed, "scrambled": spec.scrambled,
            "k": spec.k, "params": {k: spec.param(k) for k in benchgen.DEFAULT_PARAMS[spec.family]},
        },
        "mixing": inst.truth.mixing,
        "invariant_index": inst.truth.invariant_index,
        "spurious_index": inst.truth.spurious_index,
        "invariant_basis": benchgen.truth_invariant_basis(inst),
        "env_params": {str(e): p for e, p in inst.truth.env_params.items()},
    })
    return EXIT_OK


def write_latents(path, inst, z_test) -> None:
    d = inst.spec.d
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["split", "env"] + [f"z{i}" for i in range(d)]) + "\n")
        for split, zs in (("train", inst.truth.z_train), ("test", z_test)):
            for e in sorted(zs):
                for row in zs[e]:
                    fh.write(",".join([split, str(e)] + [tables.fmt_float(v) for v in row]) + "\n")


def _infer_task(method: str, y: np.ndarray, override: str | None) -> str:
    if override:
        return override
    if method in METHOD_TASK:
        return METHOD_TASK[method]
    if y.dtype.kind in "iu":
        return "binary" if y.size == 0 or y.max() <= 1 else "multiclass"
    return "regression"


def _score_block(model, x, y, env, task):
    """Per-environment, mean and worst-group scores on rows with ``env >= 0``."""
    keep = env >= 0
    x, y, env = x[keep], y[keep], env[keep]
    data = from_arrays(x, y, env, task=task, n_classes=model.weights.shape[0] if task == "multiclass" else None)
    per_env_fn = predictors.mse if task == "regression" else predictors.classification_error
    per_env = {str(e.env_id): per_env_fn(model, e.x, e.y) for e in data.envs if e.n}
    block = {
        "n_rows": int(x.shape[0]),
        "per_env": per_env,
        "mean_error": harness.evaluate(model, data, task, "mean_error"),
        "worst_group": harness.evaluate(model, data, task, "worst_group"),
    }
    if task == "regression":
        groups = {GroupKey(0, int(k)): v for k, v in per_env.items()}
    else:
        groups = predictors.group_metrics(model, x, y, env, predictors.classification_error)
    block["per_group"] = [
        {"label": g.label, "env": g.env_id, "value": v}
        for g, v in sorted(groups.items(), key=lambda kv: (kv[0].label, kv[0].env_id))
        if v is not None
    ]
    value, key = predictors.worst_group(groups)
    block["worst_group_key"] = {"label": key.label, "env": key.env_id}
    return block


def cmd_postprocess(args) -> int:
    x, y, env = tables.read_features(args.features)
    task = _infer_task(args.method, y, args.task)
    if task != "regression" and y.dtype.kind not in "iu":
        raise ConfigError(f"{args.features}: {task} labels must be integers")
    k = int(y.max()) + 1 if task == "multiclass" else None

    # input transform: x -> x @ lin.T + off
    lin, off = np.eye(x.shape[1]), np.zeros(x.shape[1])
    pca = None
    if args.pca_dim is not None:
        pca = isr.fit_pca(x, args.pca_dim)
        lin, off = pca.components, -pca.components @ pca.mean
    feats = x @ lin.T + off if pca is not None else x

    proj = None
    if args.method != "erm":
        if args.d_s is None:
            raise ConfigError("--d-s is required for ISR methods")
        data = from_arrays(feats, y, env, task=task, n_classes=k)
        proj = isr.fit(args.method, data, isr.IsrConfig(d_s=args.d_s))
        if args.alpha == 0.0:
            step = proj.invariant_basis
        else:
            s = proj.spurious_basis
            step = np.eye(proj.d) - (1.0 - args.alpha) * s.T @ s
        lin, off = step @ lin, step @ off
        if args.alpha == 0.0:
            feats = isr.apply_projection(proj, feats)
        else:
            feats = isr.subspace_scale(proj, feats, args.alpha)
    head = predictors.fit_head(task, feats, y, predictors.HARNESS_FIT, k)
    model = predictors.LinearModel(head.weights @ lin, head.bias + head.weights @ off, task)

    prefix = _stem(args.out)
    tables.write_features(f"{prefix}.features.csv", feats, y, env, task != "regression")
    tables.write_json(f"{prefix}.model.json", {
        "task": task,
        "method": args.method,
        "alpha": args.alpha,
        "d_s_used": proj.d_s_used if proj else 0,
        "partial": proj.partial if proj else False,
        "spectrum": proj.spectrum if proj else [],
        "invariant_basis": proj.invariant_basis if proj else [],
        "spurious_basis": proj.spurious_basis if proj else [],
        "pca": {"mean": pca.mean, "components": pca.components} if pca else None,
        "head": {"weights": head.weights, "bias": head.bias},
        "input_model": {"weights": model.weights, "bias": model.bias},
    })
    metrics = {"train": _score_block(model, x, y, env, task)}
    if args.test:
        xt, yt, et = tables.read_features(args.test)
        if xt.shape[1] != x.shape[1]:
            raise ConfigError(f"{args.test}: {xt.shape[1]} features, training file has {x.shape[1]}")
        metrics["test"] = _score_block(model, xt, yt, et, task)
    tables.write_json(f"{prefix}.metrics.json", metrics)
    return EXIT_OK


def cmd_plotdata(args) -> int:
    records = tables.read_results(args.results)
    if not records:
        raise ConfigError(f"{args.results}: no result rows")
    tables.write_plotdata(args.out, harness.aggregate(records))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _alpha(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in [0, 1]")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="isrkit", description="Invariant-feature subspace recovery toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment grid and write a results CSV")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--out", required=True, help="results CSV path")
    r.add_argument("--summary", help="aggregate JSON path (default: <out>.summary.json)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes")
    r.add_argument("--timing", action="store_true", help="record wall-clock seconds (output no longer reproducible)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("generate", help="dump a benchmark instance as feature tables")
    g.add_argument("--family", required=True, choices=benchgen.FAMILIES)
    g.add_argument("--scrambled", action="store_true")
    g.add_argument("--E", type=int, default=2)
    g.add_argument("--n-per-env", type=int, default=10_000)
    g.add_argument("--d-c", type=int, default=5)
    g.add_argument("--d-s", type=int, default=5)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", metavar="NAME=VALUE", help="family parameter override")
    g.add_argument("--out", required=True, help="training CSV path; siblings get .test/.latent/.truth suffixes")
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("postprocess", help="fit ISR plus a linear head on a feature table")
    q.add_argument("features", help="y,env,f0..f{d-1} CSV; env = -1 marks rows without an environment label")
    q.add_argument("--method", required=True, choices=POSTPROCESS_METHODS)
    q.add_argument("--d-s", type=int, help="spurious dimension")
    q.add_argument("--alpha", type=_alpha, default=0.0,
                   help="0 projects onto the invariant subspace; 0 < alpha <= 1 scales spurious directions by alpha")
    q.add_argument("--pca-dim", type=int, help="PCA pre-reduction dimension")
    q.add_argument("--task", choices=predictors.TASKS, help="override the task inferred from the method")
    q.add_argument("--test", help="feature table to evaluate on")
    q.add_argument("--out", required=True, help="output prefix")
    q.set_defaults(func=cmd_postprocess)

    d = sub.add_parser("plotdata", help="aggregate a results CSV into mean/CI rows")
    d.add_argument("results")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (IsrError, OSError) as exc:
        print(f"isrkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
