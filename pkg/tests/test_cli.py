import csv
import json

import numpy as np
import pytest

from isrkit import benchgen, harness, tables
from isrkit.cli import build_grid, main, parse_config_text, parse_int_list
from isrkit.errors import ConfigError, ParseError

MINIMAL = """\
grid.families = Example3Prime
grid.algorithms = isr_cov, oracle
grid.E_range = 2..4
grid.seeds = 0, 1
data.n_per_env = 500
"""


@pytest.fixture
def minimal(tmp_path):
    path = tmp_path / "grid.cfg"
    path.write_text(MINIMAL)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------- run

def test_run_minimal_config_row_count(minimal, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--config", str(minimal), "--out", str(out)]) == 0
    table = rows(out)
    assert table[0] == list(tables.RESULT_COLUMNS)
    # isr_cov reports mean_error and recovery_angle, oracle only mean_error: 3 x 3 E x 2 seeds
    assert len(table) - 1 == 18
    summary = json.loads(out.with_suffix(".summary.json").read_text())
    assert summary["n_records"] == 18 and summary["n_failed"] == 0


def test_run_rerun_is_byte_identical(minimal, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", str(minimal), "--out", str(a)]) == 0
    assert main(["run", "--config", str(minimal), "--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".summary.json").read_bytes() == b.with_suffix(".summary.json").read_bytes()


def test_run_empty_algorithms(minimal, tmp_path, capsys):
    code = main(["run", "--config", str(minimal), "--set", "grid.algorithms=", "--out", str(tmp_path / "r.csv")])
    assert code == 2
    assert "isr_mean" in capsys.readouterr().err


def test_run_unknown_family_lists_valid(minimal, tmp_path, capsys):
    code = main(["run", "--config", str(minimal), "--set", "grid.families=Example9", "--out", str(tmp_path / "r.csv")])
    assert code == 2
    assert "Example3Prime" in capsys.readouterr().err


def test_run_failed_cells_exit_3(minimal, tmp_path):
    out = tmp_path / "r.csv"
    code = main(["run", "--config", str(minimal), "--set", "data.n_per_env=1", "--out", str(out)])
    assert code == 3
    failed = [r for r in tables.read_results(out) if r.failed]
    assert failed and all(r.reason for r in failed)


def test_isr_seed_overrides(minimal, tmp_path, monkeypatch):
    monkeypatch.setenv("ISR_SEED", "7")
    out = tmp_path / "r.csv"
    assert main(["run", "--config", str(minimal), "--out", str(out)]) == 0
    assert {r.seed for r in tables.read_results(out)} == {7}


def test_config_parsing():
    cfg = parse_config_text("a = 1  # note\n\n# skip\nb=x=y\n")
    assert cfg == {"a": "1", "b": "x=y"}
    assert parse_int_list("0, 2, 5..7", "k") == [0, 2, 5, 6, 7]
    with pytest.raises(ConfigError):
        parse_config_text("novalue")
    with pytest.raises(ConfigError):
        build_grid({"grid.families": "Example3", "grid.algorithms": "erm", "grid.bogus": "1"})


def test_config_aliases_and_lists():
    grid = build_grid({"grid.families": "Example3s, MulticlassLUT", "grid.algorithms": "erm",
                       "data.k": "2..3", "grid.E_range": "2..3", "grid.seeds": "0"})
    assert [(s.family, s.scrambled, s.k) for s in grid.specs] == [
        ("Example3", True, 2), ("MulticlassLUT", False, 2), ("MulticlassLUT", False, 3)]


# ----------------------------------------------------------------- generate

def _generate(tmp_path, *extra, family="Example3Prime", E=3, n=200):
    out = tmp_path / "bench.csv"
    argv = ["generate", "--family", family, "--E", str(E), "--n-per-env", str(n), "--seed", "4",
            "--out", str(out), *extra]
    assert main(argv) == 0
    return out


def test_generate_round_trip(tmp_path):
    out = _generate(tmp_path, "--scrambled")
    inst = benchgen.gen(benchgen.GenSpec("Example3Prime", E=3, n_per_env=200, seed=4, scrambled=True))
    for path, data in ((out, inst.train), (tmp_path / "bench.test.csv", inst.test)):
        x, y, env = tables.read_features(path)
        px, py, penv = data.pooled()
        assert np.array_equal(x, px) and np.array_equal(y, py) and np.array_equal(env, penv)
    truth = json.loads((tmp_path / "bench.truth.json").read_text())
    assert np.array_equal(np.array(truth["mixing"]), inst.truth.mixing)
    latent = rows(tmp_path / "bench.latent.csv")
    assert latent[0][:3] == ["split", "env", "z0"] and len(latent) - 1 == 2 * 3 * 200
    z0 = np.array([[float(v) for v in r[2:]] for r in latent[1:201]])
    assert np.array_equal(z0, inst.truth.z_train[0])


def test_generate_row_count(tmp_path):
    out = _generate(tmp_path, E=4, n=37)
    assert len(rows(out)) - 1 == 4 * 37


def test_generate_empty_is_header_only(tmp_path):
    out = _generate(tmp_path, n=0)
    assert out.read_text() == ",".join(tables.feature_header(10)) + "\n"


def test_generate_is_deterministic(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _generate(tmp_path / "a"), _generate(tmp_path / "b")
    for suffix in (".csv", ".test.csv", ".latent.csv", ".truth.json"):
        name = "bench" + suffix
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()


# -------------------------------------------------------------- postprocess

@pytest.mark.parametrize("family,method,algorithm", [
    ("Example3Prime", "cov", "isr_cov"),
    ("Example3", "mean", "isr_mean"),
    ("MulticlassLUT", "multiclass", "isr_multiclass"),
    ("RegressionLUT", "regression", "isr_regression"),
])
def test_postprocess_parity_with_harness(tmp_path, family, method, algorithm):
    out = _generate(tmp_path, "--scrambled", family=family, E=7, n=400)
    code = main(["postprocess", str(out), "--method", method, "--d-s", "5",
                 "--test", str(tmp_path / "bench.test.csv"), "--out", str(tmp_path / "pp")])
    assert code == 0
    metrics = json.loads((tmp_path / "pp.metrics.json").read_text())
    inst = benchgen.gen(benchgen.GenSpec(family, E=7, n_per_env=400, seed=4, scrambled=True))
    expected = harness.run_algorithm(inst, algorithm, ("mean_error",))[0].value
    assert abs(metrics["test"]["mean_error"] - expected) <= 1e-12


def test_postprocess_alpha_one_is_identity(tmp_path):
    out = _generate(tmp_path)
    assert main(["postprocess", str(out), "--method", "cov", "--d-s", "5", "--alpha", "1",
                 "--out", str(tmp_path / "pp")]) == 0
    x, y, env = tables.read_features(out)
    fx, fy, fenv = tables.read_features(tmp_path / "pp.features.csv")
    assert np.array_equal(fx, x) and np.array_equal(fy, y) and np.array_equal(fenv, env)


def test_postprocess_pca_then_projection(tmp_path):
    out = _generate(tmp_path, E=7)
    assert main(["postprocess", str(out), "--method", "mean", "--d-s", "3", "--pca-dim", "8",
                 "--out", str(tmp_path / "pp")]) == 0
    fx, _, _ = tables.read_features(tmp_path / "pp.features.csv")
    assert fx.shape[1] == 5


def test_postprocess_malformed_header(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,env,f0,g1\n1,0,0.5,0.5\n")
    assert main(["postprocess", str(bad), "--method", "mean", "--d-s", "1", "--out", str(tmp_path / "o")]) == 2
    assert "'g1'" in capsys.readouterr().err


def test_postprocess_bad_cell_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,env,f0\n1,0,0.5\n0,1,abc\n")
    assert main(["postprocess", str(bad), "--method", "mean", "--d-s", "1", "--out", str(tmp_path / "o")]) == 2
    assert ":3:" in capsys.readouterr().err


def test_postprocess_single_environment(tmp_path, capsys):
    f = tmp_path / "one.csv"
    f.write_text("y,env,f0,f1\n1,0,0.5,0.1\n0,0,-0.5,0.2\n1,-1,0.3,0.3\n")
    assert main(["postprocess", str(f), "--method", "mean", "--d-s", "1", "--out", str(tmp_path / "o")]) == 2
    assert "TooFewEnvironments" in capsys.readouterr().err


def test_postprocess_unlabelled_rows_used_for_head_only(tmp_path):
    out = _generate(tmp_path, E=7, n=300)
    x, y, env = tables.read_features(out)
    env = env.copy()
    env[::3] = -1
    partial = tmp_path / "partial.csv"
    tables.write_features(partial, x, y, env, True)
    assert main(["postprocess", str(partial), "--method", "mean", "--d-s", "5",
                 "--out", str(tmp_path / "pp")]) == 0
    fx, _, fenv = tables.read_features(tmp_path / "pp.features.csv")
    assert fx.shape[0] == x.shape[0] and np.array_equal(fenv, env)
    metrics = json.loads((tmp_path / "pp.metrics.json").read_text())
    assert metrics["train"]["n_rows"] == int(np.sum(env >= 0))


# ----------------------------------------------------------------- plotdata

def test_plotdata_matches_aggregate(minimal, tmp_path):
    res, plot = tmp_path / "r.csv", tmp_path / "p.csv"
    assert main(["run", "--config", str(minimal), "--out", str(res)]) == 0
    assert main(["plotdata", str(res), "--out", str(plot)]) == 0
    table = rows(plot)
    assert table[0] == list(tables.PLOT_COLUMNS)
    aggs = harness.aggregate(tables.read_results(res))
    assert len(table) - 1 == len(aggs)
    for row, a in zip(table[1:], aggs):
        assert (row[0], row[2], row[3], int(row[4])) == (a.family, a.algorithm, a.metric, a.E)
        assert float(row[7]) == a.mean and float(row[8]) == a.ci_low


def test_plotdata_single_row(tmp_path):
    res, plot = tmp_path / "r.csv", tmp_path / "p.csv"
    tables.write_results(res, [harness.ResultRecord("Example3", False, "erm", 2, 0, "mean_error", 0.25)])
    assert main(["plotdata", str(res), "--out", str(plot)]) == 0
    table = rows(plot)
    assert len(table) == 2 and table[1][7:] == ["0.25", "0.25", "0.25"]


def test_plotdata_empty_file(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert main(["plotdata", str(empty), "--out", str(tmp_path / "p.csv")]) == 2


def test_plotdata_missing_columns(tmp_path, capsys):
    f = tmp_path / "r.csv"
    f.write_text("family,value\nExample3,0.1\n")
    assert main(["plotdata", str(f), "--out", str(tmp_path / "p.csv")]) == 2
    assert "missing columns" in capsys.readouterr().err


# ------------------------------------------------------------ file formats

def test_results_csv_round_trip(minimal, tmp_path):
    a = tmp_path / "a.csv"
    assert main(["run", "--config", str(minimal), "--set", "data.n_per_env=1", "--out", str(a)]) == 3
    b = tmp_path / "b.csv"
    tables.write_results(b, tables.read_results(a))
    assert a.read_bytes() == b.read_bytes()


def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3)) * 1e-7
    y = rng.standard_normal(20)
    env = rng.integers(-1, 3, 20)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    tables.write_features(a, x, y, env, False)
    tables.write_features(b, *tables.read_features(a), False)
    assert a.read_bytes() == b.read_bytes()


def test_float_format_is_shortest_round_trip():
    for v in (0.1, 1 / 3, 1e-300, 123456789.125, -0.0):
        assert float(tables.fmt_float(v)) == v
    assert tables.fmt_float(0.1) == "0.1"


def test_read_results_bad_bool(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text(",".join(tables.RESULT_COLUMNS) + "\nExample3,yes,erm,2,0,mean_error,0.1,0.0,false,false,\n")
    with pytest.raises(ParseError, match=":2:"):
        tables.read_results(f)
