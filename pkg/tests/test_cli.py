import csv
import io
import math
import subprocess
import sys

import numpy as np
import pytest

from lrvi.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from lrvi.graph_model import load_factor_graph, read_factor_graph, save_factor_graph
from lrvi.harness import CSV_COLUMNS, gen_wainwright_jordan, read_sweep_csv


def _rows(text):
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return list(csv.DictReader(io.StringIO(body)))


@pytest.fixture
def wj_file(tmp_path):
    path = tmp_path / "wj.fg"
    assert main(["gen", "wj", "--l", "3", "--seed", "4", "--out", str(path)]) == EXIT_OK
    return path


def test_gen_writes_metadata_and_loadable_model(wj_file):
    text = wj_file.read_text()
    assert text.startswith("# generator=wj L=3 seed=4 rng=PCG64\n")
    fg = read_factor_graph(wj_file)
    assert save_factor_graph(fg) == save_factor_graph(gen_wainwright_jordan(3, 4))


def test_gen_other_models(tmp_path, capsys):
    assert main(["gen", "fc", "--n", "4", "--h", "0.5"]) == EXIT_OK
    fg = load_factor_graph(capsys.readouterr().out)
    assert fg.num_vars == 4 and len(fg.factors) == 6 + 4
    assert main(["gen", "potts", "--n", "6", "--seed", "1"]) == EXIT_OK
    assert load_factor_graph(capsys.readouterr().out).cards == (3,) * 6
    assert main(["gen", "potts", "--n", "5"]) == EXIT_INPUT
    assert main(["gen", "fc"]) == EXIT_INPUT


def test_exact_matches_single_spin_closed_form(tmp_path, capsys):
    path = tmp_path / "one.fg"
    path.write_text(f"1\n\n1\n0\n2\n2\n0 {math.exp(-1)!r}\n1 {math.e!r}\n")
    assert main(["exact", "--model", str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    logz = float(out.splitlines()[0].split("log_Z=")[1].split()[0])
    assert logz == pytest.approx(math.log(2 * math.cosh(1.0)), abs=1e-14)
    rows = _rows(out)
    up = [r for r in rows if r["kind"] == "marginal" and r["x_i"] == "1"][0]
    assert float(up["value"]) == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)


def test_exact_pairs_and_temperature(wj_file, capsys):
    assert main(["exact", "--model", str(wj_file), "--pairs", "edges", "--t", "2"]) == EXIT_OK
    rows = _rows(capsys.readouterr().out)
    kinds = {r["kind"] for r in rows}
    assert kinds == {"marginal", "pair", "covariance"}
    assert len([r for r in rows if r["kind"] == "pair"]) == 12 * 4
    assert main(["exact", "--model", str(wj_file), "--pairs", "all"]) == EXIT_OK
    rows = _rows(capsys.readouterr().out)
    assert len([r for r in rows if r["kind"] == "pair"]) == 36 * 4


def test_infer(wj_file, capsys):
    rc = main(["infer", "--model", str(wj_file), "--regime", "onoff", "--t", "2.5"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "status=converged" in out.splitlines()[0]
    rows = _rows(out)
    assert len(rows) == 18
    p = np.array([float(r["marginal"]) for r in rows]).reshape(9, 2)
    assert np.allclose(p.sum(1), 1.0, atol=1e-12)


def test_sweep(wj_file, tmp_path):
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", "--model", str(wj_file), "--regime", "diag", "--t-start", "4",
               "--t-end", "1.5", "--t-steps", "4", "--out", str(out)])
    assert rc == EXIT_OK
    text = out.read_text()
    assert text.splitlines()[0].split(",") == list(CSV_COLUMNS)
    rows = read_sweep_csv(text)
    assert [r["T"] for r in rows] == sorted((r["T"] for r in rows), reverse=True)
    assert all(r["status"] == "converged" for r in rows)
    assert all(r["mad_marginal"] < 0.05 for r in rows)


@pytest.mark.parametrize("argv", [
    ["infer", "--model", "/nonexistent/model.fg"],
    ["infer", "--model", "MODEL", "--regime", "sideways"],
    ["infer", "--model", "MODEL", "--t", "-1"],
    ["infer", "--model", "MODEL", "--damping", "1.5"],
    ["sweep", "--model", "MODEL", "--t-start", "2", "--t-end", "1", "--direction", "up"],
    ["frobnicate"],
])
def test_bad_input_exit_code(argv, wj_file, capsys):
    argv = [str(wj_file) if a == "MODEL" else a for a in argv]
    assert main(argv) == EXIT_INPUT
    capsys.readouterr()


def test_malformed_model_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.fg"
    bad.write_text("1\n\n2\n0 0\n2 2\n1\n0 1\n")
    assert main(["exact", "--model", str(bad)]) == EXIT_INPUT
    assert "duplicate" in capsys.readouterr().err


def test_numerical_fault_exit_code(wj_file, monkeypatch, capsys):
    from lrvi import cli
    from lrvi.inference import NumericalFault

    def boom(self, *a, **k):
        raise NumericalFault("NaN in outer region 3")

    monkeypatch.setattr(cli.ConstrainedSolver, "solve", boom)
    assert main(["infer", "--model", str(wj_file)]) == EXIT_NUMERIC
    assert "outer region 3" in capsys.readouterr().err


def test_extreme_factor_does_not_crash(tmp_path, capsys):
    path = tmp_path / "wild.fg"
    path.write_text("2\n\n2\n0 1\n2 2\n4\n0 1e300\n1 1e-300\n2 1e-300\n3 1e300\n"
                    "\n1\n0\n2\n2\n0 1\n1 1\n")
    rc = main(["infer", "--model", str(path), "--regime", "none", "--t", "1e-3"])
    assert rc in (EXIT_OK, EXIT_NUMERIC)
    capsys.readouterr()


def test_module_entry_point(wj_file):
    res = subprocess.run([sys.executable, "-m", "lrvi", "infer", "--model", str(wj_file),
                          "--t", "3"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "variable,state,marginal" in res.stdout
