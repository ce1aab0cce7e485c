import csv

import pytest

from gridse.cli import main, parse_int_list, read_config

from conftest import csv_tables

SMALL = ["--net", "6bus", "--T", "30", "--seed", "7"]


def _run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_parse_int_list():
    assert parse_int_list("185:230:5,236")[-3:] == [225, 230, 236]
    assert parse_int_list("0:3") == [0, 1, 2, 3]
    assert parse_int_list("4, 2") == [4, 2]


def test_simulate_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert _run("simulate", "--out", tmp_path / name, "--scenario", "daily_sine", *SMALL) == 0
    for f in ("inputs.csv", "labels.csv", "inputs.meta", "measurements.csv", "plan.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg = read_config(tmp_path / "a" / "config.txt")
    assert cfg["command"] == "simulate" and cfg["seed"] == "7" and cfg["scenario"] == "daily_sine"
    assert (tmp_path / "a" / "metrics.txt").exists()


def test_estimate_writes_tables(tmp_path):
    assert _run("estimate", "--out", tmp_path, "--model", "wls", "--T", "3",
                "--net", "14bus", "--bus-range", "1:50") == 0
    rows = _rows(tmp_path / "estimates.csv")
    assert len(rows) == 3
    assert len(_rows(tmp_path / "plot_estimate_magnitude.csv")) == 14


def test_train_psse_default_width(tmp_path):
    assert _run("simulate", "--out", tmp_path / "d", *SMALL) == 0
    assert _run("train-psse", "--out", tmp_path / "m", "--dataset", tmp_path / "d",
                "--epochs", "1") == 0
    assert read_config(tmp_path / "m" / "metrics.txt")["n_neurons"] == "215"


def test_rerun_reproduces_outputs(tmp_path):
    assert _run("sweep-epochs", "--out", tmp_path / "a", "--epoch-grid", "0,1,2", "--neurons", "3",
                *SMALL) == 0
    assert _run("rerun", "--config", tmp_path / "a" / "config.txt", "--out", tmp_path / "b") == 0
    a, b = csv_tables(tmp_path / "a"), csv_tables(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    header = (tmp_path / "a" / "sweep_epochs.csv").read_text().splitlines()[0]
    assert header == "epochs,n_neurons,nrmse,train_time[wallclock]"


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("net=6bus\nT=20\nseed=3\nk=1:3\n")
    assert _run("sweep-k", "--config", cfg, "--out", tmp_path / "o", "--seed", "4") == 0
    echoed = read_config(tmp_path / "o" / "config.txt")
    assert echoed["seed"] == "4" and echoed["T"] == "20"
    assert [r["k"] for r in _rows(tmp_path / "o" / "sweep_k.csv")] == ["1", "2", "3"]


def test_report_aggregates(tmp_path):
    assert _run("sweep-k", "--out", tmp_path / "runs" / "k", "--k", "0:4", *SMALL) == 0
    assert _run("eval-fase", "--out", tmp_path / "runs" / "f", "--model", "simple_rnn_fase",
                "--epochs", "1", "--hidden", "3", *SMALL) == 0
    assert _run("report", "--dataset", tmp_path / "runs", "--out", tmp_path / "rep") == 0
    summary = (tmp_path / "rep" / "summary.txt").read_text()
    assert "k/sweep_k.csv: 5 rows, best k=" in summary
    assert "f/forecasters.csv" in summary
    assert list((tmp_path / "rep").glob("figure_k_*.csv"))
    assert list((tmp_path / "rep").glob("figure_forecasters_*.csv"))


def test_error_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--bogus"])
    assert info.value.code == 2
    assert _run("simulate", "--out", tmp_path, "--net", "nowhere") == 1
    assert "gridse: error:" in capsys.readouterr().err
    assert _run("report", "--out", tmp_path / "empty", "--dataset", tmp_path / "none") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=blue\n")
    assert _run("simulate", "--config", bad, "--out", tmp_path / "x") == 1
