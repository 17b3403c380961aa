import json
from pathlib import Path

import pytest

from rhcbf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY, main

TOY = str(Path(__file__).resolve().parent.parent / "configs" / "toy.toml")


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors():
    assert run() == EXIT_USAGE
    assert run("fly") == EXIT_USAGE
    assert run("collect", "--set", "data.n_ic") == EXIT_USAGE
    assert run("collect", "--config", "/nonexistent/x.toml") == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert run("--help") == EXIT_OK
    assert "collect" in capsys.readouterr().out


def test_missing_dataset_is_runtime_error(tmp_path):
    assert run("train", "--config", TOY, "--out", tmp_path) == EXIT_RUNTIME
    assert run("plot", "--out", tmp_path) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    short = ["--config", TOY, "--out", out, "--set", "train.epochs=10", "--set", "data.ring_resolution=0.05"]
    assert run("collect", *short) == EXIT_OK
    first = {p.name: p.read_bytes() for p in (out / "data").iterdir()}
    assert run("collect", *short) == EXIT_OK
    second = {p.name: p.read_bytes() for p in (out / "data").iterdir()}
    assert run("train", *short) == EXIT_OK
    return out, short, first, second


def test_collect_rerun_is_byte_identical(toy_run):
    _, _, first, second = toy_run
    assert first == second and first


def test_train_writes_checkpoint_and_trace(toy_run):
    out = toy_run[0]
    ck = json.loads((out / "models" / "robust.json").read_text())
    assert ck["metadata"]["model"] == "robust"
    assert (out / "models" / "robust_trace.csv").read_text().count("\n") >= 10


def test_verify_writes_report(toy_run):
    out, short, _, _ = toy_run
    code = run("verify", *short)
    assert code in (EXIT_OK, EXIT_VERIFY)  # ten epochs rarely certify anything
    rep = json.loads((out / "verify" / "robust.json").read_text())
    assert (code == EXIT_OK) == rep["passed"]


def test_changed_data_config_needs_force(toy_run):
    out, short, _, _ = toy_run
    changed = short + ["--set", "data.seed=1"]
    assert run("train", *changed) == EXIT_RUNTIME
    assert run("verify", *changed, "--force") in (EXIT_OK, EXIT_VERIFY)


def test_tiny_walker_pipeline(tmp_path):
    over = []
    for kv in ["sweep.n_grid=2", "sweep.seeds=[0]", "sweep.deltas=[0.0]", "sweep.max_steps=2",
               'sweep.controllers=["energy", "zero"]', "models={}"]:
        over += ["--set", kv]
    assert run("sweep", "--out", tmp_path, *over) == EXIT_OK
    header = (tmp_path / "sweep" / "aggregate.csv").read_text()
    assert "energy" in header and "zero" in header
    assert run("plot", "--out", tmp_path, *over) == EXIT_OK
    assert list((tmp_path / "plots").glob("*.svg"))
    assert run("report", "--out", tmp_path, *over) == EXIT_OK
    assert (tmp_path / "report.json").exists()
