import json

import numpy as np
import pytest

from dyncausal.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from dyncausal.fed import GraphEstimate

SMALL = {"scenario": {"D": 3, "T": 8, "L": 1, "K": 2, "n_k": 40, "seed": 0},
         "dism": {"h": 8, "n_permutations": 2}, "dcto": {"R": 4, "E": 1, "m": 4}}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))

    def _run(command, *args):
        return main([command, "--config", str(cfg), *map(str, args)])
    return _run


def test_synth_dism_dcto_eval(tmp_path, run, capsys):
    assert run("synth", "--out", tmp_path / "s", "--csv") == EXIT_OK
    data = tmp_path / "s" / "dataset.ddic"
    assert (tmp_path / "s" / "csv").is_dir()
    assert run("dism", "--out", tmp_path / "d", "--data", data) == EXIT_OK
    priors = tmp_path / "d" / "priors.ddpr"
    assert run("dcto", "--out", tmp_path / "t", "--data", data, "--priors", priors,
               "--checkpoint-every", 2) == EXIT_OK
    assert (tmp_path / "t" / "checkpoint_r0002.ddck").exists()
    assert run("eval", "--out", tmp_path / "e", "--estimate", tmp_path / "t" / "estimate.ddge",
               "--truth", tmp_path / "s" / "truth.ddgt", "--priors", priors) == EXIT_OK
    out = capsys.readouterr().out
    assert "auroc:" in out and "rmse:" in out
    for d in "sdte":
        echo = json.loads((tmp_path / d / "config.json").read_text())
        assert echo["scenario"]["T"] == 8 and echo["dcto"]["R"] == 4

    # resuming from the mid-run checkpoint reproduces the full run
    assert run("dcto", "--out", tmp_path / "r", "--data", data, "--priors", priors,
               "--resume", tmp_path / "t" / "checkpoint_r0002.ddck") == EXIT_OK
    a = GraphEstimate.load(tmp_path / "t" / "estimate.ddge")
    b = GraphEstimate.load(tmp_path / "r" / "estimate.ddge")
    assert np.array_equal(a.W, b.W) and np.array_equal(a.A, b.A)


def test_pipeline(tmp_path, run):
    assert run("pipeline", "--out", tmp_path, "--set", "dcto.R=2") == EXIT_OK
    names = {p.name for p in tmp_path.iterdir()}
    assert {"priors.ddpr", "estimate.ddge", "rounds.csv", "report.csv", "pipeline.json",
            "config.json", "loss_curve.csv"} <= names
    assert json.loads((tmp_path / "config.json").read_text())["dcto"]["R"] == 2


def test_exit_codes(tmp_path, run, capsys):
    assert run("synth", "--out", tmp_path / "s", "--set", "dcto.bogus=1") == EXIT_CONFIG
    assert run("synth", "--out", tmp_path / "s", "--set", "scenario.D=1") == EXIT_CONFIG
    assert run("synth", "--out", tmp_path / "s", "--threads", 0) == EXIT_CONFIG
    assert run("dism", "--out", tmp_path / "d", "--data", tmp_path / "missing") == EXIT_IO
    (tmp_path / "junk.ddic").write_bytes(b"junk")
    assert run("dism", "--out", tmp_path / "d", "--data", tmp_path / "junk.ddic") == EXIT_IO
    assert run("synth", "--out", tmp_path / "s") == EXIT_OK
    data = tmp_path / "s" / "dataset.ddic"
    assert run("dism", "--out", tmp_path / "d", "--data", data) == EXIT_OK
    assert run("dcto", "--out", tmp_path / "t", "--data", data,
               "--priors", tmp_path / "d" / "priors.ddpr",
               "--set", "dcto.eta=1e12", "--set", "dcto.E=5") == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "numeric failure" in err and "I/O error" in err and "config error" in err


def test_mismatched_priors_are_a_config_error(tmp_path, run):
    assert run("synth", "--out", tmp_path / "a") == EXIT_OK
    assert run("synth", "--out", tmp_path / "b", "--set", "scenario.T=9") == EXIT_OK
    assert run("dism", "--out", tmp_path / "d", "--data", tmp_path / "a" / "dataset.ddic") == 0
    assert run("dcto", "--out", tmp_path / "t", "--data", tmp_path / "b" / "dataset.ddic",
               "--priors", tmp_path / "d" / "priors.ddpr") == EXIT_CONFIG


def test_output_root_from_environment(tmp_path, run, monkeypatch):
    monkeypatch.setenv("DYNCAUSAL_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("synth") == EXIT_OK
    assert (tmp_path / "root" / "synth" / "dataset.ddic").exists()


def test_reruns_are_bit_identical(tmp_path, run):
    for d in ("a", "b"):
        assert run("synth", "--out", tmp_path / d) == EXIT_OK
        assert run("dism", "--out", tmp_path / d, "--data", tmp_path / d / "dataset.ddic") == 0
    for name in ("dataset.ddic", "truth.ddgt", "priors.ddpr"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name
