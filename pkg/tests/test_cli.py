import subprocess
import sys

import numpy as np
import pytest

from kernel_renorm import cli
from kernel_renorm.experiments import ExperimentRecord

CONFIG = """
[run]
seed = 2
[data]
P = 10
P_test = 4
N0 = 8
[network]
architecture = cnn
activation = erf
width = 3
M = 2
S = 2
[hyper]
lambda1 = 1
beta = 40
[train]
eta = 5e-3
temperature = 2e-2
steps = 300
burn_in = 100
thin = 50
chains = 2
[scaling]
sizes = 10:3, 20:6, 40:12
mode = theory
[sweep]
channels = 1, 8
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG)
    return path


def run(config, tmp_path, *cmd):
    return cli.main([*cmd, str(config), "--out", str(tmp_path / "out")])


@pytest.mark.parametrize("command, produced", [
    ("gen-data", "train_inputs.csv"), ("kernel", "cache"), ("solve", "solve.csv"), ("predict", "predict.csv"),
    ("simulate", "simulate_chains.csv"), ("scaling", "scaling_fit.csv"), ("channel-sweep", "channel_sweep.csv"),
])
def test_subcommands_write_results(config, tmp_path, command, produced, capsys):
    assert run(config, tmp_path, command) == 0
    assert (tmp_path / "out" / produced).exists()
    assert "wrote" in capsys.readouterr().out


def test_written_tables_carry_the_configuration(config, tmp_path):
    run(config, tmp_path, "solve")
    rec = ExperimentRecord.read(tmp_path / "out" / "solve.csv", "solve")
    assert rec.metadata["seed"] == "2"
    assert (tmp_path / "out" / "solve.config.ini").read_text() == CONFIG


def test_seed_override_changes_data(config, tmp_path):
    cli.main(["gen-data", str(config), "--out", str(tmp_path / "a")])
    cli.main(["gen-data", str(config), "--out", str(tmp_path / "b"), "--seed", "9"])
    a = np.loadtxt(tmp_path / "a" / "train_inputs.csv", delimiter=",")
    b = np.loadtxt(tmp_path / "b" / "train_inputs.csv", delimiter=",")
    assert a.shape == b.shape and not np.allclose(a, b)


def test_configuration_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nwidth = 0\n")
    assert cli.main(["solve", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    assert cli.main(["solve", str(tmp_path / "missing.ini")]) == 2


def test_numerical_failure_exits_3(config, tmp_path):
    config.write_text(CONFIG + "[solver]\nmax_iter = 1\ntol = 1e-15\n")
    assert run(config, tmp_path, "solve") == 3
    assert (tmp_path / "out" / "solve.csv").exists()


def test_bad_kernel_file_exits_2(config, tmp_path):
    run(config, tmp_path, "kernel")
    (cache,) = (tmp_path / "out" / "cache").iterdir()
    cache.write_bytes(b"# kernel-renorm kernel v1\nP=10\n" + b"\0" * 16)
    assert run(config, tmp_path, "solve") == 2


def test_parser_lists_every_subcommand():
    text = cli.build_parser().format_help()
    for name in ("gen-data", "kernel", "solve", "predict", "simulate", "scaling", "channel-sweep", "verify"):
        assert name in text


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "kernel_renorm.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "kernel-renorm" in out.stdout


def test_verify_fast_checks(config, tmp_path, capsys):
    code = run(config, tmp_path, "verify")
    out = capsys.readouterr().out
    assert code == 0, out
    assert "failed" in out and (tmp_path / "out" / "verify.csv").exists()
