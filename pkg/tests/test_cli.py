import csv
import subprocess
import sys

import pytest

from prunelab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, OUT_ENV, SUBCOMMANDS, build_parser, main
from prunelab.model import load_checkpoint

TINY = """
[model]
n_layers = 1
model_dim = 8
state_dim = 4
[task]
kind = copy
vocab_size = 6
seq_len = 12
n_train = 64
n_val = 32
delay = 2
[schedule]
T = 30
prune_every_k = 10
finetune_steps = 10
s_f = 0.5
[scoring]
score_batches = 2
[sweep]
alphas = 0.0, 1.0
sparsities = 0.5
[bench]
seq_len = 8
batch = 1
"""


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_parser_has_every_subcommand():
    parser = build_parser()
    for name in SUBCOMMANDS:
        args = parser.parse_args([name])
        assert args.command == name


def test_train_then_analyze(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--seed", "2"]) == EXIT_OK
    assert (out / "dense.ckpt").is_file() and (out / "metrics.json").is_file()
    assert load_checkpoint(out / "dense.ckpt")[0].config.seed == 2
    code = main(["analyze", "--config", str(config), "--out", str(out), "--checkpoint", str(out / "dense.ckpt"),
                 "--masks", "5"])
    assert code == EXIT_OK
    assert "gamma_Delta/gamma_A" in (out / "stability_report.txt").read_text()
    assert (out / "stability.csv").is_file()


def test_prune_report_and_analyze_dense(config, tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["prune", "--config", str(config), "--out", str(out), "--alpha", "0.5", "--strategy", "layerwise",
                 "--schedule", "linear", "--sparsity", "0.6"]) == EXIT_OK
    with open(out / "report.csv", newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    assert (row["alpha"], row["strategy"], row["schedule"], row["target_sparsity"]) == ("0.5", "layerwise", "linear", "0.6")
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert "[ok]" in capsys.readouterr().out
    code = main(["analyze", "--config", str(config), "--out", str(out), "--checkpoint", str(out / "cell0.ckpt"),
                 "--dense", str(out / "dense.ckpt"), "--masks", "5"])
    assert code == EXIT_OK
    assert "max eigenvalue shift" in capsys.readouterr().out


def test_sweep_one_row_per_cell(config, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(config), "--out", str(out)]) == EXIT_OK
    with open(out / "report.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_bench_writes_tables(config, tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "--config", str(config), "--out", str(out)]) == EXIT_OK
    with open(out / "efficiency.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["sparsity"]) for r in rows] == [0.0, 0.5, 0.7]
    assert "1.8N" in (out / "bench.txt").read_text()


def test_env_var_overrides_out(config, tmp_path, monkeypatch):
    env_out, flag_out = tmp_path / "env", tmp_path / "flag"
    monkeypatch.setenv(OUT_ENV, str(env_out))
    assert main(["train", "--config", str(config), "--out", str(flag_out)]) == EXIT_OK
    assert (env_out / "dense.ckpt").is_file() and not flag_out.exists()


def test_config_errors_exit_one(config, tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["train", "--config", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err
    assert main(["prune", "--strategy", "random"]) == EXIT_CONFIG
    assert main(["prune", "--sparsity", "abc"]) == EXIT_CONFIG
    assert main(["launch"]) == EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 2\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["prune", "--config", str(config), "--sparsity", "1.5", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_run_failures_exit_two(config, tmp_path):
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_RUN
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["analyze", "--config", str(config), "--out", str(tmp_path), "--checkpoint", str(garbage)]) == EXIT_RUN


def test_console_script_help():
    done = subprocess.run([sys.executable, "-m", "prunelab.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "analyze" in done.stdout
