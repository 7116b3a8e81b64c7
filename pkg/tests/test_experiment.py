import csv
import json

import pytest

from prunelab.config import parse_config
from prunelab.errors import FormatError
from prunelab.experiment import audit, render_from_dir, run_experiment, single_cell
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
T = 40
prune_every_k = 10
finetune_steps = 10
[scoring]
score_batches = 2
[sweep]
alphas = 0.0, 1.0
sparsities = 0.5
[bench]
seq_len = 16
batch = 2
[run]
seed = 3
"""

OUTPUTS = ("report.csv", "report.txt", "trajectory.csv", "efficiency.csv", "timing.csv", "records.jsonl",
           "config.ini", "dense.ckpt", "cell0.ckpt", "cell0.sparse", "runlog_cell0.jsonl")


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    return run_experiment(parse_config(TINY), out_dir=out), out


def test_sweep_writes_every_output(sweep):
    report, out = sweep
    for name in OUTPUTS:
        assert (out / name).is_file(), name
    assert not report.partial and len(report.cells) == 2
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["alpha"]) for r in rows] == [0.0, 1.0]
    assert all(r["status"] == "ok" for r in rows)
    assert all(abs(float(r["achieved_sparsity"]) - 0.5) < 0.01 for r in rows)
    assert "wall_seconds" not in rows[0]


def test_report_numbers_trace_to_records(sweep):
    _, out = sweep
    assert audit(out) == []


def test_audit_catches_edited_report(sweep, tmp_path):
    _, out = sweep
    for name in ("report.csv", "records.jsonl"):
        (tmp_path / name).write_text((out / name).read_text())
    text = (tmp_path / "report.csv").read_text().splitlines()
    head, first = text[0].split(","), text[1].split(",")
    first[head.index("retention")] = "0.999"
    (tmp_path / "report.csv").write_text("\n".join([text[0], ",".join(first), *text[2:]]) + "\n")
    assert any("retention" in p for p in audit(tmp_path))


def test_checkpoints_load(sweep):
    report, out = sweep
    model, mask = load_checkpoint(out / "cell1.ckpt")
    assert mask.equals(report.cells[1].prune.mask)


def test_render_text_and_from_dir(sweep, tmp_path):
    report, out = sweep
    text = (out / "report.txt").read_text()
    assert "dense baseline" in text and "cell 1" in text and "PARTIAL" not in text
    summary = render_from_dir(out)
    assert summary.count("[ok]") == 2
    with pytest.raises(FormatError):
        render_from_dir(tmp_path)


def test_failing_cell_gives_partial_report(tmp_path):
    cfg = parse_config(TINY)
    cells = single_cell(cfg) + [{"alpha": 1.0, "strategy": "random", "schedule": "cubic", "s_f": 0.5}]
    report = run_experiment(cfg, cells=cells, out_dir=tmp_path)
    assert report.partial
    assert report.cells[0].error is None and "ConfigError" in report.cells[1].error
    assert "PARTIAL REPORT" in (tmp_path / "report.txt").read_text()
    recs = [json.loads(line) for line in (tmp_path / "records.jsonl").read_text().splitlines()]
    assert any(r["record"] == "cell_eval" and r["status"] == "failed" for r in recs)
    assert audit(tmp_path) == []
