"""Experiment orchestration: dense baseline, pruning cells, reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .engine import PruneResult, run_pruning
from .errors import FormatError
from .model import SSMModel, init_model, make_probe_inputs, save_checkpoint
from .scoring import compute_scores, top_mass_fraction
from .sparse import flops_count, model_memory_report, save_sparse_checkpoint
from .spectral import TRAJECTORY_COLUMNS, effective_eigenvalues, eigen_trajectory, write_csv
from .tasks import gen_task
from .training import Trainer, evaluate, primary_metric, retention

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "cell",
    "alpha",
    "strategy",
    "schedule",
    "target_sparsity",
    "achieved_sparsity",
    "metric",
    "dense_metric",
    "retention",
    "loss",
    "corrections",
    "max_eig",
    "violations",
    "bitmask_ratio",
    "coordinate_ratio",
    "flops_ratio",
    "status",
)
EFFICIENCY_COLUMNS = (
    "cell",
    "achieved_sparsity",
    "dense_bytes",
    "bitmask_bytes",
    "coordinate_bytes",
    "bitmask_ratio",
    "coordinate_ratio",
    "bitmask_ratio_with_unmaskable",
    "dense_flops",
    "masked_flops",
    "flops_ratio",
    "flops_ratio_with_unmaskable",
)
TIMING_COLUMNS = ("run", "wall_seconds", "overhead_ratio")
REFERENCE_OVERHEAD = (1.7, 2.5)


@dataclass
class DenseRun:
    model: SSMModel
    metrics: dict
    wall_seconds: float
    top20_mass: float


@dataclass
class CellResult:
    index: int
    params: dict
    metrics: dict = field(default_factory=dict)
    retention: float = float("nan")
    achieved_sparsity: float = float("nan")
    group_sparsity: dict = field(default_factory=dict)
    corrections: int = 0
    max_eig: float = float("nan")
    violations: int = 0
    eig_shift_vs_dense: float = float("nan")
    memory: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    error: str | None = None
    prune: PruneResult | None = field(default=None, repr=False)

    @property
    def status(self) -> str:
        return "failed" if self.error else "ok"


@dataclass
class RunReport:
    config: ExperimentConfig
    dense: DenseRun
    cells: list[CellResult]

    @property
    def partial(self) -> bool:
        return any(c.error for c in self.cells)

    def overhead(self, cell: CellResult) -> float:
        return cell.wall_seconds / self.dense.wall_seconds if self.dense.wall_seconds > 0 else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            out.append({
                "cell": c.index,
                "alpha": c.params["alpha"],
                "strategy": c.params["strategy"],
                "schedule": c.params["schedule"],
                "target_sparsity": c.params["s_f"],
                "achieved_sparsity": c.achieved_sparsity,
                "metric": primary_metric(c.metrics) if c.metrics else float("nan"),
                "dense_metric": primary_metric(self.dense.metrics),
                "retention": c.retention,
                "loss": c.metrics.get("loss", float("nan")),
                "corrections": c.corrections,
                "max_eig": c.max_eig,
                "violations": c.violations,
                "bitmask_ratio": c.memory.get("bitmask_ratio", float("nan")),
                "coordinate_ratio": c.memory.get("coordinate_ratio", float("nan")),
                "flops_ratio": c.flops.get("flops_ratio", float("nan")),
                "status": c.status,
            })
        return out


def train_dense(config: ExperimentConfig, dataset=None) -> DenseRun:
    """Dense baseline trained for the same number of steps as a pruning run."""
    cfg = config.resolved()
    dataset = dataset or gen_task(cfg.task)
    start = time.perf_counter()
    model = init_model(cfg.model, cfg.seed)
    Trainer(model, dataset, cfg.train, total_steps=cfg.prune.total_steps, seed=cfg.seed).run(cfg.prune.total_steps)
    wall = time.perf_counter() - start
    metrics = evaluate(model, dataset)
    batches = [dataset.sample(np.random.default_rng([cfg.seed, 3]), cfg.train.batch_size) for _ in range(4)]
    mass = top_mass_fraction(compute_scores(model, batches, alpha=1.0))
    return DenseRun(model, metrics, wall, mass)


def run_cell(config: ExperimentConfig, index: int, params: dict, dense: DenseRun, dataset=None, out_dir=None) -> CellResult:
    cell = CellResult(index, dict(params))
    cfg = config.with_overrides(**params).resolved()
    dataset = dataset or gen_task(cfg.task)
    probes = make_probe_inputs(cfg.model)
    start = time.perf_counter()
    model = init_model(cfg.model, cfg.seed)
    log_path = Path(out_dir) / f"runlog_cell{index}.jsonl" if out_dir else None
    result = run_pruning(model, dataset, cfg.prune, cfg.train, probe_inputs=probes, log_path=log_path)
    cell.wall_seconds = time.perf_counter() - start
    cell.prune = result
    mask = result.mask
    cell.metrics = evaluate(model, dataset, mask)
    cell.retention = retention(dense.metrics, cell.metrics)
    cell.achieved_sparsity = mask.sparsity()
    cell.group_sparsity = mask.group_sparsity()
    cell.corrections = result.corrections_total
    eig = effective_eigenvalues(model, mask, probes)
    cell.max_eig = float(eig.max())
    cell.violations = int(np.sum(eig > 1.0 - cfg.prune.epsilon))
    cell.eig_shift_vs_dense = float(np.abs(effective_eigenvalues(dense.model, None, probes) - eig).max())
    mem = model_memory_report(model, mask)
    fl = flops_count(model, mask, cfg.task.seq_len)
    cell.memory = mem
    cell.flops = {
        "dense_flops": fl.dense,
        "masked_flops": fl.masked,
        "flops_ratio": fl.maskable_ratio,
        "flops_ratio_with_unmaskable": fl.total_ratio,
    }
    if out_dir:
        save_checkpoint(Path(out_dir) / f"cell{index}.ckpt", model, mask)
        save_sparse_checkpoint(Path(out_dir) / f"cell{index}.sparse", model, mask)
    return cell


def run_experiment(config: ExperimentConfig, cells: list[dict] | None = None, out_dir=None) -> RunReport:
    """Dense baseline plus one pruning run per grid cell.

    ``cells`` defaults to the configured sweep grid.  A failing cell is
    recorded and the report is marked partial.
    """
    cfg = config.resolved()
    dataset = gen_task(cfg.task)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    dense = train_dense(cfg, dataset)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "dense.ckpt", dense.model)
    grid = cfg.sweep.cells() if cells is None else cells
    results = []
    for i, params in enumerate(grid):
        try:
            results.append(run_cell(cfg, i, params, dense, dataset, out_dir))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not sink the sweep
            log.exception("cell %d failed", i)
            results.append(CellResult(i, dict(params), error=f"{type(exc).__name__}: {exc}"))
    report = RunReport(cfg, dense, results)
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


def single_cell(config: ExperimentConfig) -> list[dict]:
    p = config.prune
    return [{"alpha": p.alpha, "strategy": p.strategy, "schedule": p.schedule, "s_f": p.s_f}]


# -- outputs ---------------------------------------------------------------


def _records(report: RunReport) -> list[dict]:
    recs = [{"record": "dense_eval", **report.dense.metrics, "metric": primary_metric(report.dense.metrics),
             "top20_mass": report.dense.top20_mass}]
    for c, row in zip(report.cells, report.rows()):
        if c.prune is not None:
            for step in c.prune.log:
                recs.append({"record": "prune_step", "cell": c.index, **step})
        recs.append({"record": "cell_eval", **row, "group_sparsity": c.group_sparsity,
                     "eig_shift_vs_dense": c.eig_shift_vs_dense, "error": c.error})
    return recs


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_outputs(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    write_csv(out / "report.csv", [{k: _fmt(v) for k, v in r.items()} for r in rows], REPORT_COLUMNS)
    traj = []
    for c in report.cells:
        if c.prune is not None:
            traj += [{"cell": c.index, **r} for r in eigen_trajectory(c.prune.log)]
    write_csv(out / "trajectory.csv", traj, ("cell", *TRAJECTORY_COLUMNS))
    eff = []
    for c in report.cells:
        if c.error:
            continue
        eff.append({"cell": c.index, "achieved_sparsity": _fmt(c.achieved_sparsity),
                    **{k: _fmt(c.memory[k]) for k in EFFICIENCY_COLUMNS[2:8]},
                    **{k: _fmt(v) for k, v in c.flops.items()}})
    write_csv(out / "efficiency.csv", eff, EFFICIENCY_COLUMNS)
    timing = [{"run": "dense", "wall_seconds": report.dense.wall_seconds, "overhead_ratio": 1.0}]
    timing += [{"run": f"cell{c.index}", "wall_seconds": c.wall_seconds, "overhead_ratio": report.overhead(c)}
               for c in report.cells]
    write_csv(out / "timing.csv", timing, TIMING_COLUMNS)
    with open(out / "records.jsonl", "w") as fh:
        for rec in _records(report):
            fh.write(json.dumps(rec, default=_json_default) + "\n")
    (out / "config.ini").write_text(report.config.to_ini())
    (out / "report.txt").write_text(render_text(report))


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def render_text(report: RunReport) -> str:
    d = report.dense.metrics
    lines = ["prunelab run report", ""]
    lines.append("dense baseline")
    lines += [f"  {k:<12} {v:.6g}" for k, v in d.items()]
    lines.append(f"  top-20% score mass  {report.dense.top20_mass:.3f} (reference figure 0.80, reported only)")
    lines.append("")
    for row, c in zip(report.rows(), report.cells):
        head = f"cell {c.index}: alpha={row['alpha']} strategy={row['strategy']} schedule={row['schedule']} " \
               f"target={row['target_sparsity']}"
        lines.append(head)
        if c.error:
            lines.append(f"  FAILED: {c.error}")
            continue
        lines += [
            f"  achieved sparsity   {c.achieved_sparsity:.4f}  (ssm {c.group_sparsity.get('ssm', 0):.3f}, "
            f"linear {c.group_sparsity.get('linear', 0):.3f})",
            f"  metric              {row['metric']:.6g}  retention {c.retention:.4f}",
            f"  corrections         {c.corrections}",
            f"  max |lambda|        {c.max_eig:.6f}  violations {c.violations}",
            f"  |lambda| shift vs dense  {c.eig_shift_vs_dense:.4f} (reference bound 0.05, reported only)",
            f"  memory (bitmask)    {c.memory['bitmask_ratio']:.3f}x dense  coordinate {c.memory['coordinate_ratio']:.3f}x",
            f"  FLOPs               {c.flops['flops_ratio']:.3f}x maskable, "
            f"{c.flops['flops_ratio_with_unmaskable']:.3f}x with unmaskable work",
        ]
    lines += ["", "wall clock (not part of the reproducible record)",
              f"  dense               {report.dense.wall_seconds:.1f}s"]
    lo, hi = REFERENCE_OVERHEAD
    for c in report.cells:
        lines.append(f"  cell {c.index:<14} {c.wall_seconds:.1f}s  overhead {report.overhead(c):.2f}x "
                     f"(reference {lo}-{hi}x)")
    if report.partial:
        lines += ["", "PARTIAL REPORT: at least one cell failed"]
    return "\n".join(lines) + "\n"


def render_from_dir(out_dir) -> str:
    """Summarize an existing output directory from its CSV tables."""
    out = Path(out_dir)
    path = out / "report.csv"
    if not path.is_file():
        raise FormatError(f"{path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines = [f"prunelab report ({len(rows)} cells) from {out}"]
    for r in rows:
        lines.append(
            f"  cell {r['cell']}: alpha={r['alpha']} {r['strategy']}/{r['schedule']} "
            f"sparsity {float(r['achieved_sparsity']):.4f} retention {float(r['retention']):.4f} [{r['status']}]"
        )
    return "\n".join(lines) + "\n"


def audit(out_dir) -> list[str]:
    """Check that every number in report.csv matches a logged record."""
    out = Path(out_dir)
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    recs = [json.loads(line) for line in (out / "records.jsonl").read_text().splitlines() if line.strip()]
    dense = next(r for r in recs if r["record"] == "dense_eval")
    problems = []
    for row in rows:
        i = int(row["cell"])
        ev = [r for r in recs if r["record"] == "cell_eval" and r["cell"] == i]
        if not ev:
            problems.append(f"cell {i}: no evaluation record")
            continue
        ev = ev[0]
        for col in REPORT_COLUMNS:
            if str(_fmt(ev[col])) != row[col]:
                problems.append(f"cell {i}: {col}={row[col]} but record has {ev[col]}")
        if row["dense_metric"] != repr(dense["metric"]):
            problems.append(f"cell {i}: dense metric {row['dense_metric']} not in dense record")
        steps = [r for r in recs if r["record"] == "prune_step" and r["cell"] == i]
        if row["status"] == "ok" and steps and repr(steps[-1]["achieved_sparsity"]) != row["achieved_sparsity"]:
            problems.append(f"cell {i}: achieved sparsity differs from last pruning step record")
    return problems

