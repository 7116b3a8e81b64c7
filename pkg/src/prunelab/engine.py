"""Gradual stability-aware pruning loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .masking import DEFAULT_ALLOCATION, PruneMask, build_mask
from .model import SSMModel, make_probe_inputs, model_forward
from .schedule import SCHEDULE_KINDS, ScheduleState, pruning_iterations, sparsity_at
from .scoring import compute_scores
from .stability import max_eigs, stability_correct_mask, stability_penalty
from .tasks import Dataset
from .training import OptimizerConfig, StepRecord, Trainer

STRATEGIES = ("global", "layerwise", "allocated")
LOG_FIELDS = (
    "step",
    "iteration",
    "target_sparsity",
    "achieved_sparsity",
    "task_loss",
    "stability_penalty",
    "max_eig",
    "corrections_count",
)
_REMASK_SCOPE = {"global": "global", "layerwise": "block", "allocated": "group"}


@dataclass(frozen=True)
class PruneConfig:
    s0: float = 0.0
    s_f: float = 0.5
    T: int = 5000
    t0_frac: float = 0.25
    prune_every_k: int = 50
    finetune_steps: int = 200
    schedule: str = "cubic"
    alpha: float = 1.0
    strategy: str = "global"
    alloc_ssm: float = DEFAULT_ALLOCATION["ssm"]
    alloc_linear: float = DEFAULT_ALLOCATION["linear"]
    epsilon: float = 0.01
    lambda_coef: float = 0.1
    score_batches: int = 8
    time_accumulated: bool = True
    gate_diversity: bool = False
    centrality_beta: float = 0.0
    correct: bool = True
    correction_budget: int = 100
    verify_masked: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULE_KINDS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.finetune_steps < 0 or self.score_batches < 1:
            raise ConfigError("finetune_steps must be >= 0 and score_batches >= 1")
        if not 0 < self.epsilon <= 0.1:
            raise ConfigError(f"epsilon must lie in (0, 0.1], got {self.epsilon}")
        if self.lambda_coef < 0:
            raise ConfigError("lambda_coef must be >= 0")
        self.schedule_state()

    @classmethod
    def from_dict(cls, raw) -> PruneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown pruning keys: {sorted(unknown)}")
        return cls(**raw)

    def schedule_state(self) -> ScheduleState:
        return ScheduleState.from_fraction(self.s_f, self.T, self.t0_frac, self.s0, self.prune_every_k)

    @property
    def allocation(self) -> dict[str, float]:
        return {"ssm": self.alloc_ssm, "linear": self.alloc_linear}

    @property
    def total_steps(self) -> int:
        return self.T + self.finetune_steps


@dataclass
class PruneResult:
    model: SSMModel
    mask: PruneMask
    log: list[dict]
    train_log: list[StepRecord] = field(default_factory=list)
    corrections_total: int = 0


def _masked_entries_zero(model: SSMModel, mask: PruneMask) -> bool:
    return all(not np.any(model.params[k][~keep]) for k, keep in mask.keep.items())


def run_pruning(
    model: SSMModel,
    dataset: Dataset,
    config: PruneConfig,
    optimizer: OptimizerConfig | None = None,
    probe_inputs=None,
    log_path=None,
) -> PruneResult:
    """Train ``model`` in place while pruning it along the configured schedule.

    Optimizer steps ``0..T-1`` run densely until ``t0``; at every pruning
    iteration (every ``prune_every_k`` from ``t0``, the last at ``T``) the
    mask is rebuilt from fresh scores, repaired for stability and applied.
    Steps between pruning iterations, and ``finetune_steps`` more after the
    last one, minimize the task loss plus the eigenvalue penalty.  The
    learning rate decays over all ``T + finetune_steps`` steps.
    """
    optimizer = optimizer or OptimizerConfig()
    state = config.schedule_state()
    probes = make_probe_inputs(model.config) if probe_inputs is None else probe_inputs
    trainer = Trainer(model, dataset, optimizer, total_steps=config.total_steps, seed=config.seed)
    score_rng = np.random.default_rng([config.seed, 2])
    mask = PruneMask.ones(model)
    pruning = config.s_f > 0
    events = pruning_iterations(state) if pruning else []
    lam = config.lambda_coef if pruning else 0.0
    log: list[dict] = []
    train_log: list[StepRecord] = []
    corrections_total = 0

    def check(rec: StepRecord) -> None:
        if config.verify_masked and mask.n_masked and not _masked_entries_zero(model, mask):
            raise ContractError(f"masked parameter updated at optimizer step {rec.step}")

    def advance(n: int, penalized: bool) -> None:
        try:
            train_log.extend(
                trainer.run(n, mask if mask.n_masked else None, config.epsilon, lam if penalized else 0.0, check)
            )
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (pruning run, {len(log)} pruning steps done)") from exc

    t = 0
    for i, it in enumerate(events):
        advance(it - t, penalized=i > 0)
        t = it
        target = sparsity_at(state, it, config.schedule)
        batches = [dataset.sample(score_rng, optimizer.batch_size) for _ in range(config.score_batches)]
        scores = compute_scores(
            model,
            batches,
            alpha=config.alpha,
            mask=mask,
            time_accumulated=config.time_accumulated,
            gate_diversity=config.gate_diversity,
            centrality_beta=config.centrality_beta,
            probe_inputs=probes,
        )
        # entries pruned earlier stay pruned
        for key, keep in mask.keep.items():
            scores.values[key] = np.where(keep, scores.values[key], -np.inf)
        new_mask = build_mask(scores, target, config.strategy, config.allocation, final_sparsity=config.s_f)
        if config.correct:
            new_mask = stability_correct_mask(
                new_mask,
                model,
                probes,
                config.epsilon,
                scores=scores,
                previous_mask=mask,
                budget=config.correction_budget,
                remask_scope=_REMASK_SCOPE[config.strategy],
            )
        n_corr = len(new_mask.corrections)
        corrections_total += n_corr
        mask = PruneMask(new_mask.keep, [], new_mask.unresolved)
        model.apply_mask(mask)
        worst = max_eigs(model, probes, mask)
        task_loss = float(np.mean(trainer_losses(model, batches, mask)))
        log.append(
            {
                "step": i,
                "iteration": it,
                "target_sparsity": target,
                "achieved_sparsity": mask.sparsity(),
                "task_loss": task_loss,
                "stability_penalty": stability_penalty(list(worst[:, None, :]), config.epsilon).item(),
                "max_eig": float(worst.max()),
                "corrections_count": n_corr,
                "violations": int(np.sum(worst > 1.0 - config.epsilon)),
                "unresolved": len(new_mask.unresolved),
            }
        )
        mask.unresolved = []
    advance(config.total_steps - t, penalized=pruning)
    if log_path is not None:
        write_run_log(log_path, log)
    return PruneResult(model, mask, log, train_log, corrections_total)


def trainer_losses(model: SSMModel, batches, mask) -> list[float]:
    return [model_forward(model, b, mask=mask).loss.item() for b in batches]


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def write_run_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: _json_value(v) for k, v in rec.items()}) + "\n")


def read_run_log(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: not a JSON record") from exc
            missing = [f for f in LOG_FIELDS if f not in rec]
            if missing:
                raise FormatError(f"{path}:{n}: missing fields {missing}")
            out.append(rec)
    return out


def config_echo(config: PruneConfig) -> dict:
    return asdict(config)
