"""Experiment configuration: flat key = value files with sections."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .engine import STRATEGIES, PruneConfig
from .errors import ConfigError
from .model import ModelConfig
from .schedule import SCHEDULE_KINDS
from .sparse import BenchConfig
from .tasks import TaskSpec
from .training import OptimizerConfig

# section -> {file key: (target, attribute)}
_SCHEMA = {
    "model": {
        "n_layers": ("model", "n_layers"),
        "model_dim": ("model", "model_dim"),
        "state_dim": ("model", "state_dim"),
        "param_mode": ("model", "param_mode"),
        "delta_per_state": ("model", "delta_per_state"),
        "norm": ("model", "norm"),
    },
    "task": {
        "kind": ("task", "kind"),
        "vocab_size": ("task", "vocab_size"),
        "seq_len": ("task", "seq_len"),
        "n_train": ("task", "n_train"),
        "n_val": ("task", "n_val"),
        "delay": ("task", "delay"),
        "noise": ("task", "noise"),
        "horizon": ("task", "horizon"),
    },
    "schedule": {
        "kind": ("prune", "schedule"),
        "s0": ("prune", "s0"),
        "s_f": ("prune", "s_f"),
        "sparsity": ("prune", "s_f"),
        "T": ("prune", "T"),
        "t0_frac": ("prune", "t0_frac"),
        "prune_every_k": ("prune", "prune_every_k"),
        "finetune_steps": ("prune", "finetune_steps"),
    },
    "scoring": {
        "alpha": ("prune", "alpha"),
        "strategy": ("prune", "strategy"),
        "alloc_ssm": ("prune", "alloc_ssm"),
        "alloc_linear": ("prune", "alloc_linear"),
        "score_batches": ("prune", "score_batches"),
        "time_accumulated": ("prune", "time_accumulated"),
        "gate_diversity": ("prune", "gate_diversity"),
        "centrality_beta": ("prune", "centrality_beta"),
    },
    "stability": {
        "epsilon": ("prune", "epsilon"),
        "lambda_coef": ("prune", "lambda_coef"),
        "correct": ("prune", "correct"),
        "correction_budget": ("prune", "correction_budget"),
    },
    "train": {
        "lr_start": ("train", "lr_start"),
        "lr_end": ("train", "lr_end"),
        "beta1": ("train", "beta1"),
        "beta2": ("train", "beta2"),
        "weight_decay": ("train", "weight_decay"),
        "batch_size": ("train", "batch_size"),
        "grad_clip": ("train", "grad_clip"),
    },
    "sweep": {
        "alphas": ("sweep", "alphas"),
        "strategies": ("sweep", "strategies"),
        "schedules": ("sweep", "schedules"),
        "sparsities": ("sweep", "sparsities"),
    },
    "bench": {
        "seq_len": ("bench", "seq_len"),
        "batch": ("bench", "batch"),
        "warmup": ("bench", "warmup"),
        "repeats": ("bench", "repeats"),
    },
    "run": {
        "seed": ("run", "seed"),
        "out": ("run", "out"),
    },
}


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    strategies: tuple[str, ...] = ("global",)
    schedules: tuple[str, ...] = ("cubic",)
    sparsities: tuple[float, ...] = (0.5, 0.7)

    def __post_init__(self):
        if not (self.alphas and self.strategies and self.schedules and self.sparsities):
            raise ConfigError("sweep lists must be non-empty")
        bad = [s for s in self.strategies if s not in STRATEGIES] + [s for s in self.schedules if s not in SCHEDULE_KINDS]
        if bad:
            raise ConfigError(f"unknown sweep entries {bad}")
        if any(a < 0 for a in self.alphas) or any(not 0 <= s < 1 for s in self.sparsities):
            raise ConfigError("sweep alphas must be >= 0 and sparsities in [0, 1)")

    def cells(self) -> list[dict]:
        return [
            {"alpha": a, "strategy": st, "schedule": sc, "s_f": s}
            for s in self.sparsities
            for st in self.strategies
            for sc in self.schedules
            for a in self.alphas
        ]


@dataclass(frozen=True)
class RunSpec:
    seed: int = 0
    out: str = "prunelab_out"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    prune: PruneConfig = field(default_factory=PruneConfig)
    train: OptimizerConfig = field(default_factory=OptimizerConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    run: RunSpec = field(default_factory=RunSpec)

    @property
    def seed(self) -> int:
        return self.run.seed

    def resolved(self) -> ExperimentConfig:
        """Propagate task shape and the run seed into the component configs."""
        task = replace(self.task, seed=self.seed)
        model = replace(
            self.model,
            task_kind=task.task_kind,
            vocab_size=task.vocab_size,
            n_features=1,
            n_outputs=task.n_outputs,
            seed=self.seed,
        )
        return replace(self, task=task, model=model, prune=replace(self.prune, seed=self.seed))

    def with_overrides(self, **kw) -> ExperimentConfig:
        """Override by flat name: seed, out, s_f, alpha, strategy, schedule, param_mode."""
        cfg = self
        for name, value in kw.items():
            if value is None:
                continue
            if name in ("seed", "out"):
                cfg = replace(cfg, run=replace(cfg.run, **{name: value}))
            elif name == "param_mode":
                cfg = replace(cfg, model=replace(cfg.model, param_mode=value))
            elif name in ("s_f", "alpha", "strategy", "schedule"):
                cfg = replace(cfg, prune=replace(cfg.prune, **{name: value}))
            else:
                raise ConfigError(f"unknown override {name!r}")
        return cfg

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for section, keys in _SCHEMA.items():
            parser.add_section(section)
            for key, (target, attr) in keys.items():
                if key == "sparsity":
                    continue
                parser.set(section, key, _format(getattr(getattr(self, target), attr)))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    base = ExperimentConfig()
    updates: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            target, attr = _SCHEMA[section][key]
            default = getattr(getattr(base, target), attr)
            updates.setdefault(target, {})[attr] = _convert(raw, default, f"{source} [{section}] {key}")
    parts = {}
    for target, values in updates.items():
        current = getattr(base, target)
        try:
            parts[target] = replace(current, **values)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"{source}: {exc}") from None
            raise ConfigError(f"{source}: invalid [{target}] settings: {exc}") from None
    return replace(base, **parts)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), source=str(p))


def config_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)
