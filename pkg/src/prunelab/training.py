"""AdamW training with a linearly decaying learning rate, plus evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DivergenceError
from .model import ComponentKind, ParamKey, SSMModel, forward, model_forward
from .stability import stability_penalty
from .tasks import Batch, Dataset

# decay would drag these towards zero, i.e. towards |lambda| = 1 for A_log
NO_DECAY_KINDS = (ComponentKind.STATE_TRANSITION, ComponentKind.SKIP_TERM)


@dataclass(frozen=True)
class OptimizerConfig:
    lr_start: float = 3e-3
    lr_end: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, raw) -> OptimizerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**raw)


def linear_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Learning rate at ``step`` of ``total`` (0-based); the last step gets lr_end."""
    if total <= 1 or step >= total - 1:
        return lr_end
    return lr_start + (lr_end - lr_start) * step / (total - 1)


class AdamW:
    """Adam with decoupled weight decay; masked entries get no update."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, keep: dict | None = None) -> None:
        c = self.config
        keep = keep or {}
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for key, g in grads.items():
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            v = self.v[key]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p = params[key]
            if c.weight_decay and not (isinstance(key, ParamKey) and key.kind in NO_DECAY_KINDS):
                p = p * (1.0 - lr * c.weight_decay)
            p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if key in keep:
                k = keep[key]
                p = p * k
                m *= k
                v *= k
            params[key] = p


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    task_loss: float
    penalty: float
    max_eig: float


class Trainer:
    """Stateful optimizer loop shared by dense training and pruning fine-tunes.

    ``total_steps`` fixes the learning-rate schedule; it keeps decaying across
    calls to :meth:`run` rather than restarting.
    """

    def __init__(self, model: SSMModel, dataset: Dataset, config: OptimizerConfig, total_steps: int, seed: int = 0):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.total_steps = total_steps
        self.opt = AdamW(config)
        self.rng = np.random.default_rng([seed, 1])
        self.step_index = 0

    def lr(self) -> float:
        return linear_lr(self.step_index, self.total_steps, self.config.lr_start, self.config.lr_end)

    def step(self, mask=None, epsilon: float = 0.01, lambda_coef: float = 0.0) -> StepRecord:
        model = self.model
        keep = {k: np.asarray(v, dtype=np.float64) for k, v in (getattr(mask, "keep", mask) or {}).items()}
        batch = self.dataset.sample(self.rng, self.config.batch_size)
        with tn.GradTape() as tape:
            res = model_forward(model, batch, mask=keep or None, tape=tape)
            eigs = [tr.eig for tr in res.traces]
            penalty = stability_penalty(eigs, epsilon) if lambda_coef > 0 else None
            loss = res.loss if penalty is None else res.loss + lambda_coef * penalty
        value = loss.item()
        lr = self.lr()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at optimizer step {self.step_index} (lr={lr:.3g})")
        grads = tn.backward(tape, loss)
        for key, k in keep.items():
            grads[key] = grads[key] * k
        clip_gradients(grads, self.config.grad_clip)
        self.opt.step(model.params, grads, lr, keep)
        record = StepRecord(
            step=self.step_index,
            lr=lr,
            loss=value,
            task_loss=res.loss.item(),
            penalty=0.0 if penalty is None else penalty.item(),
            max_eig=float(max(e.data.max() for e in eigs)),
        )
        self.step_index += 1
        return record

    def run(self, steps: int, mask=None, epsilon: float = 0.01, lambda_coef: float = 0.0, on_step=None) -> list[StepRecord]:
        out = []
        for _ in range(steps):
            rec = self.step(mask, epsilon, lambda_coef)
            out.append(rec)
            if on_step is not None:
                on_step(rec)
        return out


def train(
    model: SSMModel,
    dataset: Dataset,
    config: OptimizerConfig | None = None,
    mask=None,
    steps: int = 2000,
    seed: int = 0,
) -> tuple[SSMModel, list[StepRecord]]:
    """Train ``model`` in place for ``steps`` optimizer steps."""
    config = config or OptimizerConfig()
    if mask is not None:
        model.apply_mask(mask)
    trainer = Trainer(model, dataset, config, total_steps=steps, seed=seed)
    return model, trainer.run(steps, mask)


def evaluate(model: SSMModel, dataset: Dataset | Batch, mask=None, split: str = "val", batch_size: int = 256) -> dict:
    """Accuracy, loss and perplexity (classification) or MSE (regression)."""
    data = dataset.split(split) if isinstance(dataset, Dataset) else dataset
    n = len(data.inputs)
    if model.config.task_kind == "regression":
        sq, count = 0.0, 0
        for i in range(0, n, batch_size):
            out, _ = forward(model, data.inputs[i:i + batch_size], mask=mask)
            diff = out.data - data.targets[i:i + batch_size]
            sq += float(np.sum(diff * diff))
            count += diff.size
        mse = sq / count
        return {"mse": mse, "loss": mse}
    correct, nll, count = 0, 0.0, 0
    for i in range(0, n, batch_size):
        out, _ = forward(model, data.inputs[i:i + batch_size], mask=mask)
        logits = out.data
        targets = data.targets[i:i + batch_size]
        valid = targets >= 0
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, np.where(valid, targets, 0)[..., None], axis=-1)[..., 0]
        nll += float(-np.maximum(picked, math.log(tn.CE_PROB_FLOOR))[valid].sum())
        correct += int((logits.argmax(axis=-1) == targets)[valid].sum())
        count += int(valid.sum())
    loss = nll / count
    return {"accuracy": correct / count, "loss": loss, "perplexity": math.exp(loss)}


def primary_metric(metrics: dict) -> float:
    """Higher-is-better headline number: accuracy, or negative MSE for regression."""
    return metrics["accuracy"] if "accuracy" in metrics else -metrics["mse"]


def retention(dense: dict, pruned: dict) -> float:
    """Pruned-over-dense quality, 1.0 meaning no loss (inverted MSE ratio for regression)."""
    if "accuracy" in dense:
        return pruned["accuracy"] / dense["accuracy"] if dense["accuracy"] else float("nan")
    return dense["mse"] / pruned["mse"] if pruned["mse"] else float("nan")
