"""Synthetic sequence tasks with deterministic, disjoint train/validation splits."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

TASK_NAMES = ("copy", "induction", "char_lm", "sine")
IGNORE = -1


class Batch(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    seq_len: int = 32
    n_train: int = 2048
    n_val: int = 256
    seed: int = 0
    delay: int = 4
    noise: float = 0.0
    horizon: int = 1
    grammar_branching: int = 3

    def __post_init__(self):
        if self.kind not in TASK_NAMES:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_NAMES}")
        if self.seq_len < 2 or self.n_train < 1 or self.n_val < 1:
            raise ConfigError("task needs seq_len >= 2 and non-empty splits")
        if self.kind == "copy" and not 0 < self.delay < self.seq_len:
            raise ConfigError(f"copy delay must lie in (0, seq_len), got {self.delay}")
        if self.kind in ("copy", "induction", "char_lm") and self.vocab_size < 3:
            raise ConfigError("token tasks need vocab_size >= 3")

    @classmethod
    def from_dict(cls, raw) -> TaskSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**raw)

    @property
    def task_kind(self) -> str:
        return "regression" if self.kind == "sine" else "classification"

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == "sine" else self.vocab_size


@dataclass
class Dataset:
    spec: TaskSpec
    train: Batch
    val: Batch

    def split(self, name: str) -> Batch:
        if name not in ("train", "val"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(0, len(self.train.inputs), size=batch_size)
        return Batch(self.train.inputs[idx], self.train.targets[idx])


def copy_targets(tokens: np.ndarray, delay: int) -> np.ndarray:
    targets = np.full_like(tokens, IGNORE)
    targets[:, delay:] = tokens[:, :-delay]
    return targets


def _copy(spec: TaskSpec, rng, n: int) -> Batch:
    tokens = rng.integers(0, spec.vocab_size, size=(n, spec.seq_len))
    return Batch(tokens, copy_targets(tokens, spec.delay))


def _induction(spec: TaskSpec, rng, n: int) -> Batch:
    # the last token of the vocabulary is the marker; the answer is the
    # token that followed its first occurrence
    marker = spec.vocab_size - 1
    tokens = rng.integers(0, marker, size=(n, spec.seq_len))
    pos = rng.integers(0, spec.seq_len - 3, size=n)
    rows = np.arange(n)
    tokens[rows, pos] = marker
    tokens[:, -1] = marker
    targets = np.full_like(tokens, IGNORE)
    targets[:, -1] = tokens[rows, pos + 1]
    return Batch(tokens, targets)


def markov_grammar(vocab_size: int, branching: int, seed: int) -> np.ndarray:
    """Row-stochastic transition matrix with ``branching`` successors per token."""
    rng = np.random.default_rng([seed, 7919])
    trans = np.zeros((vocab_size, vocab_size))
    for a in range(vocab_size):
        succ = rng.choice(vocab_size, size=min(branching, vocab_size), replace=False)
        trans[a, succ] = rng.dirichlet(np.ones(succ.size))
    return trans


def _char_lm(spec: TaskSpec, rng, n: int) -> Batch:
    trans = markov_grammar(spec.vocab_size, spec.grammar_branching, spec.seed)
    cdf = np.cumsum(trans, axis=1)
    seq = np.empty((n, spec.seq_len + 1), dtype=np.int64)
    seq[:, 0] = rng.integers(0, spec.vocab_size, size=n)
    for t in range(1, spec.seq_len + 1):
        u = rng.random(n)[:, None]
        seq[:, t] = np.minimum((u > cdf[seq[:, t - 1]]).sum(axis=1), spec.vocab_size - 1)
    return Batch(seq[:, :-1], seq[:, 1:])


def sine_signal(t: np.ndarray, freq: np.ndarray, phase: np.ndarray, amp: np.ndarray) -> np.ndarray:
    return amp * np.sin(freq * t + phase)


def _sine_params(rng, n: int):
    return rng.uniform(0.1, 0.6, size=(n, 1)), rng.uniform(0, 2 * np.pi, size=(n, 1)), rng.uniform(0.5, 1.5, size=(n, 1))


def _sine(spec: TaskSpec, rng, n: int) -> Batch:
    freq, phase, amp = _sine_params(rng, n)
    t = np.arange(spec.seq_len)[None, :]
    clean = sine_signal(t, freq, phase, amp)
    observed = clean + spec.noise * rng.normal(size=clean.shape)
    future = sine_signal(t + spec.horizon, freq, phase, amp)
    return Batch(observed[..., None], future[..., None])


def sine_oracle(spec: TaskSpec, split: str = "val") -> np.ndarray:
    """Noise-free forecasts from the generating function for ``split``."""
    if spec.kind != "sine":
        raise ConfigError("sine_oracle applies to the sine task only")
    rng = np.random.default_rng(spec.seed)
    freq, phase, amp = _sine_params(rng, spec.n_train + spec.n_val)
    sl = slice(0, spec.n_train) if split == "train" else slice(spec.n_train, None)
    t = np.arange(spec.seq_len)[None, :] + spec.horizon
    return sine_signal(t, freq[sl], phase[sl], amp[sl])[..., None]


_GENERATORS = {"copy": _copy, "induction": _induction, "char_lm": _char_lm, "sine": _sine}


def _dedupe_val(spec: TaskSpec, train: Batch, val: Batch) -> Batch:
    seen = {row.tobytes() for row in train.inputs}
    keep = np.array([row.tobytes() not in seen for row in val.inputs])
    return Batch(val.inputs[keep], val.targets[keep])


def gen_task(spec: TaskSpec, seed: int | None = None) -> Dataset:
    """Generate the train/validation splits of ``spec`` (seed overrides spec.seed)."""
    if seed is not None and seed != spec.seed:
        spec = TaskSpec(**{f.name: getattr(spec, f.name) for f in fields(spec)} | {"seed": seed})
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "sine":
        full = _sine(spec, rng, spec.n_train + spec.n_val)
        train = Batch(full.inputs[: spec.n_train], full.targets[: spec.n_train])
        val = Batch(full.inputs[spec.n_train:], full.targets[spec.n_train:])
    else:
        gen = _GENERATORS[spec.kind]
        train = gen(spec, rng, spec.n_train)
        val = gen(spec, rng, spec.n_val)
    return Dataset(spec, train, _dedupe_val(spec, train, val))
