"""Desk-scale selective state-space model.

Each block runs a gated selective-scan recurrence with a diagonal transition shared
across channels::

    u_t   = W_in x_t
    dt_t  = softplus(W_delta x_t)               # input-dependent timescale
    a_t   = exp(dt_t * A)                       # per-state decay, A from A_log
    h_t   = a_t * h_{t-1} + dt_t * (W_B u_t) u_t^T
    y_t   = h_t (W_C u_t) + D * u_t
    out_t = W_out (y_t * sigmoid(W_gate x_t))

The block output is added to the residual stream.  ``A = A_log`` in the
"unconstrained" mode and ``A = -exp(A_log)`` in the "stable" mode.
"""

from __future__ import annotations

import io
import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .tensor import GradTape, Tensor

PARAM_MODES = ("stable", "unconstrained")
TASK_KINDS = ("classification", "regression")
PROBE_SEED = 20240917
PROBE_SEQUENCES = 64
PROBE_LENGTH = 32
CHECKPOINT_MAGIC = "PRUNELAB-CHECKPOINT"
CHECKPOINT_VERSION = 1


class ComponentKind(str, Enum):
    STATE_TRANSITION = "A_log"
    INPUT_PROJECTION = "W_B"
    OUTPUT_PROJECTION = "W_C"
    SKIP_TERM = "D"
    DELTA_PROJECTION = "W_delta"
    GATE_PROJECTION = "W_gate"
    LINEAR_IN = "W_in"
    LINEAR_OUT = "W_out"

    def __str__(self):
        return self.name


KIND_ORDER = {kind: i for i, kind in enumerate(ComponentKind)}
SSM_GROUP = frozenset(
    {
        ComponentKind.STATE_TRANSITION,
        ComponentKind.INPUT_PROJECTION,
        ComponentKind.OUTPUT_PROJECTION,
        ComponentKind.SKIP_TERM,
        ComponentKind.DELTA_PROJECTION,
    }
)
LINEAR_GROUP = frozenset(
    {ComponentKind.GATE_PROJECTION, ComponentKind.LINEAR_IN, ComponentKind.LINEAR_OUT}
)
# parameters whose per-timestep gradient contributions are resolved on the tape
RECURRENT_KINDS = (
    ComponentKind.STATE_TRANSITION,
    ComponentKind.INPUT_PROJECTION,
    ComponentKind.OUTPUT_PROJECTION,
    ComponentKind.DELTA_PROJECTION,
)


def kind_group(kind: ComponentKind) -> str:
    return "ssm" if kind in SSM_GROUP else "linear"


class ParamKey(NamedTuple):
    """Address of a maskable parameter tensor."""

    block: int
    kind: ComponentKind

    def __str__(self):
        return f"{self.block}:{self.kind.name}"


def address_order(key: ParamKey) -> tuple[int, int]:
    return key.block, KIND_ORDER[key.kind]


EMBED = "embed"
READOUT = "readout"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    model_dim: int = 64
    state_dim: int = 16
    task_kind: str = "classification"
    vocab_size: int = 16
    n_features: int = 1
    n_outputs: int = 16
    param_mode: str = "unconstrained"
    delta_per_state: bool = False
    norm: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "model_dim", "state_dim", "n_outputs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"model.task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.param_mode not in PARAM_MODES:
            raise ConfigError(f"model.param_mode must be one of {PARAM_MODES}, got {self.param_mode!r}")
        if self.task_kind == "classification" and self.vocab_size < 1:
            raise ConfigError("model.vocab_size must be >= 1 for classification")
        if self.task_kind == "regression" and self.n_features < 1:
            raise ConfigError("model.n_features must be >= 1 for regression")

    @property
    def delta_rank(self) -> int:
        return self.state_dim if self.delta_per_state else 1

    def param_shapes(self) -> dict[ComponentKind, tuple[int, ...]]:
        d, n = self.model_dim, self.state_dim
        return {
            ComponentKind.STATE_TRANSITION: (n,),
            ComponentKind.INPUT_PROJECTION: (n, d),
            ComponentKind.OUTPUT_PROJECTION: (n, d),
            ComponentKind.SKIP_TERM: (d,),
            ComponentKind.DELTA_PROJECTION: (self.delta_rank, d),
            ComponentKind.GATE_PROJECTION: (d, d),
            ComponentKind.LINEAR_IN: (d, d),
            ComponentKind.LINEAR_OUT: (d, d),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> ModelConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class SSMModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def maskable_keys(self) -> list[ParamKey]:
        return sorted((k for k in self.params if isinstance(k, ParamKey)), key=address_order)

    def n_maskable(self) -> int:
        return sum(self.params[k].size for k in self.maskable_keys())

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def block(self, index: int) -> dict[ComponentKind, np.ndarray]:
        return {k.kind: v for k, v in self.params.items() if isinstance(k, ParamKey) and k.block == index}

    def copy(self) -> SSMModel:
        return SSMModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def apply_mask(self, mask) -> None:
        """Zero masked entries in place."""
        for key, keep in _mask_arrays(mask).items():
            self.params[key] = self.params[key] * keep

    def all_keys(self) -> list:
        return [EMBED, *self.maskable_keys(), READOUT]


def _mask_arrays(mask) -> Mapping[ParamKey, np.ndarray]:
    if mask is None:
        return {}
    return getattr(mask, "keep", mask)


def init_model(config: ModelConfig, seed: int | None = None) -> SSMModel:
    """Deterministic initialization for ``(config, seed)``.

    A_log is drawn so that at the reference timescale softplus(0) the decay
    magnitudes lie in [0.5, 0.999] (stable mode) or [0.5, 0.95]
    (unconstrained mode, leaving head-room below the 1 - epsilon threshold).
    """
    if seed is None:
        seed = config.seed
    else:
        config = replace(config, seed=int(seed))
    rng = np.random.default_rng(seed)
    d, n = config.model_dim, config.state_dim
    scale = 1.0 / math.sqrt(d)
    params: dict = {}
    if config.task_kind == "classification":
        params[EMBED] = rng.normal(0.0, 1.0, size=(config.vocab_size, d))
    else:
        params[EMBED] = rng.normal(0.0, 1.0 / math.sqrt(config.n_features), size=(config.n_features, d))
    dt_ref = math.log(2.0)
    hi = 0.999 if config.param_mode == "stable" else 0.95
    shapes = config.param_shapes()
    for b in range(config.n_layers):
        mags = rng.uniform(0.5, hi, size=n)
        rate = -np.log(mags) / dt_ref  # decay rate -A > 0
        if config.param_mode == "stable":
            a_log = np.log(rate)
        else:
            a_log = -rate
        block = {
            ComponentKind.STATE_TRANSITION: a_log,
            ComponentKind.INPUT_PROJECTION: rng.normal(0.0, scale, size=shapes[ComponentKind.INPUT_PROJECTION]),
            ComponentKind.OUTPUT_PROJECTION: rng.normal(0.0, scale, size=shapes[ComponentKind.OUTPUT_PROJECTION]),
            ComponentKind.SKIP_TERM: np.ones(d),
            ComponentKind.DELTA_PROJECTION: rng.normal(0.0, 0.1 * scale, size=shapes[ComponentKind.DELTA_PROJECTION]),
            ComponentKind.GATE_PROJECTION: rng.normal(0.0, scale, size=(d, d)),
            ComponentKind.LINEAR_IN: rng.normal(0.0, scale, size=(d, d)),
            ComponentKind.LINEAR_OUT: rng.normal(0.0, 0.5 * scale, size=(d, d)),
        }
        for kind, value in block.items():
            params[ParamKey(b, kind)] = np.asarray(value, dtype=np.float64)
    params[READOUT] = rng.normal(0.0, 0.1 * scale, size=(d, config.n_outputs))
    return SSMModel(config, params)


# -- discretization --------------------------------------------------------


def transition_rates(a_log, mode: str):
    """Continuous-time diagonal A from its stored parameter (numpy or Tensor)."""
    if mode == "stable":
        return -np.exp(a_log) if isinstance(a_log, np.ndarray) else tn.neg(tn.exp(a_log))
    if mode == "unconstrained":
        return a_log
    raise ConfigError(f"unknown parameterization mode {mode!r}")


def discretize(a_log, delta, mode: str = "unconstrained") -> np.ndarray:
    """Eigenvalue magnitudes ``|exp(delta_j * A_i)|`` as [positions x state_dim].

    ``delta`` is [positions] (shared timescale) or [positions x state_dim].
    """
    a_log = np.asarray(a_log, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise ContractError("discretize: delta must be strictly positive")
    if delta.ndim == 1:
        delta = delta[:, None]
    if delta.shape[1] not in (1, a_log.size):
        raise ShapeError(f"discretize: delta {delta.shape} vs state_dim {a_log.size}")
    return np.abs(np.exp(delta * transition_rates(a_log, mode)))


# -- forward ---------------------------------------------------------------


@dataclass
class BlockTrace:
    """Intermediate values of one block, kept for scoring and spectral checks."""

    x_in: np.ndarray  # block input as seen by the delta and gate projections
    delta: Tensor  # [batch, seq, delta_rank]
    eig: Tensor  # [batch, seq, state_dim] decay magnitudes
    gate: Tensor  # [batch, seq, model_dim]


class _Weights:
    """Effective (masked) weights, optionally aliased per timestep."""

    def __init__(self, leaves, mask_arrays, tape: GradTape | None, time_resolved: bool):
        self.leaves = leaves
        self.masks = mask_arrays
        self.tape = tape
        self.time_resolved = time_resolved
        self._cache = {}

    def __call__(self, key, step: int | None = None) -> Tensor:
        leaf = self.leaves[key]
        keep = self.masks.get(key)
        if step is not None and self.time_resolved and self.tape is not None:
            w = self.tape.alias(leaf, key, step)
            return w if keep is None else w * keep
        if key not in self._cache:
            self._cache[key] = leaf if keep is None else leaf * keep
        return self._cache[key]


def _block_forward(w, block: int, x: Tensor, mode: str, time_resolved: bool) -> tuple[Tensor, BlockTrace]:
    k = lambda kind: ParamKey(block, kind)  # noqa: E731
    nb, seq, dim = x.shape
    u = x @ w(k(ComponentKind.LINEAR_IN)).T
    gate = tn.sigmoid(x @ w(k(ComponentKind.GATE_PROJECTION)).T)
    if time_resolved:
        deltas, decays, bs, cs = [], [], [], []
        for t in range(seq):
            x_t, u_t = x[:, t], u[:, t]
            d_t = tn.softplus(x_t @ w(k(ComponentKind.DELTA_PROJECTION), t).T)
            a_t = transition_rates(w(k(ComponentKind.STATE_TRANSITION), t), mode)
            deltas.append(d_t)
            decays.append(tn.exp(d_t * a_t))
            bs.append(u_t @ w(k(ComponentKind.INPUT_PROJECTION), t).T)
            cs.append(u_t @ w(k(ComponentKind.OUTPUT_PROJECTION), t).T)
        delta = tn.stack(deltas, axis=1)
        decay = tn.stack(decays, axis=1)
        b_t = tn.stack(bs, axis=1)
        c_t = tn.stack(cs, axis=1)
    else:
        delta = tn.softplus(x @ w(k(ComponentKind.DELTA_PROJECTION)).T)
        a = transition_rates(w(k(ComponentKind.STATE_TRANSITION)), mode)
        decay = tn.exp(delta * a)
        b_t = u @ w(k(ComponentKind.INPUT_PROJECTION)).T
        c_t = u @ w(k(ComponentKind.OUTPUT_PROJECTION)).T
    y = tn.selective_ssm(decay, delta * b_t, u, c_t) + u * w(k(ComponentKind.SKIP_TERM))
    out = (y * gate) @ w(k(ComponentKind.LINEAR_OUT)).T
    return out, BlockTrace(x_in=x.data, delta=delta, eig=decay, gate=gate)


def selective_scan(
    block_params: Mapping[ComponentKind, np.ndarray],
    x,
    mask: Mapping[ComponentKind, np.ndarray] | None = None,
    mode: str = "unconstrained",
) -> Tensor:
    """Run one selective-SSM block over ``x`` ([seq, dim] or [batch, seq, dim]).

    Masks are applied as elementwise zeroing of the parameters.  Parameters
    given as Tensors keep their tape tracking, so gradients flow through
    every timestep.
    """
    x = tn.as_tensor(x)
    if x.ndim == 2:
        squeeze = True
        x = x.reshape(1, *x.shape)
    elif x.ndim == 3:
        squeeze = False
    else:
        raise ShapeError(f"selective_scan: x must be [seq, dim] or [batch, seq, dim], got {x.shape}")
    if x.shape[1] < 1:
        raise ContractError("selective_scan: sequence length must be >= 1")
    dim = x.shape[-1]
    win = block_params[ComponentKind.LINEAR_IN]
    if np.shape(win)[1] != dim:
        raise ShapeError(f"selective_scan: x has dim {dim}, W_in expects {np.shape(win)[1]}")
    leaves = {ParamKey(0, kind): tn.as_tensor(v) for kind, v in block_params.items()}
    masks = {ParamKey(0, kind): np.asarray(v, dtype=np.float64) for kind, v in (mask or {}).items()}
    out, _ = _block_forward(_Weights(leaves, masks, None, False), 0, x, mode, False)
    return out.reshape(*out.shape[1:]) if squeeze else out


def _rms_norm(h: Tensor) -> Tensor:
    return h * tn.power((h * h).mean(axis=-1, keepdims=True) + 1e-6, -0.5)


@dataclass
class ForwardResult:
    loss: Tensor | None
    output: Tensor
    traces: list[BlockTrace]
    per_example: np.ndarray | None = None


def _embed(model: SSMModel, table: Tensor, inputs) -> Tensor:
    cfg = model.config
    arr = np.asarray(inputs)
    if cfg.task_kind == "classification":
        if not np.issubdtype(arr.dtype, np.integer) or arr.ndim != 2:
            raise ConfigError("classification model expects an integer token array [batch, seq]")
        return tn.take(table, arr)
    if arr.ndim != 3 or arr.shape[-1] != cfg.n_features or np.issubdtype(arr.dtype, np.integer):
        raise ConfigError(
            f"regression model expects real inputs [batch, seq, {cfg.n_features}], got {arr.shape} {arr.dtype}"
        )
    return Tensor(arr) @ table


def forward(model: SSMModel, inputs, mask=None, tape: GradTape | None = None, time_resolved: bool = False):
    """Logits (classification) or predictions (regression) plus block traces."""
    cfg = model.config
    if tape is not None:
        leaves = {key: tape.watch(value, key) for key, value in model.params.items()}
    else:
        leaves = {key: Tensor(value) for key, value in model.params.items()}
    masks = {k: np.asarray(v, dtype=np.float64) for k, v in _mask_arrays(mask).items()}
    w = _Weights(leaves, masks, tape, time_resolved)
    h = _embed(model, leaves[EMBED], inputs)
    traces = []
    for b in range(cfg.n_layers):
        z = _rms_norm(h) if cfg.norm else h
        out, trace = _block_forward(w, b, z, cfg.param_mode, time_resolved)
        traces.append(trace)
        h = h + out
    if cfg.norm:
        h = _rms_norm(h)
    return h @ leaves[READOUT], traces


def _per_example_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    valid = targets >= 0
    picked = np.take_along_axis(logp, np.where(valid, targets, 0)[..., None], axis=-1)[..., 0]
    nll = -np.maximum(picked, math.log(tn.CE_PROB_FLOOR)) * valid
    return nll.sum(axis=1) / np.maximum(valid.sum(axis=1), 1)


def model_forward(
    model: SSMModel, batch, mask=None, tape: GradTape | None = None, time_resolved: bool = False
) -> ForwardResult:
    """Scalar task loss (cross-entropy or MSE by task kind) on the active tape."""
    inputs, targets = batch.inputs, batch.targets
    output, traces = forward(model, inputs, mask=mask, tape=tape, time_resolved=time_resolved)
    if model.config.task_kind == "classification":
        targets = np.asarray(targets)
        if targets.shape != output.shape[:-1]:
            raise ConfigError(f"targets {targets.shape} do not match outputs {output.shape[:-1]}")
        loss = tn.cross_entropy(output, targets)
        per_example = _per_example_ce(output.data, targets)
    else:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != output.shape:
            raise ConfigError(f"targets {targets.shape} do not match outputs {output.shape}")
        loss = tn.mse(output, targets)
        per_example = ((output.data - targets) ** 2).mean(axis=(1, 2))
    return ForwardResult(loss, output, traces, per_example)


# -- probes ----------------------------------------------------------------


def make_probe_inputs(config: ModelConfig, n: int = PROBE_SEQUENCES, length: int = PROBE_LENGTH, seed: int = PROBE_SEED):
    """Fixed seeded probe batch used for every max-over-inputs quantity."""
    rng = np.random.default_rng(seed)
    if config.task_kind == "classification":
        return rng.integers(0, config.vocab_size, size=(n, length))
    return rng.normal(size=(n, length, config.n_features))


def block_inputs(model: SSMModel, inputs, mask=None) -> list[np.ndarray]:
    """Per-block (normalized) inputs for ``inputs`` under ``mask``; no tape."""
    _, traces = forward(model, inputs, mask=mask)
    return [t.x_in for t in traces]


# -- checkpoints -----------------------------------------------------------


def _key_record(key) -> dict:
    if isinstance(key, ParamKey):
        return {"block": key.block, "kind": key.kind.name}
    return {"block": -1, "kind": key}


def _key_from_record(rec: Mapping):
    if rec["block"] < 0:
        return rec["kind"]
    try:
        return ParamKey(int(rec["block"]), ComponentKind[rec["kind"]])
    except KeyError:
        raise FormatError(f"unknown component kind {rec['kind']!r}") from None


def save_checkpoint(path, model: SSMModel, mask=None) -> None:
    """Write a self-describing little-endian checkpoint.

    Layout: one text header line ``PRUNELAB-CHECKPOINT <version>``, one JSON
    line (config, seed, parameter table with shapes and byte offsets), then
    the concatenated row-major float64 payloads (parameters, then masks).
    """
    keys = model.all_keys()
    masks = _mask_arrays(mask)
    table, chunks, offset = [], [], 0
    for key in keys:
        arr = np.ascontiguousarray(model.params[key], dtype="<f8")
        rec = _key_record(key) | {"shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        if key in masks:
            m = np.ascontiguousarray(masks[key], dtype="<f8")
            rec["mask_offset"] = offset + arr.nbytes
            chunks += [arr.tobytes(), m.tobytes()]
            offset += arr.nbytes + m.nbytes
        else:
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        table.append(rec)
    meta = {"config": asdict(model.config), "seed": model.config.seed, "byteorder": "little", "params": table}
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, mask_or_None)``."""
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    header = buf.readline().decode(errors="replace").split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a prunelab checkpoint")
    if int(header[1]) != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header[1]}")
    try:
        meta = json.loads(buf.readline())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt metadata line") from exc
    payload = raw[buf.tell():]
    config = ModelConfig.from_dict(meta["config"])
    params, masks = {}, {}
    for rec in meta["params"]:
        key = _key_from_record(rec)
        shape = tuple(rec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = rec["offset"]
        if start + 8 * n > len(payload):
            raise FormatError(f"{path}: truncated payload for {rec}")
        params[key] = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
        if "mask_offset" in rec:
            masks[key] = np.frombuffer(payload, dtype="<f8", count=n, offset=rec["mask_offset"]).reshape(shape) > 0.5
    model = SSMModel(config, params)
    if not masks:
        return model, None
    from .masking import PruneMask

    return model, PruneMask(masks)
