"""Sparse weight storage, memory and FLOP accounting, and a throughput bench."""

from __future__ import annotations

import json
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .errors import BenchError, ConfigError, ContractError, FormatError
from .masking import PruneMask
from .model import EMBED, READOUT, ComponentKind, ModelConfig, ParamKey, SSMModel, forward, transition_rates

FORMATS = ("coordinate", "bitmask")
WIDTHS = (32, 64)
_VALUE_DTYPE = {32: "<f4", 64: "<f8"}
_INDEX_DTYPE = {32: "<u4", 64: "<u8"}


@dataclass
class SparseWeights:
    format: str
    shape: tuple[int, ...]
    value_bits: int
    index_bits: int
    values: np.ndarray
    indices: np.ndarray | None = None  # [rank x nnz] coordinates
    bits: np.ndarray | None = None  # packed presence bits, row-major order

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def rank(self) -> int:
        return len(self.shape)


def _check_widths(fmt: str, value_bits: int, index_bits: int) -> None:
    if fmt not in FORMATS:
        raise ConfigError(f"unknown sparse format {fmt!r}; expected one of {FORMATS}")
    if value_bits not in WIDTHS or index_bits not in WIDTHS:
        raise ConfigError(f"unsupported widths value={value_bits} index={index_bits}; each must be 32 or 64")


def pack(dense, mask, fmt: str = "bitmask", value_bits: int = 64, index_bits: int = 64) -> SparseWeights:
    """Store the retained entries of ``dense`` at the declared value width."""
    _check_widths(fmt, value_bits, index_bits)
    dense = np.asarray(dense, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if dense.shape != mask.shape:
        raise ContractError(f"mask shape {mask.shape} does not match weights {dense.shape}")
    flat_mask = mask.reshape(-1)
    values = dense.reshape(-1)[flat_mask].astype(_VALUE_DTYPE[value_bits])
    out = SparseWeights(fmt, dense.shape, value_bits, index_bits, values)
    if fmt == "coordinate":
        coords = np.nonzero(mask) if dense.ndim else (np.zeros(int(flat_mask.sum()), dtype=np.int64),)
        out.indices = np.asarray(coords).astype(_INDEX_DTYPE[index_bits]).reshape(len(coords), -1)
    else:
        out.bits = np.packbits(flat_mask)
    return out


def decode(sparse: SparseWeights) -> np.ndarray:
    """Dense array (at the declared value width) with zeros at pruned slots."""
    dtype = _VALUE_DTYPE[sparse.value_bits]
    out = np.zeros(sparse.size, dtype=dtype)
    if sparse.format == "coordinate":
        if sparse.nnz:
            flat = np.ravel_multi_index(tuple(sparse.indices.astype(np.int64)), sparse.shape) if sparse.rank else 0
            out[flat] = sparse.values
    else:
        present = np.unpackbits(sparse.bits, count=sparse.size).astype(bool)
        if int(present.sum()) != sparse.nnz:
            raise FormatError("bitmask popcount does not match stored value count")
        out[present] = sparse.values
    return out.reshape(sparse.shape)


def decode_mask(sparse: SparseWeights) -> np.ndarray:
    if sparse.format == "bitmask":
        return np.unpackbits(sparse.bits, count=sparse.size).astype(bool).reshape(sparse.shape)
    keep = np.zeros(sparse.shape, dtype=bool)
    if sparse.nnz:
        keep[tuple(sparse.indices.astype(np.int64))] = True
    return keep


# -- memory ----------------------------------------------------------------


def memory_arithmetic(n: int, nnz: int, value_bits: int = 32, index_bits: int = 64, rank: int = 2) -> dict:
    """Byte counts of dense, coordinate and bitmask storage for ``n`` slots."""
    vw, iw = value_bits // 8, index_bits // 8
    dense = n * vw
    coordinate = nnz * vw + rank * nnz * iw
    bitmask = math.ceil(n / 8) + nnz * vw
    return {
        "n": n,
        "nnz": nnz,
        "sparsity": 1.0 - nnz / n if n else 0.0,
        "dense_bytes": dense,
        "coordinate_bytes": coordinate,
        "bitmask_bytes": bitmask,
        "coordinate_ratio": coordinate / dense if dense else 0.0,
        "bitmask_ratio": bitmask / dense if dense else 0.0,
    }


def memory_report(sparse: SparseWeights, dense_total: int | None = None) -> dict:
    n = sparse.size if dense_total is None else dense_total
    return memory_arithmetic(n, sparse.nnz, sparse.value_bits, sparse.index_bits, sparse.rank)


def coordinate_figure_check(n: int, sparsity: float, stated_factor: float = 1.8, value_bits: int = 32,
                            index_bits: int = 64, rank: int = 2) -> dict:
    """Compare a stated coordinate-format size ``stated_factor * n`` bytes with
    the per-element arithmetic ``(value + rank * index) * nnz``."""
    nnz = n - math.floor(sparsity * n + 1e-9)
    per_element = value_bits // 8 + rank * index_bits // 8
    computed = per_element * nnz
    stated = stated_factor * n
    return {
        "bytes_per_nonzero": per_element,
        "computed_bytes": computed,
        "stated_bytes": stated,
        "computed_factor": computed / n,
        "consistent": math.isclose(computed, stated, rel_tol=1e-9),
    }


def model_memory_report(model: SSMModel, mask: PruneMask | None, value_bits: int = 32, index_bits: int = 64) -> dict:
    """Totals over maskable tensors plus the unmaskable embedding/readout."""
    keep = mask.keep if mask is not None else {}
    totals = {"dense_bytes": 0, "coordinate_bytes": 0, "bitmask_bytes": 0, "n": 0, "nnz": 0}
    for key in model.maskable_keys():
        arr = model.params[key]
        nnz = int(np.count_nonzero(keep[key])) if key in keep else arr.size
        m = memory_arithmetic(arr.size, nnz, value_bits, index_bits, arr.ndim)
        for k in totals:
            totals[k] += m[k]
    fixed = sum(model.params[k].size for k in (EMBED, READOUT)) * (value_bits // 8)
    dense = totals["dense_bytes"]
    totals |= {
        "coordinate_ratio": totals["coordinate_bytes"] / dense,
        "bitmask_ratio": totals["bitmask_bytes"] / dense,
        "unmaskable_bytes": fixed,
        "bitmask_ratio_with_unmaskable": (totals["bitmask_bytes"] + fixed) / (dense + fixed),
        "coordinate_ratio_with_unmaskable": (totals["coordinate_bytes"] + fixed) / (dense + fixed),
    }
    return totals


# -- FLOPs -----------------------------------------------------------------

_MATMUL_KINDS = (
    ComponentKind.LINEAR_IN,
    ComponentKind.GATE_PROJECTION,
    ComponentKind.DELTA_PROJECTION,
    ComponentKind.INPUT_PROJECTION,
    ComponentKind.OUTPUT_PROJECTION,
    ComponentKind.LINEAR_OUT,
)


def _block_flops(config: ModelConfig, nnz: dict, tokens: int) -> float:
    d = config.model_dim
    total = sum(2.0 * nnz[k] * tokens for k in _MATMUL_KINDS)
    # each retained state dim updates the state of every channel (multiply-add)
    total += 2.0 * d * nnz[ComponentKind.STATE_TRANSITION] * tokens
    total += 2.0 * nnz[ComponentKind.SKIP_TERM] * tokens
    return total


def _fixed_flops(config: ModelConfig, tokens: int) -> float:
    """Cost of work no mask removes: readout, norms, activations, scan reads."""
    d, n, r = config.model_dim, config.state_dim, config.delta_rank
    per_block = 4 * d + 4 * r + 2 * d * n + 3 * d + (4 * d if config.norm else 0)
    readout = 2 * d * config.n_outputs
    return float(tokens * (config.n_layers * per_block + readout + (4 * d if config.norm else 0)))


@dataclass
class FlopsReport:
    per_layer_dense: list[float]
    per_layer_masked: list[float]
    fixed: float

    @property
    def dense(self) -> float:
        return sum(self.per_layer_dense)

    @property
    def masked(self) -> float:
        return sum(self.per_layer_masked)

    @property
    def maskable_ratio(self) -> float:
        return self.masked / self.dense

    @property
    def total_ratio(self) -> float:
        return (self.masked + self.fixed) / (self.dense + self.fixed)


def flops_count(model: SSMModel, mask: PruneMask | None, seq_len: int, batch: int = 1) -> FlopsReport:
    cfg = model.config
    tokens = seq_len * batch
    keep = mask.keep if mask is not None else {}
    dense, masked = [], []
    for b in range(cfg.n_layers):
        full = {k: model.params[ParamKey(b, k)].size for k in ComponentKind}
        kept = {k: int(np.count_nonzero(keep[ParamKey(b, k)])) if ParamKey(b, k) in keep else full[k]
                for k in ComponentKind}
        dense.append(_block_flops(cfg, full, tokens))
        masked.append(_block_flops(cfg, kept, tokens))
    return FlopsReport(dense, masked, _fixed_flops(cfg, tokens))


# -- sparsity-aware inference ----------------------------------------------


class SparseRunner:
    """Inference path that multiplies by CSR weights, touching retained entries only."""

    def __init__(self, model: SSMModel, mask: PruneMask | None = None):
        self.model = model
        keep = mask.keep if mask is not None else {}
        self.weights = {}
        for key in model.maskable_keys():
            w = model.params[key] * keep[key] if key in keep else model.params[key]
            self.weights[key] = sp.csr_matrix(w) if w.ndim == 2 else w

    def _mm(self, x2: np.ndarray, key) -> np.ndarray:
        return (self.weights[key] @ x2.T).T

    def run(self, inputs) -> np.ndarray:
        cfg = self.model.config
        arr = np.asarray(inputs)
        if cfg.task_kind == "classification":
            h = self.model.params[EMBED][arr]
        else:
            h = arr @ self.model.params[EMBED]
        nb, seq, d = h.shape
        for b in range(cfg.n_layers):
            z = _rms(h) if cfg.norm else h
            k = lambda kind: ParamKey(b, kind)  # noqa: E731
            z2 = z.reshape(-1, d)
            u = self._mm(z2, k(ComponentKind.LINEAR_IN))
            gate = 0.5 * (1.0 + np.tanh(0.5 * self._mm(z2, k(ComponentKind.GATE_PROJECTION))))
            delta = np.logaddexp(0.0, self._mm(z2, k(ComponentKind.DELTA_PROJECTION)))
            a = transition_rates(self.weights[k(ComponentKind.STATE_TRANSITION)], cfg.param_mode)
            decay = np.exp(delta * a).reshape(nb, seq, -1)
            write = (delta * self._mm(u, k(ComponentKind.INPUT_PROJECTION))).reshape(nb, seq, -1)
            read = self._mm(u, k(ComponentKind.OUTPUT_PROJECTION)).reshape(nb, seq, -1)
            u3 = u.reshape(nb, seq, d)
            state = np.zeros((nb, d, decay.shape[-1]))
            y = np.empty_like(u3)
            for t in range(seq):
                state = decay[:, t, None, :] * state + u3[:, t, :, None] * write[:, t, None, :]
                y[:, t] = np.einsum("bdn,bn->bd", state, read[:, t])
            y = y + u3 * self.weights[k(ComponentKind.SKIP_TERM)]
            out = self._mm((y * gate.reshape(nb, seq, d)).reshape(-1, d), k(ComponentKind.LINEAR_OUT))
            h = h + out.reshape(nb, seq, d)
        if cfg.norm:
            h = _rms(h)
        return h @ self.model.params[READOUT]


def _rms(h: np.ndarray) -> np.ndarray:
    return h * (np.mean(h * h, axis=-1, keepdims=True) + 1e-6) ** -0.5


@dataclass(frozen=True)
class BenchConfig:
    seq_len: int = 128
    batch: int = 4
    warmup: int = 3
    repeats: int = 5
    seed: int = 0
    min_seconds: float = 1e-3

    def __post_init__(self):
        if self.warmup < 3:
            raise ConfigError("benchmark needs at least 3 warmup iterations")
        if self.repeats < 5:
            raise ConfigError("benchmark needs at least 5 timed runs")


@dataclass
class BenchResult:
    tokens_per_second: float
    reference_tokens_per_second: float
    speedup: float
    dense_blas_tokens_per_second: float
    median_seconds: float
    timings: list[float]
    hardware: dict = field(default_factory=dict)


def hardware_note() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": 1,
    }


def _time(fn, cfg: BenchConfig) -> list[float]:
    """Per-call seconds; calls are batched so each sample spans ``min_seconds``."""
    for _ in range(cfg.warmup):
        fn()
    start = time.perf_counter()
    fn()
    once = time.perf_counter() - start
    loops = max(1, math.ceil(cfg.min_seconds / max(once, 1e-9)))
    out = []
    for _ in range(cfg.repeats):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        out.append((time.perf_counter() - start) / loops)
    return out


def _bench_inputs(config: ModelConfig, cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seed)
    if config.task_kind == "classification":
        return rng.integers(0, config.vocab_size, size=(cfg.batch, cfg.seq_len))
    return rng.normal(size=(cfg.batch, cfg.seq_len, config.n_features))


def throughput_bench(model: SSMModel, mask: PruneMask | None, config: BenchConfig | None = None,
                     reference_mask: PruneMask | None = None) -> BenchResult:
    """Median tokens/second of the CSR path under ``mask``.

    The speedup is relative to the same CSR path at ``reference_mask``
    (all-ones by default); the dense BLAS path is timed for context only.
    """
    cfg = config or BenchConfig()
    inputs = _bench_inputs(model.config, cfg)
    tokens = cfg.batch * cfg.seq_len
    runner = SparseRunner(model, mask)
    reference = SparseRunner(model, reference_mask)
    with threadpool_limits(limits=1):
        sparse_t = _time(lambda: runner.run(inputs), cfg)
        ref_t = _time(lambda: reference.run(inputs), cfg)
        blas_t = _time(lambda: forward(model, inputs, mask=mask), cfg)
    med = statistics.median(sparse_t)
    ref = statistics.median(ref_t)
    resolution = time.get_clock_info("perf_counter").resolution
    if min(med, ref) < 100 * resolution:
        raise BenchError(f"timed call took {min(med, ref):.2e}s, below the timer resolution")
    return BenchResult(
        tokens_per_second=tokens / med,
        reference_tokens_per_second=tokens / ref,
        speedup=ref / med,
        dense_blas_tokens_per_second=tokens / statistics.median(blas_t),
        median_seconds=med,
        timings=sparse_t,
        hardware=hardware_note(),
    )


# -- sparse checkpoint -----------------------------------------------------

SPARSE_MAGIC = "PRUNELAB-SPARSE"
SPARSE_VERSION = 1


def _key_name(key) -> dict:
    if isinstance(key, ParamKey):
        return {"block": key.block, "kind": key.kind.name}
    return {"block": -1, "kind": key}


def save_sparse_checkpoint(path, model: SSMModel, mask: PruneMask, fmt: str = "bitmask", value_bits: int = 32,
                           index_bits: int = 64) -> dict:
    """Header line, JSON table (format, widths, shapes, offsets), then payloads."""
    _check_widths(fmt, value_bits, index_bits)
    chunks, table, offset = [], [], 0
    for key in model.all_keys():
        arr = model.params[key]
        keep = mask.keep.get(key, np.ones(arr.shape, dtype=bool)) if isinstance(key, ParamKey) else None
        rec = _key_name(key) | {"shape": list(arr.shape)}
        if keep is None:
            payload = [arr.astype(_VALUE_DTYPE[value_bits]).tobytes()]
            rec["dense"] = True
        else:
            s = pack(arr, keep, fmt, value_bits, index_bits)
            payload = [s.values.tobytes(), (s.bits if fmt == "bitmask" else s.indices).tobytes()]
            rec["nnz"] = s.nnz
        rec["offset"] = offset
        rec["lengths"] = [len(p) for p in payload]
        offset += sum(rec["lengths"])
        chunks += payload
        table.append(rec)
    meta = {
        "format": fmt,
        "value_bits": value_bits,
        "index_bits": index_bits,
        "byteorder": "little",
        "config": asdict(model.config),
        "params": table,
    }
    with open(path, "wb") as fh:
        fh.write(f"{SPARSE_MAGIC} {SPARSE_VERSION}\n".encode())
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for c in chunks:
            fh.write(c)
    return meta


def load_sparse_checkpoint(path) -> tuple[SSMModel, PruneMask]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    header = raw[:nl].decode(errors="replace").split()
    if len(header) != 2 or header[0] != SPARSE_MAGIC or header[1] != str(SPARSE_VERSION):
        raise FormatError(f"{path}: not a version {SPARSE_VERSION} sparse checkpoint")
    nl2 = raw.find(b"\n", nl + 1)
    try:
        meta = json.loads(raw[nl + 1:nl2])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    body = raw[nl2 + 1:]
    fmt, vb, ib = meta["format"], meta["value_bits"], meta["index_bits"]
    params, keep = {}, {}
    for rec in meta["params"]:
        key = rec["kind"] if rec["block"] < 0 else ParamKey(rec["block"], ComponentKind[rec["kind"]])
        shape = tuple(rec["shape"])
        start = rec["offset"]
        parts, pos = [], start
        for n in rec["lengths"]:
            if pos + n > len(body):
                raise FormatError(f"{path}: truncated payload for {rec['kind']}")
            parts.append(body[pos:pos + n])
            pos += n
        if rec.get("dense"):
            params[key] = np.frombuffer(parts[0], dtype=_VALUE_DTYPE[vb]).astype(np.float64).reshape(shape)
            continue
        values = np.frombuffer(parts[0], dtype=_VALUE_DTYPE[vb])
        if fmt == "bitmask":
            s = SparseWeights(fmt, shape, vb, ib, values, bits=np.frombuffer(parts[1], dtype=np.uint8))
        else:
            idx = np.frombuffer(parts[1], dtype=_INDEX_DTYPE[ib]).reshape(len(shape), -1)
            s = SparseWeights(fmt, shape, vb, ib, values, indices=idx)
        params[key] = decode(s).astype(np.float64)
        keep[key] = decode_mask(s)
    return SSMModel(ModelConfig.from_dict(meta["config"]), params), PruneMask(keep)
