"""Pruning masks: global, per-layer and component-allocated thresholding."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import ComponentKind, ParamKey, SSMModel, address_order, kind_group

DEFAULT_ALLOCATION = {"ssm": 0.30, "linear": 0.60}
# absorbs float error in target * total (e.g. 0.29 * 100 = 28.999...)
_COUNT_SLACK = 1e-9


@dataclass
class CorrectionRecord:
    """One stability swap: ``restored`` re-enabled, ``remasked`` pruned instead."""

    block: int
    restored: tuple[ParamKey, int]
    remasked: tuple[ParamKey, int] | None
    dims: tuple[int, ...]
    excess_before: float
    excess_after: float


@dataclass
class PruneMask:
    """Binary keep-mask per maskable parameter tensor (True = retained)."""

    keep: dict[ParamKey, np.ndarray]
    corrections: list[CorrectionRecord] = field(default_factory=list)
    unresolved: list[dict] = field(default_factory=list)

    @classmethod
    def ones(cls, model_or_shapes) -> PruneMask:
        if isinstance(model_or_shapes, SSMModel):
            shapes = {k: model_or_shapes.params[k].shape for k in model_or_shapes.maskable_keys()}
        else:
            shapes = {k: np.shape(v) for k, v in model_or_shapes.items()}
        return cls({k: np.ones(s, dtype=bool) for k, s in shapes.items()})

    def keys(self) -> list[ParamKey]:
        return sorted(self.keep, key=address_order)

    @property
    def total(self) -> int:
        return sum(v.size for v in self.keep.values())

    @property
    def n_masked(self) -> int:
        return sum(int(v.size - np.count_nonzero(v)) for v in self.keep.values())

    def sparsity(self) -> float:
        return self.n_masked / self.total if self.total else 0.0

    def _grouped(self, group_of) -> dict:
        zeros, sizes = {}, {}
        for key, arr in self.keep.items():
            g = group_of(key)
            zeros[g] = zeros.get(g, 0) + int(arr.size - np.count_nonzero(arr))
            sizes[g] = sizes.get(g, 0) + arr.size
        return {g: zeros[g] / sizes[g] for g in sizes}

    def kind_sparsity(self) -> dict[ComponentKind, float]:
        return self._grouped(lambda k: k.kind)

    def group_sparsity(self) -> dict[str, float]:
        return self._grouped(lambda k: kind_group(k.kind))

    def block_sparsity(self) -> dict[int, float]:
        return self._grouped(lambda k: k.block)

    def copy(self) -> PruneMask:
        return PruneMask(
            {k: v.copy() for k, v in self.keep.items()},
            list(self.corrections),
            list(self.unresolved),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.keep[k].reshape(-1) for k in self.keys()])

    def minimum(self, other: PruneMask) -> PruneMask:
        """Elementwise composition: retained only where both masks retain."""
        return PruneMask({k: self.keep[k] & other.keep[k] for k in self.keep})

    def equals(self, other: PruneMask) -> bool:
        return self.keep.keys() == other.keep.keys() and all(
            np.array_equal(self.keep[k], other.keep[k]) for k in self.keep
        )


def flatten(values: Mapping[ParamKey, np.ndarray], keys: Iterable[ParamKey]) -> np.ndarray:
    return np.concatenate([np.asarray(values[k], dtype=np.float64).reshape(-1) for k in keys])


def _score_map(scores) -> Mapping[ParamKey, np.ndarray]:
    return getattr(scores, "values", scores) if not isinstance(scores, Mapping) else scores


def _check_target(target: float) -> None:
    if not 0.0 <= target < 1.0:
        raise ContractError(f"target sparsity must lie in [0, 1), got {target}")


def n_to_prune(target: float, total: int) -> int:
    return int(math.floor(target * total + _COUNT_SLACK))


def _threshold_into(keep: dict, scores: Mapping, keys: list[ParamKey], target: float) -> None:
    """Mask the floor(target * n) lowest-scoring entries among ``keys``.

    Ties are broken by address (block, kind, flat index), earliest first.
    """
    flat = flatten(scores, keys)
    k = n_to_prune(target, flat.size)
    drop = np.zeros(flat.size, dtype=bool)
    if k:
        drop[np.argsort(flat, kind="stable")[:k]] = True
    offset = 0
    for key in keys:
        n = np.size(scores[key])
        keep[key] = ~drop[offset:offset + n].reshape(np.shape(scores[key]))
        offset += n


def build_global_mask(scores, target_sparsity: float) -> PruneMask:
    """One threshold across every maskable parameter."""
    _check_target(target_sparsity)
    values = _score_map(scores)
    keep = {}
    _threshold_into(keep, values, sorted(values, key=address_order), target_sparsity)
    return PruneMask(keep)


def build_layerwise_mask(scores, target_sparsity: float) -> PruneMask:
    """Independent threshold per block."""
    _check_target(target_sparsity)
    values = _score_map(scores)
    keep = {}
    for block in sorted({k.block for k in values}):
        keys = sorted((k for k in values if k.block == block), key=address_order)
        _threshold_into(keep, values, keys, target_sparsity)
    return PruneMask(keep)


def build_allocated_mask(scores, allocation: Mapping[str, float] | None = None) -> PruneMask:
    """Global thresholding within each component group at its own sparsity."""
    allocation = dict(DEFAULT_ALLOCATION if allocation is None else allocation)
    values = _score_map(scores)
    keep = {}
    for group in ("ssm", "linear"):
        keys = sorted((k for k in values if kind_group(k.kind) == group), key=address_order)
        if not keys:
            continue
        if group not in allocation:
            raise ConfigError(f"allocation is missing component group {group!r}")
        _check_target(allocation[group])
        _threshold_into(keep, values, keys, allocation[group])
    return PruneMask(keep)


def allocated_sparsity(sizes: Mapping[str, int], allocation: Mapping[str, float]) -> float:
    """Overall sparsity implied by per-group allocation (pure arithmetic)."""
    total = sum(sizes.values())
    return sum(n_to_prune(allocation[g], n) for g, n in sizes.items()) / total


def build_mask(
    scores, target_sparsity: float, strategy: str = "global", allocation=None, final_sparsity: float | None = None
) -> PruneMask:
    """Dispatch on strategy.

    For ``allocated`` the per-group sparsities in ``allocation`` are reached
    when ``target_sparsity == final_sparsity`` and scaled proportionally
    before that.
    """
    if strategy == "global":
        return build_global_mask(scores, target_sparsity)
    if strategy == "layerwise":
        return build_layerwise_mask(scores, target_sparsity)
    if strategy == "allocated":
        return build_allocated_mask(scores, scaled_allocation(allocation, target_sparsity, final_sparsity))
    raise ConfigError(f"unknown pruning strategy {strategy!r}")


def scaled_allocation(allocation, fraction_of_final: float, final: float | None = None) -> dict[str, float]:
    """Allocation to use at an intermediate schedule point.

    ``allocation`` holds the final per-group sparsities; intermediate steps
    scale every group by the same fraction of progress.
    """
    base = dict(DEFAULT_ALLOCATION if allocation is None else allocation)
    if final is None:
        return base
    ratio = 0.0 if final == 0 else fraction_of_final / final
    return {g: s * ratio for g, s in base.items()}


def retained_score(scores, mask: PruneMask) -> float:
    values = _score_map(scores)
    return float(sum(np.sum(np.asarray(values[k]) * mask.keep[k]) for k in mask.keep))
