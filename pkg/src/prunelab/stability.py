"""Eigenvalue stability: hinge scores, the training penalty and mask repair."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .masking import CorrectionRecord, PruneMask
from .model import ComponentKind, ParamKey, SSMModel, address_order, block_inputs, kind_group, transition_rates
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.01
DEFAULT_LAMBDA = 0.1
CORRECTION_BUDGET = 100
EIGEN_KINDS = (ComponentKind.STATE_TRANSITION, ComponentKind.DELTA_PROJECTION)


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon <= 0.1:
        raise ContractError(f"epsilon must lie in (0, 0.1], got {epsilon}")


def stability_score(eig_magnitudes, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """max(0, |lambda| - (1 - epsilon)) elementwise."""
    _check_epsilon(epsilon)
    return np.maximum(0.0, np.asarray(eig_magnitudes, dtype=np.float64) - (1.0 - epsilon))


def stability_penalty(eig_magnitudes, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Sum over state dims of the squared hinge on the max-over-positions magnitude.

    ``eig_magnitudes`` is a [positions x state_dim] Tensor or a list of them
    (one per block); each block contributes its own sum.
    """
    _check_epsilon(epsilon)
    blocks = eig_magnitudes if isinstance(eig_magnitudes, (list, tuple)) else [eig_magnitudes]
    total = None
    for eig in blocks:
        eig = tn.as_tensor(eig)
        eig = eig.reshape(-1, eig.shape[-1])
        worst = tn.tmax(eig, axis=0)
        term = tn.square(tn.relu(worst - (1.0 - epsilon))).sum()
        total = term if total is None else total + term
    return total


def stability_loss(task_loss, eig_magnitudes, epsilon: float = DEFAULT_EPSILON, lambda_coef: float = DEFAULT_LAMBDA):
    """task_loss + lambda_coef * stability_penalty."""
    if not lambda_coef >= 0:
        raise ContractError(f"lambda_coef must be >= 0, got {lambda_coef}")
    if lambda_coef == 0:
        return tn.as_tensor(task_loss)
    return task_loss + lambda_coef * stability_penalty(eig_magnitudes, epsilon)


# -- numpy eigenvalue evaluation ------------------------------------------


def _keep(mask, key) -> np.ndarray | float:
    if mask is None:
        return 1.0
    return getattr(mask, "keep", mask).get(key, 1.0)


def block_eigs(model: SSMModel, block: int, x_in: np.ndarray, mask=None) -> np.ndarray:
    """Decay magnitudes [positions x state_dim] of one block for block input ``x_in``."""
    ka, kd = ParamKey(block, ComponentKind.STATE_TRANSITION), ParamKey(block, ComponentKind.DELTA_PROJECTION)
    a_log = model.params[ka] * _keep(mask, ka)
    w_delta = model.params[kd] * _keep(mask, kd)
    x = x_in.reshape(-1, x_in.shape[-1])
    delta = np.logaddexp(0.0, x @ w_delta.T)
    return np.abs(np.exp(delta * transition_rates(a_log, model.config.param_mode)))


def max_eigs(model: SSMModel, probe_inputs, mask=None) -> np.ndarray:
    """[n_layers x state_dim] max-over-probe magnitude per block and state dim."""
    xs = block_inputs(model, probe_inputs, mask)
    return np.stack([block_eigs(model, b, x, mask).max(axis=0) for b, x in enumerate(xs)])


# -- mask correction -------------------------------------------------------


def _excess(worst: np.ndarray, threshold: float) -> float:
    return float(np.maximum(0.0, worst - threshold).sum())


def _candidates(model, mask: PruneMask, previous: PruneMask | None, block: int, dims: np.ndarray):
    """Masked eigenvalue-relevant entries of ``block`` that touch ``dims``."""
    out = []
    for kind in EIGEN_KINDS:
        key = ParamKey(block, kind)
        fresh = ~mask.keep[key]
        if previous is not None:
            fresh &= previous.keep[key]
        for idx in np.flatnonzero(fresh):
            if kind is ComponentKind.STATE_TRANSITION:
                if idx in dims:
                    out.append((key, int(idx)))
            elif not model.config.delta_per_state or idx // mask.keep[key].shape[1] in dims:
                out.append((key, int(idx)))
    return out


def _in_scope(key: ParamKey, block: int, scope: str) -> bool:
    if scope == "block":
        return key.block == block
    if scope == "group":
        return kind_group(key.kind) == "ssm"
    return True


def _lowest_unmasked(mask: PruneMask, scores, protected: set, block: int, scope: str) -> tuple[ParamKey, int] | None:
    best, best_val = None, np.inf
    for key in sorted(mask.keep, key=address_order):
        if key.kind in EIGEN_KINDS or not _in_scope(key, block, scope):
            continue
        vals = np.where(mask.keep[key].reshape(-1), scores[key].reshape(-1), np.inf)
        for key_idx in protected:
            if key_idx[0] == key:
                vals[key_idx[1]] = np.inf
        i = int(np.argmin(vals))
        if vals[i] < best_val:  # strict: earlier address wins ties
            best, best_val = (key, i), vals[i]
    return best


def stability_correct_mask(
    mask: PruneMask,
    model: SSMModel,
    probe_inputs,
    epsilon: float = DEFAULT_EPSILON,
    scores=None,
    previous_mask: PruneMask | None = None,
    budget: int = CORRECTION_BUDGET,
    remask_scope: str = "global",
) -> PruneMask:
    """Swap eigenvalue-critical pruned entries back in until every probe
    magnitude is at most 1 - epsilon.

    Each swap restores the newly pruned StateTransition or DeltaProjection
    entry whose return lowers the violating block's excess the most, then
    prunes the lowest-scoring retained entry of another kind so the sparsity
    is unchanged.  ``remask_scope`` limits where that replacement may come
    from: anywhere ("global"), the same block ("block") or the SSM component
    group ("group"), matching the mask strategy's sparsity bookkeeping.
    Blocks that cannot be repaired, or remain in violation once ``budget``
    swaps are spent, are recorded in ``unresolved``.
    """
    _check_epsilon(epsilon)
    if remask_scope not in ("global", "block", "group"):
        raise ContractError(f"unknown remask scope {remask_scope!r}")
    out = mask.copy()
    if model.config.param_mode == "stable":
        log.info("stability correction skipped: stable parameterization cannot violate")
        return out
    threshold = 1.0 - epsilon
    score_map = getattr(scores, "values", scores)
    if score_map is None:
        score_map = {k: np.abs(model.params[k]) for k in out.keep}
    protected: set = set()
    given_up: set[int] = set()
    used = 0
    while True:
        xs = block_inputs(model, probe_inputs, out)
        worst = [block_eigs(model, b, x, out).max(axis=0) for b, x in enumerate(xs)]
        violating = [b for b, w in enumerate(worst) if np.any(w > threshold) and b not in given_up]
        if not violating:
            break
        block = violating[0]
        if used >= budget:
            for b in violating:
                out.unresolved.append(_violation(b, worst[b], threshold, "correction budget exhausted"))
            break
        dims = np.flatnonzero(worst[block] > threshold)
        before = _excess(worst[block], threshold)
        best, best_after = None, before
        for key, idx in _candidates(model, out, previous_mask, block, dims):
            out.keep[key].reshape(-1)[idx] = True
            after = _excess(block_eigs(model, block, xs[block], out).max(axis=0), threshold)
            out.keep[key].reshape(-1)[idx] = False
            if after < best_after:
                best, best_after = (key, idx), after
        if best is None:
            given_up.add(block)
            out.unresolved.append(_violation(block, worst[block], threshold, "no masked entry reduces the violation"))
            continue
        out.keep[best[0]].reshape(-1)[best[1]] = True
        protected.add(best)
        swap = _lowest_unmasked(out, score_map, protected, block, remask_scope)
        if swap is not None:
            out.keep[swap[0]].reshape(-1)[swap[1]] = False
        out.corrections.append(CorrectionRecord(block, best, swap, tuple(int(d) for d in dims), before, best_after))
        used += 1
    return out


def _violation(block: int, worst: np.ndarray, threshold: float, reason: str) -> dict:
    dims = np.flatnonzero(worst > threshold)
    return {
        "block": block,
        "dims": [int(d) for d in dims],
        "max_eig": float(worst.max()),
        "threshold": threshold,
        "reason": reason,
    }
