"""Parameter importance scores for pruning.

Scores combine weight magnitude with gradient magnitude, optionally summed
over scan steps for recurrent parameters, rescaled by how varied a
projection's output units are across probe inputs, and boosted by how much
of the block's computation depends on the component.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from . import tensor as tn
from .errors import ContractError
from .model import (
    RECURRENT_KINDS,
    ComponentKind,
    ParamKey,
    SSMModel,
    address_order,
    forward,
    model_forward,
)

DIVERSITY_KINDS = (ComponentKind.GATE_PROJECTION, ComponentKind.DELTA_PROJECTION)
PHI_RANGE = (0.5, 2.0)
DEFAULT_BETA = 0.2


@dataclass
class ImportanceScores:
    values: dict[ParamKey, np.ndarray]
    alpha: float
    n_batches: int = 1
    corrections: tuple[str, ...] = ()
    weights: dict[ParamKey, np.ndarray] | None = field(default=None, repr=False)
    gradients: dict[ParamKey, np.ndarray] | None = field(default=None, repr=False)

    def keys(self) -> list[ParamKey]:
        return sorted(self.values, key=address_order)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.values[k].reshape(-1) for k in self.keys()])

    def with_values(self, values, flag: str) -> ImportanceScores:
        return replace(self, values=values, corrections=(*self.corrections, flag))


def _check_alpha(alpha: float) -> None:
    if not alpha >= 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")


def _score(w: np.ndarray, g: np.ndarray, alpha: float) -> np.ndarray:
    w = np.abs(np.asarray(w, dtype=np.float64))
    if alpha == 0:
        return w.copy()  # 0**0 == 1, so the score is the magnitude itself
    return w * np.abs(np.asarray(g, dtype=np.float64)) ** alpha


def importance_base(weights: Mapping, gradients: Mapping, alpha: float) -> ImportanceScores:
    """|w| * |g|**alpha elementwise."""
    _check_alpha(alpha)
    if set(weights) != set(gradients):
        raise ContractError("weights and gradients must cover the same parameters")
    values = {}
    for key, w in weights.items():
        g = gradients[key]
        if np.shape(w) != np.shape(g):
            raise ContractError(f"gradient for {key} has shape {np.shape(g)}, weight has {np.shape(w)}")
        values[key] = _score(w, g, alpha)
    return ImportanceScores(values, alpha, weights=dict(weights), gradients=dict(gradients))


def _step_list(steps) -> list[np.ndarray]:
    if isinstance(steps, Mapping):
        return [steps[t] for t in sorted(steps)]
    return list(steps)


def summed_steps(per_step: Mapping) -> dict:
    """Signed sum over timesteps for each parameter."""
    out = {}
    for key, steps in per_step.items():
        seq = _step_list(steps)
        if not seq:
            raise ContractError(f"no timestep gradients for {key}")
        total = np.array(seq[0], dtype=np.float64, copy=True)
        for g in seq[1:]:
            total = total + g
        out[key] = total
    return out


def importance_ssm_accumulated(
    weights: Mapping, per_timestep_gradients: Mapping, alpha: float, gradients: Mapping | None = None
) -> ImportanceScores:
    """|w| * |sum_t g_t|**alpha for recurrent parameters.

    Parameters without per-step entries (non-recurrent kinds) fall back to
    the plain score on ``gradients``.
    """
    _check_alpha(alpha)
    summed = summed_steps(per_timestep_gradients)
    merged = {}
    for key in weights:
        if key in summed:
            merged[key] = summed[key]
        elif gradients is not None and key in gradients:
            merged[key] = gradients[key]
        else:
            raise ContractError(f"no gradient available for {key}")
    out = importance_base(weights, merged, alpha)
    return replace(out, corrections=("time_accumulated",))


@dataclass
class GradientWindow:
    """Mean gradients over an accumulation window of batches."""

    mean: dict
    per_step: dict | None
    n_batches: int
    losses: list[float]


def accumulate_gradients(model: SSMModel, batches: Sequence, mask=None, time_resolved: bool = False) -> GradientWindow:
    """Arithmetic mean of per-batch gradients, summed in batch order."""
    batches = list(batches)
    if not batches:
        raise ContractError("accumulate_gradients needs at least one batch")
    total, steps_total, losses = None, None, []
    for batch in batches:
        with tn.GradTape() as tape:
            res = model_forward(model, batch, mask=mask, tape=tape, time_resolved=time_resolved)
        if time_resolved:
            grads, steps = tn.backward(tape, res.loss, per_step=True)
        else:
            grads, steps = tn.backward(tape, res.loss), None
        losses.append(res.loss.item())
        if total is None:
            total, steps_total = grads, steps
            continue
        total = {k: total[k] + g for k, g in grads.items()}
        if steps is not None:
            steps_total = {k: {t: steps_total[k][t] + g for t, g in d.items()} for k, d in steps.items()}
    k = len(batches)
    mean = {key: g / k for key, g in total.items()}
    per_step = None
    if steps_total is not None:
        per_step = {key: {t: g / k for t, g in d.items()} for key, d in steps_total.items()}
    return GradientWindow(mean, per_step, k, losses)


# -- gate diversity --------------------------------------------------------


def diversity_activations(model: SSMModel, probe_inputs, mask=None) -> dict[ParamKey, np.ndarray]:
    """Output-unit activations [samples x units] of gate and timescale projections."""
    _, traces = forward(model, probe_inputs, mask=mask)
    out = {}
    for b, trace in enumerate(traces):
        out[ParamKey(b, ComponentKind.GATE_PROJECTION)] = trace.gate.data.reshape(-1, trace.gate.shape[-1])
        out[ParamKey(b, ComponentKind.DELTA_PROJECTION)] = trace.delta.data.reshape(-1, trace.delta.shape[-1])
    return out


def diversity_factor(activations: np.ndarray) -> np.ndarray:
    """clip(std_j / mean(std), 0.5, 2) per output unit j."""
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 2:
        raise ContractError(f"need >= 2 probe samples as [samples x units], got shape {acts.shape}")
    spread = acts.std(axis=0)
    ref = spread.mean()
    if ref == 0:
        return np.full(spread.shape, PHI_RANGE[0])
    return np.clip(spread / ref, *PHI_RANGE)


def gate_diversity_correction(scores: ImportanceScores, activations: Mapping[ParamKey, np.ndarray]) -> ImportanceScores:
    """Scale gate and timescale projection scores by their unit diversity.

    Rows of a projection weight are its output units, so row j is scaled by
    the factor of unit j.
    """
    values = dict(scores.values)
    for key, acts in activations.items():
        if key.kind not in DIVERSITY_KINDS or key not in values:
            continue
        phi = diversity_factor(acts)
        if phi.shape[0] != values[key].shape[0]:
            raise ContractError(f"{key}: {phi.shape[0]} units vs {values[key].shape[0]} weight rows")
        values[key] = values[key] * phi[:, None]
    return scores.with_values(values, "gate_diversity")


# -- centrality ------------------------------------------------------------

# Per-timestep computations of a block; each parameter kind writes one of them.
_PRODUCES = {
    ComponentKind.LINEAR_IN: "u",
    ComponentKind.GATE_PROJECTION: "gate",
    ComponentKind.DELTA_PROJECTION: "dt",
    ComponentKind.STATE_TRANSITION: "decay",
    ComponentKind.INPUT_PROJECTION: "b",
    ComponentKind.OUTPUT_PROJECTION: "c",
    ComponentKind.SKIP_TERM: "skip",
    ComponentKind.LINEAR_OUT: "out",
}
_WITHIN_STEP = [
    ("u", "b"), ("u", "c"), ("u", "write"), ("u", "skip"),
    ("dt", "decay"), ("dt", "write"), ("b", "write"),
    ("decay", "h"), ("write", "h"),
    ("h", "y"), ("c", "y"),
    ("y", "z"), ("skip", "z"), ("gate", "z"),
    ("z", "out"), ("out", "resid"),
]


def block_dataflow_graph(horizon: int = 8) -> nx.DiGraph:
    """Block dataflow unrolled over ``horizon`` scan steps.

    Nodes are ``(name, t)`` computations plus one node per parameter kind
    that feeds its computation at every step.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    g = nx.DiGraph()
    for t in range(horizon):
        g.add_edges_from(((a, t), (b, t)) for a, b in _WITHIN_STEP)
        if t:
            g.add_edge(("h", t - 1), ("h", t))
        for kind, name in _PRODUCES.items():
            g.add_edge(kind, (name, t))
    return g


def component_centrality(graph: nx.DiGraph | None = None) -> dict[ComponentKind, float]:
    """Downstream computation count per kind, normalized by the maximum."""
    graph = block_dataflow_graph() if graph is None else graph
    counts = {}
    for kind in ComponentKind:
        if kind not in graph:
            raise ContractError(f"component {kind} missing from dataflow graph")
        counts[kind] = sum(1 for node in nx.descendants(graph, kind) if not isinstance(node, ComponentKind))
    top = max(counts.values())
    return {kind: c / top for kind, c in counts.items()}


def centrality_adjust(scores: ImportanceScores, centrality: Mapping | None = None, beta: float = DEFAULT_BETA):
    """S * (1 + beta * C(kind))."""
    if not beta >= 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    centrality = component_centrality() if centrality is None else centrality
    values = {}
    for key, v in scores.values.items():
        if key.kind not in centrality:
            raise ContractError(f"no centrality for component {key.kind}")
        values[key] = v * (1.0 + beta * centrality[key.kind])
    return scores.with_values(values, "centrality")


# -- end-to-end ------------------------------------------------------------


def compute_scores(
    model: SSMModel,
    batches: Iterable,
    alpha: float = 1.0,
    mask=None,
    time_accumulated: bool = True,
    gate_diversity: bool = False,
    centrality_beta: float = 0.0,
    probe_inputs=None,
) -> ImportanceScores:
    """Scores of every maskable parameter of ``model`` (weights as masked)."""
    batches = list(batches)
    keys = model.maskable_keys()
    window = accumulate_gradients(model, batches, mask=mask, time_resolved=time_accumulated and alpha > 0)
    masks = getattr(mask, "keep", mask) or {}
    weights = {k: model.params[k] * masks[k] if k in masks else model.params[k] for k in keys}
    grads = {k: window.mean[k] for k in keys}
    if window.per_step:
        steps = {k: window.per_step[k] for k in keys if k.kind in RECURRENT_KINDS and k in window.per_step}
        scores = importance_ssm_accumulated(weights, steps, alpha, gradients=grads)
        scores = replace(scores, gradients=grads | summed_steps(steps))
    else:
        scores = importance_base(weights, grads, alpha)
    scores.n_batches = window.n_batches
    if gate_diversity:
        if probe_inputs is None:
            raise ContractError("gate diversity correction needs probe inputs")
        scores = gate_diversity_correction(scores, diversity_activations(model, probe_inputs, mask))
    if centrality_beta > 0:
        scores = centrality_adjust(scores, beta=centrality_beta)
    return scores


def top_mass_fraction(scores, fraction: float = 0.2) -> float:
    """Share of total score held by the top ``fraction`` of parameters."""
    flat = np.sort(scores.flat() if isinstance(scores, ImportanceScores) else np.ravel(scores))[::-1]
    total = flat.sum()
    if total == 0:
        return 0.0
    k = max(1, int(np.ceil(fraction * flat.size)))
    return float(flat[:k].sum() / total)


CSV_COLUMNS = ("block", "kind", "index", "weight", "gradient", "score")


def export_scores_csv(path, scores: ImportanceScores) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for key in scores.keys():
            s = scores.values[key].reshape(-1)
            w = scores.weights[key].reshape(-1) if scores.weights else np.full(s.size, np.nan)
            g = scores.gradients[key].reshape(-1) if scores.gradients else np.full(s.size, np.nan)
            for i in range(s.size):
                writer.writerow([key.block, key.kind.name, i, repr(float(w[i])), repr(float(g[i])), repr(float(s[i]))])
