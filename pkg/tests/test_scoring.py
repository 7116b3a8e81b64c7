import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prunelab.errors import ContractError
from prunelab.model import ComponentKind, ParamKey
from prunelab.scoring import (
    accumulate_gradients,
    block_dataflow_graph,
    centrality_adjust,
    component_centrality,
    compute_scores,
    diversity_factor,
    export_scores_csv,
    gate_diversity_correction,
    importance_base,
    importance_ssm_accumulated,
    summed_steps,
    top_mass_fraction,
)
from prunelab.tasks import Batch

K = ComponentKind
KEY = ParamKey(0, K.LINEAR_IN)
vals = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3), elements=vals), arrays(np.float64, (4, 3), elements=vals), st.floats(0, 3))
def test_base_score_formula(w, g, alpha):
    got = importance_base({KEY: w}, {KEY: g}, alpha).values[KEY]
    np.testing.assert_allclose(got, np.abs(w) * np.abs(g) ** alpha)
    assert np.all(got >= 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=vals), arrays(np.float64, (5,), elements=vals))
def test_alpha_zero_is_magnitude_even_for_zero_gradients(w, g):
    g = np.where(np.arange(5) % 2 == 0, 0.0, g)
    np.testing.assert_array_equal(importance_base({KEY: w}, {KEY: g}, 0.0).values[KEY], np.abs(w))


def test_base_score_contracts():
    with pytest.raises(ContractError):
        importance_base({KEY: np.ones(2)}, {KEY: np.ones(3)}, 1.0)
    with pytest.raises(ContractError):
        importance_base({KEY: np.ones(2)}, {}, 1.0)
    with pytest.raises(ContractError):
        importance_base({KEY: np.ones(2)}, {KEY: np.ones(2)}, -0.5)


def test_accumulated_score_sums_before_magnitude():
    w = np.array([2.0, -1.0])
    steps = {0: np.array([1.0, 3.0]), 1: np.array([-1.0, -1.0]), 2: np.array([0.5, 0.0])}
    got = importance_ssm_accumulated({KEY: w}, {KEY: steps}, 1.0).values[KEY]
    np.testing.assert_allclose(got, [2.0 * 0.5, 1.0 * 2.0])
    np.testing.assert_allclose(summed_steps({KEY: steps})[KEY], [0.5, 2.0])
    with pytest.raises(ContractError):
        summed_steps({KEY: {}})


def test_accumulated_score_falls_back_for_static_kinds():
    other = ParamKey(0, K.LINEAR_OUT)
    out = importance_ssm_accumulated({KEY: np.ones(2), other: np.ones(2)}, {KEY: [np.ones(2)]}, 1.0,
                                     gradients={other: np.full(2, 3.0)})
    np.testing.assert_allclose(out.values[other], [3.0, 3.0])
    with pytest.raises(ContractError):
        importance_ssm_accumulated({KEY: np.ones(2), other: np.ones(2)}, {KEY: [np.ones(2)]}, 1.0)


def test_accumulated_gradients_are_batch_mean(toy_model, rng):
    batches = [Batch(rng.integers(0, 5, (2, 6)), rng.integers(0, 5, (2, 6))) for _ in range(3)]
    window = accumulate_gradients(toy_model, batches)
    singles = [accumulate_gradients(toy_model, [b]).mean for b in batches]
    for key in window.mean:
        np.testing.assert_allclose(window.mean[key], sum(s[key] for s in singles) / 3, atol=1e-14)
    with pytest.raises(ContractError):
        accumulate_gradients(toy_model, [])


def test_time_resolved_sums_match_plain_gradients(toy_model, rng):
    batches = [Batch(rng.integers(0, 5, (2, 6)), rng.integers(0, 5, (2, 6)))]
    plain = accumulate_gradients(toy_model, batches)
    resolved = accumulate_gradients(toy_model, batches, time_resolved=True)
    summed = summed_steps(resolved.per_step)
    for key, g in summed.items():
        np.testing.assert_allclose(g, plain.mean[key], atol=1e-12)


def test_compute_scores_respects_mask(toy_model, rng):
    batches = [Batch(rng.integers(0, 5, (2, 6)), rng.integers(0, 5, (2, 6)))]
    keep = {k: rng.random(toy_model.params[k].shape) > 0.5 for k in toy_model.maskable_keys()}
    scores = compute_scores(toy_model, batches, alpha=1.0, mask=keep)
    for key, k in keep.items():
        assert np.all(scores.values[key][~k] == 0)
    zero = compute_scores(toy_model, batches, alpha=0.0)
    for key in toy_model.maskable_keys():
        np.testing.assert_array_equal(zero.values[key], np.abs(toy_model.params[key]))


def test_diversity_factor():
    acts = np.array([[0.0, 0.0, 1.0], [0.0, 2.0, -1.0], [0.0, 4.0, 1.0]])
    phi = diversity_factor(acts)
    spread = acts.std(axis=0)
    np.testing.assert_allclose(phi, np.clip(spread / spread.mean(), 0.5, 2.0))
    assert phi[0] == 0.5
    np.testing.assert_array_equal(diversity_factor(np.ones((4, 3))), np.full(3, 0.5))
    with pytest.raises(ContractError):
        diversity_factor(np.ones((1, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 3), elements=vals))
def test_diversity_factor_range(acts):
    phi = diversity_factor(acts)
    assert np.all((phi >= 0.5) & (phi <= 2.0))


def test_gate_diversity_scales_rows(toy_model):
    gate = ParamKey(0, K.GATE_PROJECTION)
    other = ParamKey(0, K.LINEAR_OUT)
    scores = importance_base({gate: np.ones((6, 6)), other: np.ones((6, 6))},
                             {gate: np.ones((6, 6)), other: np.ones((6, 6))}, 1.0)
    acts = np.random.default_rng(0).normal(size=(50, 6)) * np.arange(1, 7)
    out = gate_diversity_correction(scores, {gate: acts})
    np.testing.assert_allclose(out.values[gate][:, 0], diversity_factor(acts))
    np.testing.assert_array_equal(out.values[other], scores.values[other])
    assert out.corrections == ("gate_diversity",)


def test_centrality_ranking():
    c = component_centrality()
    assert max(c.values()) == 1.0
    assert c[K.LINEAR_IN] == 1.0
    # the timescale feeds both the decay and the write, so it ranks above every other SSM kind
    assert c[K.DELTA_PROJECTION] > c[K.INPUT_PROJECTION] > c[K.STATE_TRANSITION] > c[K.OUTPUT_PROJECTION]
    assert c[K.SKIP_TERM] == c[K.GATE_PROJECTION] > c[K.LINEAR_OUT]
    graph = block_dataflow_graph(horizon=3)
    assert graph.has_edge(("h", 0), ("h", 1))
    with pytest.raises(ContractError):
        block_dataflow_graph(horizon=0)


def test_centrality_adjust():
    scores = importance_base({KEY: np.ones(2)}, {KEY: np.ones(2)}, 1.0)
    out = centrality_adjust(scores, {K.LINEAR_IN: 0.5}, beta=0.2)
    np.testing.assert_allclose(out.values[KEY], 1.1)
    with pytest.raises(ContractError):
        centrality_adjust(scores, {K.LINEAR_IN: 0.5}, beta=-1)


def test_top_mass_fraction():
    assert top_mass_fraction(np.array([8.0, 1.0, 1.0, 0.0, 0.0])) == pytest.approx(0.8)
    assert top_mass_fraction(np.zeros(3)) == 0.0


def test_export_scores_csv(tmp_path):
    scores = importance_base({KEY: np.array([[1.0, -2.0]])}, {KEY: np.array([[0.5, 0.25]])}, 1.0)
    export_scores_csv(tmp_path / "s.csv", scores)
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[1]["score"]) == pytest.approx(0.5)
