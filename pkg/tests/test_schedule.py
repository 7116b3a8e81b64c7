import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab.errors import ConfigError
from prunelab.schedule import (
    SCHEDULE_KINDS,
    ScheduleState,
    alt_schedules,
    cubic_sparsity,
    pruning_iterations,
    sparsity_at,
)

states = st.builds(
    lambda s0, span, t0, length, k: ScheduleState(s0=s0, s_f=min(s0 + span, 0.99), t0=t0, T=t0 + length,
                                                  prune_every_k=k),
    st.floats(0.0, 0.5),
    st.floats(0.0, 0.49),
    st.integers(0, 500),
    st.integers(1, 5000),
    st.integers(1, 200),
)


@settings(max_examples=100, deadline=None)
@given(states, st.sampled_from(SCHEDULE_KINDS))
def test_every_schedule_is_monotone_and_bounded(state, kind):
    ts = np.linspace(state.t0 - 10, state.T + 10, 200)
    values = [sparsity_at(state, t, kind) for t in ts]
    assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
    assert values[0] == state.s0 and values[-1] == state.s_f
    assert all(state.s0 - 1e-15 <= v <= state.s_f + 1e-15 for v in values)


@settings(max_examples=100, deadline=None)
@given(states)
def test_cubic_endpoints_exact(state):
    assert cubic_sparsity(state, state.t0) == state.s0
    assert cubic_sparsity(state, state.T) == state.s_f


def test_cubic_reference_value():
    state = ScheduleState(s0=0.0, s_f=0.5, t0=0, T=100)
    assert cubic_sparsity(state, 50) == pytest.approx(0.4375, abs=1e-15)
    assert cubic_sparsity(state, 25) == pytest.approx(0.5 * (1 - 0.75**3))


def test_alternative_schedules():
    state = ScheduleState(s0=0.1, s_f=0.5, t0=10, T=110)
    assert alt_schedules(state, 60, "linear") == pytest.approx(0.3)
    assert alt_schedules(state, 110, "exponential") == 0.5
    assert alt_schedules(state, 10, "exponential") == pytest.approx(0.1)
    # the exponential ramp front-loads pruning relative to linear
    assert alt_schedules(state, 30, "exponential") > alt_schedules(state, 30, "linear")
    with pytest.raises(ConfigError):
        alt_schedules(state, 30, "sigmoid")


@settings(max_examples=50, deadline=None)
@given(states)
def test_pruning_iterations_cover_window(state):
    its = pruning_iterations(state)
    assert its[0] == state.t0 and its[-1] == state.T
    assert all(b > a for a, b in zip(its, its[1:]))
    assert all(b - a <= state.prune_every_k for a, b in zip(its, its[1:]))


def test_invalid_states():
    with pytest.raises(ConfigError):
        ScheduleState(s0=0.6, s_f=0.5)
    with pytest.raises(ConfigError):
        ScheduleState(s_f=1.0)
    with pytest.raises(ConfigError):
        ScheduleState(t0=100, T=100)
    with pytest.raises(ConfigError):
        ScheduleState(prune_every_k=0)


def test_from_fraction():
    state = ScheduleState.from_fraction(0.7, 5000)
    assert (state.t0, state.T, state.s_f) == (1250, 5000, 0.7)
