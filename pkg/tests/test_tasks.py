import numpy as np
import pytest

from prunelab.errors import ConfigError
from prunelab.tasks import IGNORE, TaskSpec, copy_targets, gen_task, markov_grammar, sine_oracle


def test_copy_targets_shift_by_delay():
    tokens = np.array([[1, 2, 3, 4, 5]])
    np.testing.assert_array_equal(copy_targets(tokens, 2), [[IGNORE, IGNORE, 1, 2, 3]])


def test_copy_task_shapes_and_determinism():
    spec = TaskSpec(kind="copy", vocab_size=8, seq_len=12, n_train=40, n_val=10, delay=3)
    a, b = gen_task(spec), gen_task(spec)
    assert a.train.inputs.shape == (40, 12)
    np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
    np.testing.assert_array_equal(a.train.targets[:, 3:], a.train.inputs[:, :-3])
    c = gen_task(spec, seed=1)
    assert c.spec.seed == 1 and not np.array_equal(a.train.inputs, c.train.inputs)


def test_validation_split_disjoint_from_train():
    spec = TaskSpec(kind="copy", vocab_size=3, seq_len=3, n_train=20, n_val=20, delay=1)
    ds = gen_task(spec)
    seen = {row.tobytes() for row in ds.train.inputs}
    assert all(row.tobytes() not in seen for row in ds.val.inputs)


def test_induction_answer_follows_first_marker():
    spec = TaskSpec(kind="induction", vocab_size=6, seq_len=10, n_train=30, n_val=5)
    ds = gen_task(spec)
    marker = 5
    for tokens, targets in zip(ds.train.inputs, ds.train.targets):
        first = int(np.flatnonzero(tokens == marker)[0])
        assert tokens[-1] == marker
        assert targets[-1] == tokens[first + 1]
        assert np.all(targets[:-1] == IGNORE)


def test_char_lm_follows_grammar():
    spec = TaskSpec(kind="char_lm", vocab_size=7, seq_len=16, n_train=30, n_val=5, grammar_branching=2)
    ds = gen_task(spec)
    trans = markov_grammar(7, 2, spec.seed)
    np.testing.assert_allclose(trans.sum(axis=1), 1.0)
    assert np.all((trans > 0).sum(axis=1) == 2)
    for x, y in zip(ds.train.inputs, ds.train.targets):
        np.testing.assert_array_equal(x[1:], y[:-1])
        assert np.all(trans[x, y] > 0)


def test_sine_oracle_matches_noise_free_targets():
    spec = TaskSpec(kind="sine", seq_len=20, n_train=10, n_val=6, noise=0.0, horizon=2)
    ds = gen_task(spec)
    np.testing.assert_allclose(sine_oracle(spec, "val"), ds.val.targets)
    np.testing.assert_allclose(sine_oracle(spec, "train"), ds.train.targets)
    noisy = gen_task(TaskSpec(kind="sine", seq_len=20, n_train=10, n_val=6, noise=0.1))
    assert not np.allclose(noisy.val.inputs[:, 1:], noisy.val.targets[:, :-1])


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(kind="translation")
    with pytest.raises(ConfigError):
        TaskSpec(kind="copy", seq_len=4, delay=4)
    with pytest.raises(ConfigError):
        TaskSpec.from_dict({"kind": "copy", "colour": 1})
    with pytest.raises(ConfigError):
        sine_oracle(TaskSpec(kind="copy"))
    with pytest.raises(ConfigError):
        gen_task(TaskSpec()).split("test")


def test_sample_uses_rng():
    ds = gen_task(TaskSpec(n_train=50, n_val=5))
    a = ds.sample(np.random.default_rng(0), 4)
    b = ds.sample(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.inputs.shape == (4, 32)
