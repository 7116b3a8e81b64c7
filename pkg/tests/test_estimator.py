import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from prunelab import PrunedSSMClassifier, PrunedSSMRegressor
from prunelab.tasks import TaskSpec, gen_task

FAST = dict(n_layers=1, model_dim=8, state_dim=4, steps=40, finetune_steps=10, prune_every_k=10, batch_size=8)


@pytest.fixture(scope="module")
def copy_data():
    ds = gen_task(TaskSpec(kind="copy", vocab_size=5, seq_len=10, n_train=48, n_val=16, delay=2))
    return ds.train.inputs, ds.train.targets


@pytest.fixture(scope="module")
def fitted(copy_data):
    X, y = copy_data
    return PrunedSSMClassifier(**FAST).fit(X, y)


def test_classifier_shapes_and_sparsity(fitted, copy_data):
    X, y = copy_data
    proba = fitted.predict_proba(X[:3])
    assert proba.shape == (3, 10, 5)
    np.testing.assert_allclose(proba.sum(axis=-1), 1.0)
    assert fitted.predict(X[:3]).shape == (3, 10)
    assert 0.0 <= fitted.score(X, y) <= 1.0
    assert fitted.sparsity_ == pytest.approx(0.5, abs=0.01)
    assert fitted.mask_.n_masked > 0 and len(fitted.log_) > 0
    np.testing.assert_array_equal(fitted.classes_, np.arange(5))


def test_score_weights_are_per_sequence(fitted, copy_data):
    X, y = copy_data
    pred = fitted.predict(X[:2])
    first = np.mean(pred[0][y[0] >= 0] == y[0][y[0] >= 0])
    assert fitted.score(X[:2], y[:2], sample_weight=[1.0, 0.0]) == pytest.approx(first)


def test_clone_and_params():
    est = PrunedSSMClassifier(sparsity=0.7, alpha=0.0)
    copy = clone(est)
    assert copy.get_params()["sparsity"] == 0.7 and copy.get_params()["alpha"] == 0.0
    with pytest.raises(NotFittedError):
        check_is_fitted(copy)
    with pytest.raises(NotFittedError):
        copy.predict(np.zeros((1, 4), dtype=int))


def test_per_sequence_labels(copy_data):
    X, _ = copy_data
    labels = X[:, 0]
    est = PrunedSSMClassifier(**FAST, sparsity=0.3).fit(X, labels)
    assert est.per_sequence_
    assert est.predict_proba(X[:4]).shape == (4, 5)
    assert est.predict(X[:4]).shape == (4,)


def test_fit_is_deterministic(copy_data):
    X, y = copy_data
    a = PrunedSSMClassifier(**FAST, random_state=3).fit(X, y)
    b = PrunedSSMClassifier(**FAST, random_state=3).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_regressor():
    ds = gen_task(TaskSpec(kind="sine", seq_len=12, n_train=32, n_val=8))
    X, y = ds.train.inputs[..., 0], ds.train.targets[..., 0]
    est = PrunedSSMRegressor(**FAST).fit(X, y)
    assert est.predict(X).shape == y.shape and est.n_outputs_ == 1
    assert np.isfinite(est.score(X, y))
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 12, 3)))


@pytest.mark.parametrize(
    "X, y",
    [
        (np.array([[0.5, 1.0]]), np.array([[0, 1]])),
        (np.array([[-1, 1]]), np.array([[0, 1]])),
        (np.array([[0, 1]]), np.array([[-1, -1]])),
        (np.array([[0, 1]]), np.array([[0, 1, 2]])),
    ],
)
def test_classifier_validation(X, y):
    with pytest.raises(ValueError):
        PrunedSSMClassifier(**FAST).fit(X, y)


def test_unknown_token_at_predict(fitted):
    with pytest.raises(ValueError, match="vocabulary"):
        fitted.predict(np.full((1, 10), 9))
