"""scikit-learn style front end: fit a selective SSM and prune it in one call."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from ._validation import check_label_targets, check_real_targets, check_series, check_tokens
from .engine import PruneConfig, run_pruning
from .model import ModelConfig, forward, init_model, make_probe_inputs
from .tasks import Batch, Dataset, TaskSpec
from .training import OptimizerConfig


class _PrunedSSMBase(BaseEstimator):
    def __init__(
        self,
        n_layers=2,
        model_dim=32,
        state_dim=8,
        param_mode="unconstrained",
        sparsity=0.5,
        alpha=1.0,
        strategy="global",
        schedule="cubic",
        steps=600,
        finetune_steps=100,
        prune_every_k=50,
        epsilon=0.01,
        lambda_coef=0.1,
        lr_start=3e-3,
        lr_end=3e-5,
        batch_size=16,
        random_state=0,
    ):
        self.n_layers = n_layers
        self.model_dim = model_dim
        self.state_dim = state_dim
        self.param_mode = param_mode
        self.sparsity = sparsity
        self.alpha = alpha
        self.strategy = strategy
        self.schedule = schedule
        self.steps = steps
        self.finetune_steps = finetune_steps
        self.prune_every_k = prune_every_k
        self.epsilon = epsilon
        self.lambda_coef = lambda_coef
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.batch_size = batch_size
        self.random_state = random_state

    def _configs(self):
        prune = PruneConfig(
            s_f=self.sparsity,
            T=self.steps,
            prune_every_k=self.prune_every_k,
            finetune_steps=self.finetune_steps,
            schedule=self.schedule,
            alpha=self.alpha,
            strategy=self.strategy,
            epsilon=self.epsilon,
            lambda_coef=self.lambda_coef,
            seed=self.random_state,
        )
        opt = OptimizerConfig(lr_start=self.lr_start, lr_end=self.lr_end, batch_size=self.batch_size)
        return prune, opt

    def _fit(self, inputs, targets, model_cfg: ModelConfig, spec: TaskSpec):
        prune, opt = self._configs()
        batch = Batch(inputs, targets)
        model = init_model(model_cfg, self.random_state)
        result = run_pruning(model, Dataset(spec, batch, batch), prune, opt, probe_inputs=make_probe_inputs(model_cfg))
        self.model_ = result.model
        self.mask_ = result.mask
        self.log_ = result.log
        self.train_log_ = result.train_log
        self.corrections_ = result.corrections_total
        return self

    def _raw(self, inputs) -> np.ndarray:
        check_is_fitted(self, "model_")
        return forward(self.model_, inputs, mask=self.mask_)[0].data

    @property
    def sparsity_(self) -> float:
        check_is_fitted(self, "mask_")
        return self.mask_.sparsity()


class PrunedSSMClassifier(ClassifierMixin, _PrunedSSMBase):
    """Next-token style classifier over integer sequences.

    ``y`` holds one label per position (``-1`` leaves a position unscored)
    or one label per sequence, which is read off the final position.
    """

    def fit(self, X, y):
        tokens = check_tokens(X)
        n, seq_len = tokens.shape
        targets, per_sequence = check_label_targets(y, n, seq_len)
        n_classes = int(max(tokens.max(), targets.max())) + 1
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = seq_len
        self.per_sequence_ = per_sequence
        cfg = ModelConfig(
            n_layers=self.n_layers, model_dim=self.model_dim, state_dim=self.state_dim,
            task_kind="classification", vocab_size=n_classes, n_outputs=n_classes,
            param_mode=self.param_mode, seed=self.random_state,
        )
        spec = TaskSpec(kind="copy", vocab_size=max(n_classes, 3), seq_len=seq_len, n_train=n, n_val=n, delay=1)
        return self._fit(tokens, targets, cfg, spec)

    def predict_proba(self, X) -> np.ndarray:
        logits = self._raw(self._check_X(X))
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return p[:, -1] if self.per_sequence_ else p

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy over scored positions."""
        pred = self.predict(X)
        y = np.asarray(y)
        valid = y >= 0
        weights = None
        if sample_weight is not None:
            # one weight per sequence, shared by its positions
            per_seq = np.asarray(sample_weight, dtype=np.float64).reshape(-1, *[1] * (y.ndim - 1))
            weights = np.broadcast_to(per_seq, y.shape)[valid]
        return float(np.average(pred[valid] == y[valid], weights=weights))

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "classes_")
        tokens = check_tokens(X)
        if tokens.max() >= len(self.classes_):
            raise ValueError(f"token id {tokens.max()} outside the fitted vocabulary of {len(self.classes_)}")
        return tokens


class PrunedSSMRegressor(RegressorMixin, _PrunedSSMBase):
    """Sequence-to-sequence regressor; ``y`` has one value (or vector) per position."""

    def fit(self, X, y):
        series = check_series(X)
        n, seq_len, n_features = series.shape
        targets = check_real_targets(y, n, seq_len)
        self.n_features_in_ = n_features
        self.n_outputs_ = targets.shape[-1]
        self.squeeze_ = np.ndim(y) == 2
        cfg = ModelConfig(
            n_layers=self.n_layers, model_dim=self.model_dim, state_dim=self.state_dim,
            task_kind="regression", n_features=n_features, n_outputs=self.n_outputs_,
            param_mode=self.param_mode, seed=self.random_state,
        )
        spec = TaskSpec(kind="sine", seq_len=seq_len, n_train=n, n_val=n)
        return self._fit(series, targets, cfg, spec)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        series = check_series(X)
        if series.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {series.shape[-1]}")
        out = self._raw(series)
        return out[..., 0] if self.squeeze_ else out

    def score(self, X, y, sample_weight=None) -> float:
        """R^2 over all positions and outputs."""
        pred = np.asarray(self.predict(X))
        y = np.asarray(y, dtype=np.float64)
        weights = None
        if sample_weight is not None:
            per_seq = np.asarray(sample_weight, dtype=np.float64).reshape(-1, *[1] * (y.ndim - 1))
            weights = np.broadcast_to(per_seq, y.shape).reshape(-1)
        return float(r2_score(y.reshape(-1), pred.reshape(-1), sample_weight=weights))
