"""scikit-learn style wrappers around the model, trainer and budget search."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .model import ModelConfig, TransformerLM
from .pruning import PruneBudget, keep_masks_for, search_model_budget
from .tasks import Batch
from .training import TrainConfig, WindowSource, evaluate, train


def check_tokens(X, vocab_size: int | None = None, max_len: int | None = None) -> np.ndarray:
    """Validate a 2-D integer token array."""
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if X.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("token arrays must hold integer ids")
        X = X.astype(np.int64)
    if X.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and X.max() >= vocab_size:
        raise ValueError(f"token id {int(X.max())} outside vocabulary of size {vocab_size}")
    if max_len is not None and X.shape[1] > max_len:
        raise ValueError(f"sequence length {X.shape[1]} exceeds context size {max_len}")
    return X


def make_batch(X, y=None, sample_mask=None, pad_token: int | None = 0) -> Batch:
    """Next-token batch: with ``y`` omitted, ``X[:, 1:]`` is predicted from ``X[:, :-1]``."""
    X = np.asarray(X)
    if y is None:
        tokens, targets = X[:, :-1], X[:, 1:]
    else:
        tokens, targets = X, np.asarray(y)
        if targets.shape != tokens.shape:
            raise ValueError(f"y shape {targets.shape} does not match X shape {tokens.shape}")
    if sample_mask is not None:
        mask = np.asarray(sample_mask, dtype=bool)
        if y is None:
            mask = mask[:, 1:]
    elif pad_token is not None:
        mask = targets != pad_token
    else:
        mask = np.ones(targets.shape, dtype=bool)
    return Batch(np.ascontiguousarray(tokens), np.ascontiguousarray(targets), mask)


class SelectiveTransformerLM(BaseEstimator):
    """Decoder-only language model with optional selective attention.

    ``X`` is an integer array of token sequences.  ``score`` returns the
    negative log-perplexity so that larger is better.
    """

    def __init__(
        self,
        d=1,
        context_size=64,
        vocab_size=259,
        selective=True,
        selection_source="head_zero",
        shift_future=True,
        constrain_relu=True,
        protect_bos=True,
        protect_self=True,
        steps=200,
        batch_size=16,
        lr=0.005,
        warmup_steps=20,
        mem_epsilon=None,
        mem_tau=1.0,
        pad_token=0,
        random_state=0,
    ):
        self.d = d
        self.context_size = context_size
        self.vocab_size = vocab_size
        self.selective = selective
        self.selection_source = selection_source
        self.shift_future = shift_future
        self.constrain_relu = constrain_relu
        self.protect_bos = protect_bos
        self.protect_self = protect_self
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.mem_epsilon = mem_epsilon
        self.mem_tau = mem_tau
        self.pad_token = pad_token
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            context_size=self.context_size,
            vocab_size=self.vocab_size,
            selective=self.selective,
            selection_source=self.selection_source,
            shift_future=self.shift_future,
            constrain_relu=self.constrain_relu,
            protect_bos=self.protect_bos,
            protect_self=self.protect_self,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_steps=min(self.warmup_steps, self.steps),
            seed=self.random_state,
            mem_epsilon=self.mem_epsilon,
            mem_tau=self.mem_tau,
            eval_every=max(self.steps, 1),
        )

    def fit(self, X, y=None, sample_mask=None):
        X = check_tokens(X, self.vocab_size, self.context_size + (1 if y is None else 0))
        batch = make_batch(X, y, sample_mask, self.pad_token)
        result = train(self._model_config(), self._train_config(), WindowSource(batch, self.random_state))
        self.model_ = result.model
        self.history_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.vocab_size, self.context_size)
        with T.no_grad():
            logits, states = self.model_.forward(X)
        return logits.data, states

    def predict_log_proba(self, X) -> np.ndarray:
        logits, _ = self._forward(X)
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def predict(self, X) -> np.ndarray:
        """Greedy next-token id at every position."""
        logits, _ = self._forward(X)
        return logits.argmax(axis=-1)

    def selection_masks(self, X) -> np.ndarray:
        """Accumulated masks ``F`` as ``[L, b, n, n]`` (zeros for standard attention)."""
        X = check_tokens(X, self.vocab_size, self.context_size)
        _, states = self._forward(X)
        b, n = X.shape
        return np.stack([s.F_array(n, b) for s in states])

    def score(self, X, y=None, sample_mask=None) -> float:
        check_is_fitted(self, "model_")
        batch = make_batch(check_tokens(X, self.vocab_size), y, sample_mask, self.pad_token)
        return -evaluate(self.model_, batch, "log_perplexity")


class ContextPruner(TransformerMixin, BaseEstimator):
    """Greedy per-layer budget search; ``transform`` returns keep masks.

    ``fit`` takes tune sequences and a fitted :class:`SelectiveTransformerLM`
    (or a raw ``TransformerLM``) and stops once the tune log-perplexity would
    exceed the unpruned value plus ``tolerance``.
    """

    def __init__(self, estimator=None, policy="selective_f", C=8, tolerance=0.01, pad_token=0):
        self.estimator = estimator
        self.policy = policy
        self.C = C
        self.tolerance = tolerance
        self.pad_token = pad_token

    def _model(self) -> TransformerLM:
        est = self.estimator
        if isinstance(est, TransformerLM):
            return est
        check_is_fitted(est, "model_")
        return est.model_

    def fit(self, X, y=None):
        model = self._model()
        X = check_tokens(X, model.config.vocab_size)
        tune = make_batch(X, y, pad_token=self.pad_token)
        base = evaluate(model, tune)
        self.search_ = search_model_budget(model, tune, base + self.tolerance, C=self.C, policy=self.policy)
        self.budget_: PruneBudget = self.search_.budget
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        """Keep masks ``[L, b, n, n]`` under the fitted budget."""
        check_is_fitted(self, "budget_")
        model = self._model()
        X = check_tokens(X, model.config.vocab_size, model.config.context_size)
        b, n = X.shape
        with T.no_grad():
            _, states = model.forward(X)
        return keep_masks_for([s.F_array(n, b) for s in states], self.budget_)
