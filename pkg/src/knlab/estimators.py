"""scikit-learn style wrappers so the pipeline composes with ``Pipeline`` & co.

>>> lm = ToyTransformerLM(epochs=5).fit(sentences)
>>> X = NeuronAttributor(lm.model_, steps=20).transform(prompts)
>>> sel = KnowledgeNeuronSelector(layer_size=lm.model_.config.d_mlp).fit(X)
>>> sel.neurons_
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attribution import Prompt, batch_attribute
from .editing import categorical_accuracy
from .kn_search import SearchConfig, refine_threshold
from .lm import PromptModel
from .localisation import r_squared
from .model import ModelConfig, TransformerLM
from .training import TrainSettings, train
from .vocab import Vocabulary


class ToyTransformerLM(BaseEstimator):
    """Train a toy transformer on whitespace-tokenised sentences."""

    def __init__(self, num_layers=2, d_model=64, d_mlp=256, n_heads=4, max_seq_len=24,
                 mode="bidirectional", epochs=10, batch_size=32, lr=3e-4, seed=0, vocab=None):
        self.num_layers = num_layers
        self.d_model = d_model
        self.d_mlp = d_mlp
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.vocab = vocab

    def fit(self, X: Sequence[str], y=None):
        vocab = self.vocab or Vocabulary(w for s in X for w in s.split())
        config = ModelConfig(self.num_layers, self.d_model, self.d_mlp, self.n_heads, len(vocab),
                             self.max_seq_len, self.mode, mask_token_id=vocab.mask_id, pad_token_id=vocab.pad_id)
        settings = TrainSettings(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        self.checkpoint_ = train(config, [vocab.encode(s) for s in X], settings, self.seed)
        self.checkpoint_.metadata["vocab"] = list(vocab.tokens)
        self.model_ = self.checkpoint_.model()
        self.vocab_ = vocab
        self.loss_curve_ = list(self.checkpoint_.metadata["epoch_losses"])
        return self

    def predict_proba(self, X: Sequence[str]) -> np.ndarray:
        """Distributions at the blank of each prompt."""
        check_is_fitted(self, "model_")
        return PromptModel(self.model_, self.vocab_).distributions(list(X))

    def predict(self, X: Sequence[str]) -> list[str]:
        return [self.vocab_.tokens[i] for i in self.predict_proba(X).argmax(axis=1)]

    def score(self, X: Sequence, y=None) -> float:
        """Minimal-pair accuracy over ``MinimalPair`` records."""
        check_is_fitted(self, "model_")
        return categorical_accuracy(PromptModel(self.model_, self.vocab_), list(X)).score


class NeuronAttributor(TransformerMixin, BaseEstimator):
    """Prompts -> flattened integrated-gradients maps, shape (n, L * d_m)."""

    def __init__(self, model: TransformerLM | None = None, steps: int = 20, scope: str = "all_tokens", n_jobs: int = 1):
        self.model = model
        self.steps = steps
        self.scope = scope
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("NeuronAttributor needs a model")
        self.n_layers_ = self.model.config.num_layers
        self.layer_size_ = self.model.config.d_mlp
        return self

    def transform(self, X: Sequence[Prompt]) -> np.ndarray:
        if not hasattr(self, "layer_size_"):
            self.fit()
        maps = batch_attribute(self.model, list(X), self.steps, self.scope, self.n_jobs)
        return np.stack([m.scores.ravel() for m in maps])


class KnowledgeNeuronSelector(TransformerMixin, BaseEstimator):
    """Select KNs from attribution maps; behaves like a feature selector."""

    def __init__(self, pi=0.20, tau=0.70, step=0.05, kn_range=(2, 5), max_iter=20, layer_size=None):
        self.pi = pi
        self.tau = tau
        self.step = step
        self.kn_range = kn_range
        self.max_iter = max_iter
        self.layer_size = layer_size

    def _maps(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            return check_array(X, allow_nd=True)
        X = check_array(X)
        size = self.layer_size or X.shape[1]
        if X.shape[1] % size:
            raise ValueError(f"{X.shape[1]} features are not a whole number of layers of size {size}")
        return X.reshape(len(X), -1, size)

    def fit(self, X, y=None):
        maps = self._maps(X)
        cfg = SearchConfig(self.pi, self.tau, self.step, self.kn_range[0], self.kn_range[1], self.max_iter)
        kn = refine_threshold(list(maps), cfg)
        self.kn_set_ = kn
        self.neurons_ = list(kn.neurons)
        self.tau_ = kn.tau
        self.kn_count_at_tau0_ = kn.kn_count_at_tau0
        self.n_iter_ = kn.iterations
        self.in_range_ = kn.in_range
        self.map_shape_ = maps.shape[1:]
        self.r_squared_ = r_squared(list(maps)) if all(np.any(m) for m in maps) else float("nan")
        return self

    def get_support(self, indices: bool = False):
        check_is_fitted(self, "neurons_")
        mask = np.zeros(self.map_shape_, dtype=bool)
        for n in self.neurons_:
            mask[n.layer, n.neuron] = True
        mask = mask.ravel()
        return np.flatnonzero(mask) if indices else mask

    def transform(self, X) -> np.ndarray:
        maps = self._maps(X)
        return maps.reshape(len(maps), -1)[:, self.get_support()]
