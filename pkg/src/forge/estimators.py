"""scikit-learn style wrapper around search + export + fine-tune."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Split
from .experiment import ExperimentConfig, load_seed_graph, make_model, measure
from .functional import softmax
from .model import SearchModel
from .tensor import Tensor
from .train import predict_logits, train_search


class SearchClassifier(ClassifierMixin, BaseEstimator):
    """Search a compact classifier for image-like inputs.

    :param method: ``"pit"``, ``"supernet"``, ``"mps"`` or ``None`` for plain training
    :param seed_graph: zoo name, graph JSON path or saved graph directory
    :param strength: cost regularization strength
    :param cost: regularizer cost name (defaults to the method's usual cost)
    :param input_shape: per-sample shape; inferred from 4D ``X`` or taken as
        ``(1, s, s)`` for flat square inputs
    """

    def __init__(self, method: Optional[str] = "pit", seed_graph: str = "seed_cnn",
                 strength: float = 1e-6, cost: Optional[str] = None, epochs: int = 20,
                 finetune_epochs: int = 5, batch_size: int = 32, lr: float = 1e-2,
                 arch_lr: float = 1e-2, warmup: float = 0.1, method_options: Optional[Dict] = None,
                 input_shape=None, random_state: int = 0):
        self.method = method
        self.seed_graph = seed_graph
        self.strength = strength
        self.cost = cost
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.arch_lr = arch_lr
        self.warmup = warmup
        self.method_options = method_options
        self.input_shape = input_shape
        self.random_state = random_state

    def _reshape(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        shape = tuple(self.input_shape_)
        if X.shape[1:] == shape:
            return X
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            return X.reshape((len(X),) + shape)
        raise ValueError(f"X has per-sample shape {X.shape[1:]}, expected {shape}")

    def _resolve_shape(self, X: np.ndarray):
        if self.input_shape is not None:
            return tuple(self.input_shape)
        if X.ndim == 4:
            return tuple(X.shape[1:])
        if X.ndim == 3:
            return (1,) + tuple(X.shape[1:])
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError("cannot infer an image shape from flat inputs; pass input_shape")
        return (1, side, side)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_shape_ = self._resolve_shape(X)
        if X.ndim == 3:
            X = X[:, None]
        X = self._reshape(X)
        self.n_features_in_ = int(np.prod(self.input_shape_))

        chain = [self.method] if self.method else ["pit"]
        cfg = ExperimentConfig(chain=chain, epochs=self.epochs, finetune_epochs=self.finetune_epochs,
                               batch_size=self.batch_size, lr=self.lr, arch_lr=self.arch_lr,
                               warmup=self.warmup, seed=self.random_state,
                               options={chain[0]: dict(self.method_options or {})}
                               if self.method else {})
        seed = load_seed_graph(self.seed_graph, self.random_state, self.input_shape_,
                               len(self.classes_))
        train = Split(X, y_enc.astype(np.int64))
        if self.method is None:
            model = SearchModel(seed)
            self.history_ = train_search(model, train, cfg.train_config(
                0.0, epochs=self.epochs + self.finetune_epochs)).history
            self.graph_ = model.graph
        else:
            model = make_model(self.method, seed, cfg)
            cost = self.cost or cfg.regularizer[self.method]
            self.history_ = train_search(model, train, cfg.train_config(self.strength, cost)).history
            self.search_model_ = model
            self.graph_ = model.export()
            if self.finetune_epochs:
                train_search(SearchModel(self.graph_), train,
                             cfg.train_config(0.0, epochs=self.finetune_epochs, warmup=0.0))
        self.costs_ = measure(self.graph_)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim == 3:
            X = X[:, None]
        return predict_logits(self.graph_, self._reshape(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X)), axis=1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Class logits of the exported network."""
        return self.decision_function(X)
