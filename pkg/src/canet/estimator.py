"""scikit-learn style wrapper around model construction, training and adaptation."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import Metrics
from .model import CANetModel, EncoderConfig, ModelConfig
from .synthdata import ChangeDataset
from .tensor import Tensor
from .trainer import TrainConfig, adapt, evaluate, train
from .validation import check_dataset_id, check_label_map, check_pair_array

__all__ = ["ChangeDetector"]


class ChangeDetector(BaseEstimator):
    """Pixel-wise change detector with per-dataset adapters.

    ``X`` holds image pairs as (n, 2, 3, h, w) or (n, 6, h, w) arrays in
    [0, 1] (uint8 is rescaled); ``y`` holds (n, h, w) binary change maps.
    :meth:`fit` trains every parameter for ``dataset_id``; :meth:`adapt`
    registers another dataset and trains only its adapter and BN entries,
    leaving predictions for earlier datasets untouched.

    Examples
    --------
    >>> det = ChangeDetector(epochs=1, widths=(4, 8), eta=2)
    >>> X = np.zeros((2, 2, 3, 8, 8), np.float32); y = np.zeros((2, 8, 8), np.uint8)
    >>> det.fit(X, y).predict(X).shape
    (2, 8, 8)
    """

    def __init__(
        self,
        eta=3,
        widths=(16, 32, 64, 128),
        kinds="plain",
        pool_mode="channel",
        icm_width=16,
        bn_scope="all",
        ablation="none",
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        batch_size=8,
        epochs=30,
        augment_hflip=True,
        random_state=0,
        dataset_id="hist",
    ):
        self.eta = eta
        self.widths = widths
        self.kinds = kinds
        self.pool_mode = pool_mode
        self.icm_width = icm_width
        self.bn_scope = bn_scope
        self.ablation = ablation
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment_hflip = augment_hflip
        self.random_state = random_state
        self.dataset_id = dataset_id

    def _model_config(self) -> ModelConfig:
        widths = tuple(self.widths)
        kinds = (self.kinds,) * len(widths) if isinstance(self.kinds, str) else tuple(self.kinds)
        return ModelConfig(
            encoder=EncoderConfig(widths, kinds),
            eta=self.eta,
            icm_width=self.icm_width,
            pool_mode=self.pool_mode,
            bn_scope=self.bn_scope,
            ablation=self.ablation,
            seed=int(self.random_state),
        )

    def _train_config(self, scope: str) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state),
            augment_hflip=self.augment_hflip,
            scope=scope,
            ablation=self.ablation,
        )

    def _data(self, X, y, name: str, multiple: int) -> ChangeDataset:
        x1, x2 = check_pair_array(X, multiple=multiple)
        labels = check_label_map(y, x1.shape[0], x1.shape[-2:])
        return ChangeDataset(name, x1, x2, labels)

    def fit(self, X, y):
        config = self._model_config()
        ds = check_dataset_id(self.dataset_id)
        data = self._data(X, y, ds, 2 ** config.encoder.depth)
        self.model_ = CANetModel(config, [ds])
        self.record_ = train(self.model_, data, self._train_config("full"), ds)
        self.dataset_ids_ = [ds]
        self.image_size_ = data.x1.shape[-2:]
        return self

    def adapt(self, X, y, dataset_id: str, init_from: Optional[str] = "auto"):
        """Add ``dataset_id`` and train only its adapter on (X, y)."""
        check_is_fitted(self, "model_")
        ds = check_dataset_id(dataset_id)
        data = self._data(X, y, ds, 2 ** self.model_.config.encoder.depth)
        self.record_ = adapt(self.model_, ds, data, self._train_config("adapter_only"), init_from=init_from)
        self.dataset_ids_ = self.model_.dataset_ids
        return self

    def _pairs(self, X):
        check_is_fitted(self, "model_")
        return check_pair_array(X, multiple=2 ** self.model_.config.encoder.depth)

    def _route(self, dataset_id):
        ds = self.dataset_ids_[0] if dataset_id is None else dataset_id
        if ds not in self.dataset_ids_:
            raise ValueError(f"unknown dataset id {ds!r}; fitted ids are {self.dataset_ids_}")
        return ds

    def decision_function(self, X, dataset_id: Optional[str] = None, batch_size: int = 16) -> np.ndarray:
        """Logit margin (changed minus unchanged), shape (n, h, w)."""
        x1, x2 = self._pairs(X)
        ds = self._route(dataset_id)
        out = np.empty((x1.shape[0],) + x1.shape[-2:], np.float32)
        for s in range(0, x1.shape[0], batch_size):
            logits, _ = self.model_.forward(Tensor(x1[s : s + batch_size]), Tensor(x2[s : s + batch_size]), ds, "eval")
            out[s : s + batch_size] = logits.data[:, 1] - logits.data[:, 0]
        return out

    def transform(self, X, dataset_id: Optional[str] = None) -> np.ndarray:
        """Per-pixel probability of change, shape (n, h, w)."""
        margin = self.decision_function(X, dataset_id).astype(np.float64)
        return (1.0 / (1.0 + np.exp(-margin))).astype(np.float32)

    def predict(self, X, dataset_id: Optional[str] = None) -> np.ndarray:
        """Binary change maps (n, h, w) as uint8; ties count as unchanged."""
        return (self.decision_function(X, dataset_id) > 0).astype(np.uint8)

    def evaluate(self, X, y, dataset_id: Optional[str] = None) -> Metrics:
        x1, x2 = self._pairs(X)
        ds = self._route(dataset_id)
        labels = check_label_map(y, x1.shape[0], x1.shape[-2:])
        return evaluate(self.model_, ds, ChangeDataset(ds, x1, x2, labels))

    def score(self, X, y, dataset_id: Optional[str] = None) -> float:
        """F1 of the change class."""
        return self.evaluate(X, y, dataset_id).f1
