"""Scikit-learn style estimator wrapping the regime training engine.

GenreTagger behaves like any other classifier: constructor keywords are
hyperparameters surfaced through get_params/set_params, fit trains under the
selected regime, and predict/predict_proba/transform consume audio paths or
TrackRecords. transform returns the penultimate-layer embeddings, so the
tagger drops into sklearn pipelines as a feature extractor too.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .audio import FeatureConfig, FeaturePipeline
from .data import GENRES, FoldSplit, TrackRecord, coerce_records, random_splits
from .losses import DaConfig
from .model import ModelConfig, forward_batch, network_from_checkpoint
from .training import Regime, RegimeData, TrainingConfig, train


class GenreTagger(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Convolutional genre tagger with six training regimes.

    Parameters mirror the training defaults: batch size 4, Adam at 1e-3
    (1e-4 when fine-tuning), early-stopping patience 5, margin 2 and
    gamma 0.7 for the domain-adaptation regime.
    """

    def __init__(
        self,
        regime: str = "e2e-real",
        *,
        learning_rate: float | None = None,
        batch_size: int = 4,
        patience: int = 5,
        max_epochs: int = 100,
        margin: float = 2.0,
        gamma: float = 0.7,
        negative_variant: str = "squared",
        init_checkpoint=None,
        n_mels: int = 96,
        embedding_dim: int = 512,
        timbral_heights: tuple[int, ...] = (38, 86),
        timbral_width: int = 7,
        temporal_widths: tuple[int, ...] = (32, 64, 128),
        front_channels: int = 32,
        backend_channels: int = 64,
        backend_kernel: int = 7,
        backend_layers: int = 3,
        sample_rate: int = 16000,
        window: int = 512,
        hop: int = 256,
        crop_seconds: float = 10.0,
        val_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.regime = regime
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.margin = margin
        self.gamma = gamma
        self.negative_variant = negative_variant
        self.init_checkpoint = init_checkpoint
        self.n_mels = n_mels
        self.embedding_dim = embedding_dim
        self.timbral_heights = timbral_heights
        self.timbral_width = timbral_width
        self.temporal_widths = temporal_widths
        self.front_channels = front_channels
        self.backend_channels = backend_channels
        self.backend_kernel = backend_kernel
        self.backend_layers = backend_layers
        self.sample_rate = sample_rate
        self.window = window
        self.hop = hop
        self.crop_seconds = crop_seconds
        self.val_fraction = val_fraction
        self.random_state = random_state

    # -- configuration assembly -------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            n_mels=self.n_mels,
            n_classes=len(GENRES),
            embedding_dim=self.embedding_dim,
            timbral_heights=tuple(self.timbral_heights),
            timbral_width=self.timbral_width,
            temporal_widths=tuple(self.temporal_widths),
            front_channels=self.front_channels,
            backend_channels=self.backend_channels,
            backend_kernel=self.backend_kernel,
            backend_layers=self.backend_layers,
        )

    def _feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            sample_rate=self.sample_rate,
            window=self.window,
            hop=self.hop,
            n_mels=self.n_mels,
            crop_seconds=self.crop_seconds,
        )

    def _training_config(self) -> TrainingConfig:
        return TrainingConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            max_epochs=self.max_epochs,
            da=DaConfig(margin=self.margin, gamma=self.gamma, negative_variant=self.negative_variant),
            seed=self.random_state,
            model=self._model_config(),
            features=self._feature_config(),
        )

    # -- fitting ------------------------------------------------------------

    def _domain_split(self, records: list[TrackRecord], val_records: list[TrackRecord] | None, fold_id: int = 0):
        """Per-domain FoldSplits, holding out val_fraction when no explicit
        validation records are supplied."""
        def one_domain(domain: str) -> FoldSplit | None:
            pool = [r for r in records if r.domain == domain]
            if not pool:
                return None
            if val_records is not None:
                val = tuple(r for r in val_records if r.domain == domain)
                return FoldSplit(fold_id=fold_id, train=tuple(pool), val=val)
            split = random_splits(pool, k=1, val_fraction=self.val_fraction, seed=self.random_state)[0]
            return FoldSplit(fold_id=fold_id, train=split.train, val=split.val)

        return one_domain("real"), one_domain("synthetic")

    def fit(self, X, y=None, *, domain=None, validation=None):
        """Train under the configured regime.

        X is a sequence of TrackRecords, or of audio paths with y giving
        genre labels (domain optionally tagging each item). validation may
        be records or an (X, y) pair; without it a stratified val_fraction
        holdout is carved from X.
        """
        records = coerce_records(X, y, domain)
        val_records = None
        if validation is not None:
            if isinstance(validation, tuple):
                val_records = coerce_records(*validation) if len(validation) > 1 else coerce_records(validation[0])
            else:
                val_records = coerce_records(validation)
        real, synth = self._domain_split(records, val_records)
        config = self._training_config()
        pipeline = FeaturePipeline(config.features)
        checkpoint, history = train(
            Regime(self.regime, init_checkpoint=self.init_checkpoint),
            RegimeData(real=real, synth=synth),
            config,
            feature_source=pipeline,
        )
        self.classes_ = np.asarray(GENRES, dtype=object)
        self.checkpoint_ = checkpoint
        self.network_ = network_from_checkpoint(checkpoint)
        self.history_ = history
        self.pipeline_ = pipeline
        self.n_features_in_ = self.n_mels
        return self

    # -- inference ------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("this GenreTagger instance is not fitted yet; call fit first")

    def _features_for(self, X, y=None) -> np.ndarray:
        if y is None and not (len(X) and isinstance(X[0], TrackRecord)):
            # Paths without labels: genre is unknown at prediction time.
            feats = [self.pipeline_.features(str(p), "center") for p in X]
        else:
            records = coerce_records(X, y)
            feats = [self.pipeline_.features(r, "center") for r in records]
        return np.stack(feats)

    def _forward(self, X) -> tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        feats = self._features_for(X)
        embeddings, probs = [], []
        for start in range(0, len(feats), self.batch_size):
            emb, prob = forward_batch(self.network_, feats[start : start + self.batch_size])
            embeddings.append(emb)
            probs.append(prob)
        return np.concatenate(embeddings), np.concatenate(probs)

    def predict_proba(self, X) -> np.ndarray:
        _, probs = self._forward(X)
        return probs

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Penultimate-layer embeddings, one row per input clip."""
        embeddings, _ = self._forward(X)
        return embeddings

    def score(self, X, y=None, sample_weight=None) -> float:
        if y is None:
            records = coerce_records(X)
            y = [r.genre for r in records]
        predicted = self.predict(X)
        y = np.asarray(y, dtype=object)
        if sample_weight is None:
            return float((predicted == y).mean())
        sample_weight = np.asarray(sample_weight, dtype=float)
        return float(((predicted == y) * sample_weight).sum() / sample_weight.sum())
