"""Genre tagging over real and synthetic music collections."""

from .audio import (
    AudioClip,
    FeatureConfig,
    FeaturePipeline,
    MelFilterbank,
    MelSpectrogram,
    crop,
    load_audio,
    mel_filterbank,
    mel_spectrogram,
    stft_power,
)
from .data import (
    GENRES,
    DaPairBatch,
    FoldSplit,
    TrackRecord,
    assemble_batches,
    load_gtzan_manifest,
    random_splits,
    sample_da_pairs,
)
from .estimator import GenreTagger
from .evaluation import FoldResult, aggregate_folds, evaluate, extract_embeddings
from .losses import (
    DaConfig,
    combined_loss,
    cross_entropy,
    negative_pair_distance,
    positive_pair_distance,
    semantic_alignment_loss,
)
from .model import (
    ModelCheckpoint,
    ModelConfig,
    build_model,
    freeze_feature_layers,
    load_checkpoint,
    save_checkpoint,
)
from .training import Regime, RegimeData, TrainingConfig, TrainingHistory, train
from .tsne import tsne_project

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "DaConfig",
    "DaPairBatch",
    "FeatureConfig",
    "FeaturePipeline",
    "FoldResult",
    "FoldSplit",
    "GENRES",
    "GenreTagger",
    "MelFilterbank",
    "MelSpectrogram",
    "ModelCheckpoint",
    "ModelConfig",
    "Regime",
    "RegimeData",
    "TrackRecord",
    "TrainingConfig",
    "TrainingHistory",
    "aggregate_folds",
    "assemble_batches",
    "build_model",
    "combined_loss",
    "crop",
    "cross_entropy",
    "evaluate",
    "extract_embeddings",
    "freeze_feature_layers",
    "load_audio",
    "load_checkpoint",
    "load_gtzan_manifest",
    "mel_filterbank",
    "mel_spectrogram",
    "negative_pair_distance",
    "positive_pair_distance",
    "random_splits",
    "sample_da_pairs",
    "save_checkpoint",
    "semantic_alignment_loss",
    "stft_power",
    "train",
    "tsne_project",
]
