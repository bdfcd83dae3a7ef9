"""Non-intrusive speech intelligibility prediction for hearing-impaired listeners.

Pipeline: CPC1-style corpus ingestion -> feature extraction (spectrogram or
self-supervised speech representation stages) -> representation-distance
analysis and/or BLSTM + attention-pooling correctness prediction -> metric
reports with per-system and per-listener breakdowns.
"""

__version__ = "0.1.0"

from sipred.corpus import (
    Audiogram,
    DatasetSplit,
    UtteranceRecord,
    Waveform,
    load_manifest,
    load_waveform,
    make_split,
    normalize_correctness,
)
from sipred.features import (
    BackendDescriptor,
    FeatureKind,
    FeatureMatrix,
    extract_fe,
    extract_ol,
    extract_spectrogram,
    register_mock_backend,
)
from sipred.predictor import PredictorModel, Prediction, build_model, forward_channel, predict_utterance

__all__ = [
    "Audiogram",
    "BackendDescriptor",
    "DatasetSplit",
    "FeatureKind",
    "FeatureMatrix",
    "Prediction",
    "PredictorModel",
    "UtteranceRecord",
    "Waveform",
    "build_model",
    "extract_fe",
    "extract_ol",
    "extract_spectrogram",
    "forward_channel",
    "load_manifest",
    "load_waveform",
    "make_split",
    "normalize_correctness",
    "predict_utterance",
    "register_mock_backend",
]
