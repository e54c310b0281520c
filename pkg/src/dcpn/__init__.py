"""Dual-channel prototype networks for few-shot image classification."""

from .data import Dataset, DatasetSpec, EpisodeSpec, generate_synthetic_corpus, load_dataset, sample_episode
from .encoders import ConvEncoderConfig, DualEncoder, PyramidEncoderConfig
from .evaluation import MetricsReport, evaluate_protocol
from .fewshot import DCPN, HeadConfig, fit_pca, meta_train, score_query

__version__ = "0.1.0"

__all__ = [
    "DCPN", "ConvEncoderConfig", "Dataset", "DatasetSpec", "DualEncoder", "EpisodeSpec", "HeadConfig",
    "MetricsReport", "PyramidEncoderConfig", "evaluate_protocol", "fit_pca", "generate_synthetic_corpus",
    "load_dataset", "meta_train", "sample_episode", "score_query",
]
