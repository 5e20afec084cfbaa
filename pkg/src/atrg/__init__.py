"""Attribution analysis and entropy-regularised fine-tuning of a toy translator."""

from .attribution import (
    AttributionFeatures,
    AttributionMatrix,
    attribution_entropy,
    attribution_gradient_feature,
    extract_features,
    integrated_gradients,
    one_step_attribution,
)
from .autodiff import NumericError, ShapeError, Tensor, grad, no_grad
from .bleu import corpus_bleu, sentence_bleu
from .classifier import BoostedClassifier, EnsembleConfig, extract_token_features, f1_score, fit
from .config import ConfigError, RunConfig, load_config
from .corpus import ingest_tsv
from .data import DataError, SentencePair, Vocabulary
from .lab import (
    PerturbationSpec,
    SyntheticTaskSpec,
    degradation_curve,
    generate_synthetic_corpus,
    hallucination_rate,
    perturb_source,
    select_by_score,
)
from .model import ModelConfig, ModelFileError, Transformer
from .objective import TrainingConfig, combined_loss, label_smoothed_ce, train

__version__ = "0.1.0"

__all__ = [
    "AttributionFeatures",
    "AttributionMatrix",
    "BoostedClassifier",
    "ConfigError",
    "DataError",
    "EnsembleConfig",
    "ModelConfig",
    "ModelFileError",
    "NumericError",
    "PerturbationSpec",
    "RunConfig",
    "SentencePair",
    "ShapeError",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainingConfig",
    "Transformer",
    "Vocabulary",
    "attribution_entropy",
    "attribution_gradient_feature",
    "combined_loss",
    "corpus_bleu",
    "degradation_curve",
    "extract_features",
    "extract_token_features",
    "f1_score",
    "fit",
    "generate_synthetic_corpus",
    "grad",
    "hallucination_rate",
    "ingest_tsv",
    "integrated_gradients",
    "label_smoothed_ce",
    "load_config",
    "no_grad",
    "one_step_attribution",
    "perturb_source",
    "select_by_score",
    "sentence_bleu",
    "train",
]
