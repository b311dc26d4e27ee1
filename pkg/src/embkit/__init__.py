"""embkit: desk-scale toolkit for retrofitting small embedding models for retrieval."""

from .data import Document, MinedPair, TrainingPair
from .loss import LossConfig, LossVariant
from .model import ModelParams, TokenizerConfig, embed_text, init_params, tokenize
from .trainer import TrainerConfig, train

__version__ = "0.1.0"

__all__ = [
    "Document",
    "LossConfig",
    "LossVariant",
    "MinedPair",
    "ModelParams",
    "TokenizerConfig",
    "TrainerConfig",
    "TrainingPair",
    "embed_text",
    "init_params",
    "tokenize",
    "train",
]
