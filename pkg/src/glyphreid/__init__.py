"""Text-to-image identity retrieval on a synthetic glyph corpus."""

__version__ = "0.1.0"

from .corpus import CorpusSpec, Corpus, generate_corpus, sample_pair_batch, mask_tokens
from .model import ModelConfig, RetrievalModel, save_checkpoint, load_checkpoint
from .momentum import MomentumModel, RepQueue
from .trainer import TrainConfig, Trainer, train
from .retrieval import evaluate_retrieval, rank_two_stage, recall_at_k, mean_average_precision

__all__ = [
    "CorpusSpec", "Corpus", "generate_corpus", "sample_pair_batch", "mask_tokens",
    "ModelConfig", "RetrievalModel", "save_checkpoint", "load_checkpoint",
    "MomentumModel", "RepQueue",
    "TrainConfig", "Trainer", "train",
    "evaluate_retrieval", "rank_two_stage", "recall_at_k", "mean_average_precision",
]
