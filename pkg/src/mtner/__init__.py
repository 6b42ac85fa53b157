"""Pointer-network NER with an auxiliary token-relation task and lexicon-derived type attention."""

from .corpus import EntityMention, Sentence, SynthConfig, generate_synthetic
from .model import ModelConfig, MultiTaskNER
from .training import TrainConfig, evaluate, train

__all__ = [
    "EntityMention",
    "ModelConfig",
    "MultiTaskNER",
    "Sentence",
    "SynthConfig",
    "TrainConfig",
    "evaluate",
    "generate_synthetic",
    "train",
]
