"""Slot-template conversational recommender.

A transformer encoder-decoder writes response templates with item slots, a
stacked-attention selector fills the slots from a knowledge-graph
recommender's candidates, and the two are trained jointly. The package also
ships the gated switching baseline, the evaluation metric suite, a training
CLI, and an HTTP chat service.
"""

from .corpus import (Conversation, CorpusSplit, MaskedExample, SynthSpec,
                     Turn, Vocabulary, holdout_split, ingest_redial,
                     make_examples, mask_items, split_corpus, synth_corpus)
from .kg import CandidateSet, EntityLinker, KnowledgeGraph, Recommender
from .metrics import GeneratedRecord, MetricsReport, report
from .model import DESK_DIMS, ModelDims, NtrdModel
from .switching import SwitchingModel, mix
from .tensor import Tape, Tensor, backward
from .training import TrainConfig, build_bundle, train

__all__ = [
    "Conversation", "CorpusSplit", "MaskedExample", "SynthSpec", "Turn",
    "Vocabulary", "holdout_split", "ingest_redial", "make_examples",
    "mask_items", "split_corpus", "synth_corpus", "CandidateSet",
    "EntityLinker", "KnowledgeGraph", "Recommender", "GeneratedRecord",
    "MetricsReport", "report", "DESK_DIMS", "ModelDims", "NtrdModel",
    "SwitchingModel", "mix", "Tape", "Tensor", "backward", "TrainConfig",
    "build_bundle", "train",
]

__version__ = "0.1.0"
