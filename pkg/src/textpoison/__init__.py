"""Poisoned-text generation toolkit for contrastive image-text models.

The package builds adversarial caption sets in three stages: select the
captions whose non-class background already leans toward a target class,
rewrite them with a diversity-constrained decoder, then attach the
rewrites to attacked images and measure the damage on a small dual-encoder
victim trained from scratch.
"""

__version__ = "0.1.0"

from .attack import AttackSpec, PoisonBatch, PoisonRecord, merge_poison, run_attack
from .augmenter import AugmenterConfig, augment_text
from .corpus import (
    Corpus,
    ImageTextPair,
    load_corpus,
    save_corpus,
    split_corpus,
    synthesize_corpus,
)
from .decoder import BeamConfig, DecoderModel, diverse_beam_search, train_reference_decoder
from .embedding import (
    ClassCentroid,
    PromptTemplateSet,
    ReferenceBackend,
    RemoteBackend,
    class_centroid,
    cosine_sim,
)
from .errors import ConfigError, DataError, TextPoisonError
from .metrics import EvalReport, attack_success_rate, distinct_ngrams, hit_at_k, perplexity
from .selector import BackgroundSplit, SelectorConfig, rank_target_texts, select_best_background
from .victim import TrainConfig, VictimModel, train_victim

__all__ = [
    "AttackSpec",
    "AugmenterConfig",
    "BackgroundSplit",
    "BeamConfig",
    "ClassCentroid",
    "ConfigError",
    "Corpus",
    "DataError",
    "DecoderModel",
    "EvalReport",
    "ImageTextPair",
    "PoisonBatch",
    "PoisonRecord",
    "PromptTemplateSet",
    "ReferenceBackend",
    "RemoteBackend",
    "SelectorConfig",
    "TextPoisonError",
    "TrainConfig",
    "VictimModel",
    "attack_success_rate",
    "augment_text",
    "class_centroid",
    "cosine_sim",
    "distinct_ngrams",
    "diverse_beam_search",
    "hit_at_k",
    "load_corpus",
    "merge_poison",
    "perplexity",
    "rank_target_texts",
    "run_attack",
    "save_corpus",
    "select_best_background",
    "split_corpus",
    "synthesize_corpus",
    "train_reference_decoder",
    "train_victim",
]
