"""Melody-conditioned Chinese lyrics generation with syllable-structure tokens."""

from .corpus import (
    TrainingPair,
    Vocab,
    build_vocab,
    bundled_corpus_path,
    corpus_pairs,
    extract_keyword_pairs,
    extract_pairs,
    generate_synthetic_corpus,
    read_corpus,
    textrank_keywords,
)
from .decoding import GenerationRequest, beam_search, compose_lyrics, greedy_decode
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    LyricGenError,
    ParseError,
    TrainingDivergenceError,
)
from .evaluation import EvalReport, bleu_bigram, evaluate
from .melody import (
    MelodyScore,
    boundaries_from_tokens,
    derive_segments,
    parse_melody,
    tokens_from_segments,
)
from .model import BaselineSeq2Seq, ModelConfig, MultiChannelSeq2Seq, build_model
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "BaselineSeq2Seq", "CheckpointError", "ConfigError", "ContractError",
    "DimensionError", "EvalReport", "GenerationRequest", "LyricGenError", "MelodyScore",
    "ModelConfig", "MultiChannelSeq2Seq", "ParseError", "TrainConfig", "TrainingDivergenceError",
    "TrainingPair", "Vocab", "beam_search", "bleu_bigram", "boundaries_from_tokens",
    "build_model", "build_vocab", "bundled_corpus_path", "compose_lyrics", "corpus_pairs", "derive_segments", "evaluate",
    "extract_keyword_pairs", "extract_pairs", "generate_synthetic_corpus", "greedy_decode",
    "load_checkpoint", "parse_melody", "read_corpus", "save_checkpoint", "textrank_keywords",
    "tokens_from_segments", "train",
]
