"""Multi-layer NER tagger that shares recognised entities across sentences through a candidate pool."""

from .config import ModelConfig, read_config
from .ingest import Sentence, TagSet, Vocab, read_conll
from .memory import CandidatePool, EntitySpan, extract_spans
from .model import NEReasoner, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CandidatePool",
    "EntitySpan",
    "ModelConfig",
    "NEReasoner",
    "Sentence",
    "TagSet",
    "Vocab",
    "extract_spans",
    "load_checkpoint",
    "read_conll",
    "read_config",
    "save_checkpoint",
    "train",
]
