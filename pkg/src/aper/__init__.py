"""Prototype-based class-incremental learning on frozen pre-trained backbones.

SimpleCIL classifies with class-mean prototypes of a frozen embedding; APER
first adapts a copy of the backbone on the first task, then builds prototypes
on the concatenation of adapted and pre-trained embeddings.
"""
from .backbone import IdentityBackbone, ToyCNN, ToyViT, build_backbone, embed
from .config import ExperimentConfig, load_config
from .evaluation import MetricsRecord, evaluate_stage, summarize
from .exceptions import (ConfigurationError, CorruptFileError, DataError, DegenerateVectorError,
                         MissingClassError, ProtocolError, ShapeError)
from .learner import AperClassifier, LearnerConfig, SequentialFinetuneClassifier, run, run_multistage
from .peft import PEFTConfig, adapt
from .projection import FeatureProjector
from .prototypes import CosinePrototypeClassifier, MergedEmbedder, PrototypeBank
from .stream import AffineShift, ExampleSet, StreamConfig, SyntheticSpec, build_stream, make_synthetic

__version__ = "0.1.0"

__all__ = [
    "AffineShift", "AperClassifier", "ConfigurationError", "CorruptFileError",
    "CosinePrototypeClassifier", "DataError", "DegenerateVectorError", "ExampleSet",
    "ExperimentConfig", "FeatureProjector", "IdentityBackbone", "LearnerConfig", "MergedEmbedder",
    "MetricsRecord", "MissingClassError", "PEFTConfig", "PrototypeBank", "ProtocolError",
    "SequentialFinetuneClassifier", "ShapeError", "StreamConfig", "SyntheticSpec", "ToyCNN",
    "ToyViT", "adapt", "build_backbone", "build_stream", "embed", "evaluate_stage", "load_config",
    "make_synthetic", "run", "run_multistage", "summarize",
]
