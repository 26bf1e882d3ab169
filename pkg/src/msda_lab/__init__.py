"""Multimodal multi-source domain adaptation with co-training, on numpy."""
from .config import LossWeights, RunConfig, parse_config
from .datagen import BenchmarkSpec, SubjectDataset, generate_benchmark, read_dataset, write_dataset
from .errors import DomainError, ParseError, PreconditionError
from .pipeline import (ModelBundle, RunMetrics, TargetSplit, ablate, adapt_stage, evaluate, export_embeddings,
                       run_baseline, train_source_stage)

__all__ = ["BenchmarkSpec", "DomainError", "LossWeights", "ModelBundle", "ParseError", "PreconditionError",
           "RunConfig", "RunMetrics", "SubjectDataset", "TargetSplit", "ablate", "adapt_stage", "evaluate",
           "export_embeddings", "generate_benchmark", "parse_config", "read_dataset", "run_baseline",
           "train_source_stage", "write_dataset"]
__version__ = "0.1.0"
