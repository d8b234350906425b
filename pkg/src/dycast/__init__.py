"""Temporal causal discovery with per-target dilated-convolution / sparse-attention networks."""

from .config import ConfigError, RunConfig, derive_seed
from .data import Dataset, DataError, SynthEdge, SynthSpec, generate_synthetic, load_csv
from .discovery import estimate_delay, select_candidates, shuffle_test
from .evaluation import EvalReport, evaluate_run, score_graph
from .graph import CausalGraph, Edge, export_graph
from .model import ModelParams, build_model, model_forward, predict
from .pipeline import run_pipeline, train_all
from .training import TrainReport, TrainingDiverged, train_target

__version__ = "0.1.0"

__all__ = [
    "CausalGraph",
    "ConfigError",
    "DataError",
    "Dataset",
    "Edge",
    "EvalReport",
    "ModelParams",
    "RunConfig",
    "SynthEdge",
    "SynthSpec",
    "TrainReport",
    "TrainingDiverged",
    "build_model",
    "derive_seed",
    "estimate_delay",
    "evaluate_run",
    "export_graph",
    "generate_synthetic",
    "load_csv",
    "model_forward",
    "predict",
    "run_pipeline",
    "score_graph",
    "select_candidates",
    "shuffle_test",
    "train_all",
    "train_target",
]
