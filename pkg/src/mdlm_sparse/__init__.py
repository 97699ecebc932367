"""Saliency-aware sparse decoding for a toy masked-diffusion transformer."""

from .cache import CacheSet, LayerCache, SaliencyIndex, gather_rows, scatter_rows
from .engine import (
    EngineConfig,
    GenerationResult,
    StepInput,
    StepOutput,
    approximate_attention,
    exact_attention_rows,
    full_step,
    generate,
    select_salient,
    sparse_step,
)
from .estimator import SparseDiffusionDecoder
from .metrics import RunReport, StepMetrics
from .model import ModelConfig, ModelWeights, init_weights, load_weights, save_weights
from .sampler import DecodeState, SamplerConfig

__version__ = "0.1.0"

__all__ = [
    "CacheSet",
    "DecodeState",
    "EngineConfig",
    "GenerationResult",
    "LayerCache",
    "ModelConfig",
    "ModelWeights",
    "RunReport",
    "SaliencyIndex",
    "SamplerConfig",
    "SparseDiffusionDecoder",
    "StepInput",
    "StepMetrics",
    "StepOutput",
    "approximate_attention",
    "exact_attention_rows",
    "full_step",
    "gather_rows",
    "generate",
    "init_weights",
    "load_weights",
    "save_weights",
    "scatter_rows",
    "select_salient",
    "sparse_step",
]
