"""Masked discrete diffusion for visual question answering, at desk scale."""
from .core import (
    DialogueInstance, MaskedSequence, SamplerConfig, StageConfig, TokenSequence, Vocab, desk_preset, detokenize,
    large_stage, tokenize,
)
from .predictor import MaskPredictor, ModelDims, init_params
from .sampler import generate

__version__ = "0.1.0"
