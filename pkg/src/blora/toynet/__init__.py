"""Desk-scale block-structured attention network for B-LoRA experiments."""

from .data import SyntheticSample, center_crop, compose, make_sample, noise_latent
from .model import (
    ABLATION_SCHEMES,
    PromptRouting,
    ToyConfig,
    ToyModel,
    ablation_routing,
    attention,
    concept_vector,
    encode_prompt,
    forward,
)
from .train import GradCheckReport, TrainResult, TrainSpec, grad_check, pair_grid, train_blora

__all__ = [
    "ABLATION_SCHEMES", "GradCheckReport", "PromptRouting", "SyntheticSample", "ToyConfig", "ToyModel",
    "TrainResult", "TrainSpec", "ablation_routing", "attention", "center_crop", "compose",
    "concept_vector", "encode_prompt", "forward", "grad_check", "make_sample", "noise_latent",
    "pair_grid", "train_blora",
]
