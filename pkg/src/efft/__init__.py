"""Factorized parameter-efficient fine-tuning on a toy Vision Transformer.

The package bundles a numpy tensor layer with compiled kernels, a tape-based
autodiff engine, the EFFT1/EFFT2/LoRA/FacT-TT delta parameterizations, a small
pre-norm ViT, an AdamW trainer with sweep and ablation harnesses, subspace
similarity analysis and a command-line interface.
"""
from ._kernels import BACKEND
from .errors import ConfigError, ContractError, EfftError, FormatError, NumericError, ShapeError
from .factors import (Efft1Factors, Efft2Factors, FactTtFactors, LoraFactors, Role, apply_delta,
                      count_params, delta_for, init_efft1, init_efft2, init_fact_tt, init_factors,
                      init_lora, init_lora_model, materialize, param_count_for)
from .tensor import Rng, randn, svd
from .vit import TuningMask, ViTConfig, ViTModel, build_vit, forward

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "ContractError", "EfftError", "FormatError", "NumericError",
    "ShapeError", "Efft1Factors", "Efft2Factors", "FactTtFactors", "LoraFactors", "Role",
    "apply_delta", "count_params", "delta_for", "init_efft1", "init_efft2", "init_fact_tt",
    "init_factors", "init_lora", "init_lora_model", "materialize", "param_count_for", "Rng",
    "randn", "svd", "TuningMask", "ViTConfig", "ViTModel", "build_vit", "forward",
]
