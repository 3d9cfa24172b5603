"""Desk-scale laboratory for watermarking vector-quantized autoregressive
image generation: deterministic toy tokenizers, four in-generation marking
schemes, the removal/forgery attack suite, and an evaluation harness.

The package is organized bottom-up:

- core:    hashing/PRNG primitives, green-set machinery, bilinear resize
- stats:   exact binomial tests, z-scores, TPR@FPR, PSNR/SSIM
- toyvae:  seeded invertible toy encoders/decoders and codebooks
- schemes: token-level marking (logit bias, cluster bias, pair substitution)
- bitmark: bitwise multi-scale marking on residual pyramids
- attacks: regeneration, latent/bit optimization, spectral injection,
           averaging, classical perturbations
- imageio: PNG/PPM/token-map persistence
- harness: experiment configs, toy worlds, CLI command implementations
"""

from .core import (Codebook, DetectionReport, WatermarkKey, bilinear_resize,
                   bilinear_resize_adjoint, context_hash, green_set, mix64)
from .stats import binom_p_right, psnr, ssim, tpr_at_fpr, zscore
from .toyvae import (EncoderProfile, box_setting, build_codebook, decode,
                     encode, encode_pullback, lookup, quantize)
from .schemes import (ClusterAssignment, TokenPairing, ToyARModel,
                      build_pairing, cluster_codebook, detect_clustermark,
                      detect_indexmark, detect_kgw, embed_clustermark,
                      embed_indexmark, embed_kgw, sample_tokens)
from .bitmark import (ALTERNATING_GREEN, GreenNGramSet, ScaleSchedule,
                      ToyBitModel, detect_bitmark, residual_decompose,
                      sample_bitmark)
from .attacks import (AttackResult, FreqInjectConfig, OptBudget,
                      average_corpus, bitopt_removal, freq_inject,
                      latentopt_forgery, latentopt_removal, perturb, vq_regen)
from .harness import ExperimentConfig, build_world, default_config

__version__ = "0.1.0"

__all__ = [
    "Codebook", "DetectionReport", "WatermarkKey", "bilinear_resize",
    "bilinear_resize_adjoint", "context_hash", "green_set", "mix64",
    "binom_p_right", "psnr", "ssim", "tpr_at_fpr", "zscore",
    "EncoderProfile", "box_setting", "build_codebook", "decode", "encode",
    "encode_pullback", "lookup", "quantize",
    "ClusterAssignment", "TokenPairing", "ToyARModel", "build_pairing",
    "cluster_codebook", "detect_clustermark", "detect_indexmark",
    "detect_kgw", "embed_clustermark", "embed_indexmark", "embed_kgw",
    "sample_tokens",
    "ALTERNATING_GREEN", "GreenNGramSet", "ScaleSchedule", "ToyBitModel",
    "detect_bitmark", "residual_decompose", "sample_bitmark",
    "AttackResult", "FreqInjectConfig", "OptBudget", "average_corpus",
    "bitopt_removal", "freq_inject", "latentopt_forgery", "latentopt_removal",
    "perturb", "vq_regen",
    "ExperimentConfig", "build_world", "default_config",
    "__version__",
]
