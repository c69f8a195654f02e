"""Multi-task mixture-of-experts model for MRI-based dementia staging."""

from m3ad._core import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    Model,
    NumericError,
    c_fusion_dim,
    cosine_attention,
    effective_tau,
    gate_probabilities,
    gen_synthetic,
    gradcheck,
    metrics,
    read_m3t,
    recon_loss,
    run_cli,
    sample_mask,
    softmax,
    write_m3t,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "FormatError",
    "Model",
    "NumericError",
    "c_fusion_dim",
    "cosine_attention",
    "effective_tau",
    "gate_probabilities",
    "gen_synthetic",
    "gradcheck",
    "metrics",
    "read_m3t",
    "recon_loss",
    "run_cli",
    "sample_mask",
    "softmax",
    "write_m3t",
]
