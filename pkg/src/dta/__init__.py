"""Deconfounding temporal autoencoder toolkit.

Learns a hidden embedding from noisy proxies of time-varying confounders
and plugs it into downstream treatment-effect outcome models.
"""

from .model import (
    DtaHyperparams,
    DtaModel,
    KlStats,
    LossBreakdown,
    LossWeights,
    causal_penalty,
    embed_dataset,
    encode,
    decode,
    gaussian_kl,
    load_model,
    potential_outcomes,
    save_model,
    train,
)
from .simgen import (
    SimConfig,
    SimParams,
    TrajectoryDataset,
    draw_sim_params,
    simulate,
    simulate_counterfactuals,
)

__version__ = "0.1.0"
