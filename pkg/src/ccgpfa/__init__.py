"""Conditionally-conjugate Gaussian process factor analysis for spike counts.

Negative-binomial and binomial GPFA made conditionally conjugate by
Polya-gamma, Polya-inverse-gamma and gamma augmentation, fitted with
closed-form variational EM (dense or inducing-point latents, optional
natural-gradient minibatching).
"""

from ccgpfa.data import SpikeData, GenerativeTruth, load_spikes, save_spikes, simulate, split_trials
from ccgpfa.model import ModelConfig, VariationalState, init_state, f_moments, kappa
from ccgpfa.inference import FitOptions, FitReport, fit, compute_elbo
from ccgpfa.evaluate import EvalReport, evaluate, orthonormalize, predicted_rates

__version__ = "0.1.0"

__all__ = [
    "SpikeData",
    "GenerativeTruth",
    "load_spikes",
    "save_spikes",
    "simulate",
    "split_trials",
    "ModelConfig",
    "VariationalState",
    "init_state",
    "f_moments",
    "kappa",
    "FitOptions",
    "FitReport",
    "fit",
    "compute_elbo",
    "EvalReport",
    "evaluate",
    "orthonormalize",
    "predicted_rates",
]
