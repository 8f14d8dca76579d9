"""Shared fixtures: small synthetic problems and fitted states."""

import numpy as np
import pytest

from ccgpfa.data import simulate
from ccgpfa.inference import cavi_sweep
from ccgpfa.model import CountStats, ModelConfig, init_state


def small_problem(seed=0, n_neurons=6, n_bins=20, n_latents=2, n_trials=3, observation="negbin",
                  n_inducing=0, sweeps=0):
    data, truth = simulate(n_neurons, n_bins, n_latents, n_trials, [4.0, 7.0, 5.0][:n_latents],
                           observation=observation, seed=seed)
    cfg = ModelConfig(n_latents=n_latents, observation=observation, lengthscales=(5.0,),
                      n_inducing=n_inducing)
    stats = CountStats.from_data(data, cfg)
    state = init_state(cfg, stats, seed=seed)
    for _ in range(sweeps):
        state = cavi_sweep(state, stats)
    return data, truth, stats, state


@pytest.fixture
def problem():
    return small_problem(seed=1, sweeps=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
