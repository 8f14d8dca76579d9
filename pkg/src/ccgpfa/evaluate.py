"""Held-out evaluation, orthonormalised latents and rate predictions."""

import csv
import os
from dataclasses import dataclass

import numpy as np

from ccgpfa.augdist import binomial_logpmf, negbin_logpmf
from ccgpfa.model import f_moments

_POISSON_LIKE_R = 1e6


@dataclass
class EvalReport:
    """Predictive negative log-likelihood on held-out trials.

    ``nll_grid`` is the per-(neuron, bin) NLL averaged over trials;
    ``nll_mean`` and ``nll_sem`` are its mean and standard error across
    (neuron, bin) cells; ``aggregate`` is the total NLL divided by the total
    number of bins. The ``baseline_*`` fields repeat this for a per-neuron
    constant-rate model fitted by moment matching.
    """

    nll_grid: np.ndarray
    nll_mean: float
    nll_sem: float
    aggregate: float
    per_neuron: np.ndarray
    baseline_grid: np.ndarray
    baseline_mean: float
    baseline_sem: float
    baseline_aggregate: float
    baseline_per_neuron: np.ndarray
    n_bins_total: int

    def summary(self):
        return {"nll_mean": self.nll_mean, "nll_sem": self.nll_sem, "aggregate": self.aggregate,
                "baseline_mean": self.baseline_mean, "baseline_sem": self.baseline_sem,
                "baseline_aggregate": self.baseline_aggregate,
                "neurons_beating_baseline": int(np.sum(self.per_neuron < self.baseline_per_neuron)),
                "n_neurons": int(self.per_neuron.size), "n_bins_total": self.n_bins_total}


def _summarise(nll):
    grid = nll.mean(axis=0)
    sem = float(grid.std(ddof=1) / np.sqrt(grid.size)) if grid.size > 1 else 0.0
    return grid, float(grid.mean()), sem, float(nll.sum() / nll.size), nll.mean(axis=(0, 2))


def moment_matched_baseline(counts, observation="negbin", total_count=None):
    """Per-neuron constant predictor: ``(f, r)`` for NegBin or ``(f, k)`` for binomial.

    NegBin uses ``r = mean^2 / (var - mean)`` and ``f = log(mean / r)``;
    under-dispersed neurons get a near-Poisson ``r``.
    """
    counts = np.asarray(counts, dtype=float)
    per = counts.transpose(1, 0, 2).reshape(counts.shape[1], -1)
    floor = 0.5 / per.shape[1]
    mean = np.maximum(per.mean(axis=1), floor)
    if observation == "binomial":
        k = np.asarray(total_count, dtype=float)
        p = np.clip(mean / k, floor / k, 1.0 - floor / k)
        return np.log(p) - np.log1p(-p), k
    var = per.var(axis=1, ddof=1) if per.shape[1] > 1 else mean
    excess = var - mean
    r = np.where(excess > 1e-12 * mean, mean ** 2 / np.maximum(excess, 1e-300), _POISSON_LIKE_R)
    r = np.minimum(r, _POISSON_LIKE_R)
    return np.log(mean / r), r


def _logpmf(observation, y, param, f):
    if observation == "binomial":
        return binomial_logpmf(y, param, f)
    return negbin_logpmf(y, param, f)


def evaluate(state, test, baseline_data=None):
    """Plug-in predictive NLL of ``test`` under ``E[f]`` and ``E[r]`` (or ``k``).

    The baseline is fitted on ``baseline_data`` (typically the training
    trials) or on ``test`` itself when omitted.
    """
    counts = np.asarray(test.counts if hasattr(test, "counts") else test)
    if counts.shape[1:] != (state.n_neurons, state.n_bins):
        raise ValueError(f"test data shape {counts.shape[1:]} does not match the model "
                         f"({state.n_neurons}, {state.n_bins})")
    Ef, _ = f_moments(state)
    obs = state.config.observation
    param = state.total_count if obs == "binomial" else state.dispersion.mean
    nll = -np.asarray(_logpmf(obs, counts, param[None, :, None], Ef[None]))
    grid, mean, sem, agg, per_neuron = _summarise(nll)

    ref = counts if baseline_data is None else np.asarray(getattr(baseline_data, "counts", baseline_data))
    fb, pb = moment_matched_baseline(ref, obs, state.total_count)
    base = -np.asarray(_logpmf(obs, counts, pb[None, :, None], np.broadcast_to(fb[None, :, None], counts.shape)))
    bgrid, bmean, bsem, bagg, bper = _summarise(base)
    return EvalReport(grid, mean, sem, agg, per_neuron, bgrid, bmean, bsem, bagg, bper, int(nll.size))


def predicted_rates(state):
    """Mean count per bin: ``E[r] exp(E[f])`` (NegBin) or ``k sigmoid(E[f])`` (binomial)."""
    Ef, _ = f_moments(state)
    if state.config.observation == "binomial":
        return state.total_count[:, None] / (1.0 + np.exp(-Ef))
    return state.dispersion.mean[:, None] * np.exp(Ef)


def orthonormalize(weights, latents):
    """Resolve the rotation ambiguity of ``W X`` by SVD.

    With ``W X = U S V^T`` (thin, rank ``D``) returns ``(U, S V^T, s)``:
    orthonormal loadings, mutually orthogonal latent rows ordered by singular
    value, and the singular values. Signs are fixed so that the entry of
    largest magnitude in each loading column is positive.
    """
    W = np.asarray(weights, dtype=float)
    X = np.asarray(latents, dtype=float)
    D = W.shape[1]
    U, s, Vt = np.linalg.svd(W @ X, full_matrices=False)
    U, s, Vt = U[:, :D], s[:D], Vt[:D]
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    Vt = Vt * signs[:, None]
    return U, s[:, None] * Vt, s


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def export_tables(state, outdir):
    """Write plot-ready CSV tables; returns the list of paths written."""
    os.makedirs(outdir, exist_ok=True)
    U, Xo, s = orthonormalize(state.weights.mean, state.latents.mean)
    D, T = Xo.shape
    paths = []
    p = os.path.join(outdir, "latents_orthonormal.csv")
    _write_table(p, ["bin"] + [f"latent_{d}" for d in range(D)],
                 [[int(state.grid[t])] + Xo[:, t].tolist() for t in range(T)])
    paths.append(p)
    p = os.path.join(outdir, "loadings.csv")
    _write_table(p, ["neuron"] + [f"latent_{d}" for d in range(D)],
                 [[n] + U[n].tolist() for n in range(U.shape[0])])
    paths.append(p)
    p = os.path.join(outdir, "singular_values.csv")
    _write_table(p, ["component", "singular_value"], [[d, float(v)] for d, v in enumerate(s)])
    paths.append(p)
    p = os.path.join(outdir, "ard_relevance.csv")
    tau = state.precisions.ard_mean
    _write_table(p, ["latent", "expected_precision", "lengthscale"],
                 [[d, float(tau[d]), float(state.lengthscales[d])] for d in range(tau.size)])
    paths.append(p)
    rates = predicted_rates(state)
    p = os.path.join(outdir, "rates.csv")
    _write_table(p, ["bin"] + [f"neuron_{n}" for n in range(rates.shape[0])],
                 [[int(state.grid[t])] + rates[:, t].tolist() for t in range(rates.shape[1])])
    paths.append(p)
    if state.dispersion is not None:
        p = os.path.join(outdir, "dispersion.csv")
        _write_table(p, ["neuron", "mean", "second_moment"],
                     [[n, float(m), float(v)] for n, (m, v) in
                      enumerate(zip(state.dispersion.mean, state.dispersion.second_moment))])
        paths.append(p)
    return paths
