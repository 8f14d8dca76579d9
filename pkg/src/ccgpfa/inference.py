"""Closed-form CAVI updates, the ELBO, natural-gradient steps and the EM loop.

The bound optimised here is the mean-field ELBO in which the Polya-gamma
factor is represented by its tilt ``c``: for each neuron and bin

    kappa E[f] - 1/2 E[omega] (E[f^2] - c^2) - b log(2 cosh(c / 2)),

with ``b`` the PG shape and ``E[omega] = b tanh(c/2) / (2c)``. For the
negative-binomial model the gamma factors ``tau`` bound ``log Gamma(y + r)``
and the P-IG factors bound ``-log Gamma(r)``; every term is available in
closed form or by one-dimensional quadrature, so the ELBO is exact up to the
constant of the improper dispersion prior. Each update below is an exact
coordinate maximiser of this bound (the dispersion update under
``dispersion_rule="exact"`` while clipping is inactive).
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from ccgpfa.augdist import log_2cosh_half, pg_mean, ptn_stats
from ccgpfa.gp import (ConditioningError, GaussianDensity, cholesky, gauss_kl, kernel_matrix,
                       optimize_lengthscale)
from ccgpfa.model import (BiasPosterior, CountStats, DispersionPosterior, LatentPosterior,
                          PrecisionPosterior, WeightPosterior, _stack_ptn, as_stats, f_moments,
                          latent_marginals_from_inducing, project_inducing, refresh_augmented,
                          update_augmented)
from ccgpfa.specfun import EULER_GAMMA, NumericalError

MODES = ("dense", "sparse", "sparse_natgrad")
LOG2 = math.log(2.0)

__all__ = [
    "FitOptions", "FitReport", "FitError", "NaturalParams", "update_weights", "update_bias",
    "update_precisions", "update_latents_dense", "update_inducing", "update_augmented",
    "update_dispersion", "natgrad_step", "compute_elbo", "elbo_terms", "cavi_sweep",
    "stochastic_sweep", "m_step", "fit",
]


class FitError(RuntimeError):
    """Numerical failure during fitting; carries the last good state and the report."""

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass(frozen=True)
class FitOptions:
    max_em_iters: int = 100
    e_step_sweeps: int = 50
    m_step_iters: int = 20
    elbo_rel_tol: float = 1e-6
    mode: str = "dense"
    seed: int = 0
    learn_lengthscales: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if min(self.max_em_iters, self.e_step_sweeps) < 1:
            raise ValueError("max_em_iters and e_step_sweeps must be at least 1")
        if self.m_step_iters < 0:
            raise ValueError("m_step_iters must be non-negative")
        if not self.elbo_rel_tol > 0:
            raise ValueError("elbo_rel_tol must be positive")


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    em_elbo: list = field(default_factory=list)
    lengthscale_trace: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    sweeps_per_iter: list = field(default_factory=list)
    converged: bool = False
    n_iters: int = 0

    def lines(self):
        """One text record per EM iteration: iter, elbo, lengthscales, wall time."""
        out = []
        for i, (elbo, ls, t) in enumerate(zip(self.em_elbo, self.lengthscale_trace, self.wall_time)):
            theta = " ".join(f"{v:.6g}" for v in ls)
            out.append(f"iter={i} elbo={elbo:.10g} theta=[{theta}] time={t:.3f}")
        return out

    def to_dict(self):
        return {"elbo_trace": list(map(float, self.elbo_trace)),
                "em_elbo": list(map(float, self.em_elbo)),
                "lengthscale_trace": [list(map(float, v)) for v in self.lengthscale_trace],
                "wall_time": list(map(float, self.wall_time)),
                "sweeps_per_iter": list(self.sweeps_per_iter),
                "converged": bool(self.converged), "n_iters": int(self.n_iters)}


@dataclass
class NaturalParams:
    """``eta1 = Sigma^-1 mu`` and ``eta2 = -1/2 Sigma^-1`` of a batch of Gaussians."""

    eta1: np.ndarray
    eta2: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov):
        cov = np.asarray(cov, dtype=float)
        prec = np.linalg.inv(cov)
        prec = 0.5 * (prec + np.swapaxes(prec, -1, -2))
        return cls(np.einsum("...ij,...j->...i", prec, mean), -0.5 * prec)

    @classmethod
    def from_precision(cls, prec, eta1):
        return cls(np.asarray(eta1, dtype=float), -0.5 * np.asarray(prec, dtype=float))

    def interpolate(self, other, rho):
        return NaturalParams((1.0 - rho) * self.eta1 + rho * other.eta1,
                             (1.0 - rho) * self.eta2 + rho * other.eta2)

    def is_valid(self):
        try:
            np.linalg.cholesky(-2.0 * self.eta2)
        except np.linalg.LinAlgError:
            return False
        return True

    def to_moments(self):
        prec = -2.0 * self.eta2
        L = np.linalg.cholesky(prec)
        eye = np.broadcast_to(np.eye(prec.shape[-1]), prec.shape)
        Linv = np.linalg.solve(L, eye)
        cov = np.swapaxes(Linv, -1, -2) @ Linv
        return np.einsum("...ij,...j->...i", cov, self.eta1), cov


def _sel(bins):
    return slice(None) if bins is None else np.asarray(bins)


def _scale(state, bins):
    return 1.0 if bins is None else state.n_bins / len(bins)


# Natural parameters of the CAVI targets. ``bins`` restricts the data sums to
# a minibatch and ``scale`` multiplies them, so the full-batch unit-scale call
# is the exact coordinate update.

def weight_natural(state, bins=None):
    s = _sel(bins)
    scale = _scale(state, bins)
    om = state.augmented.omega_mean[:, s]
    ka = state.augmented.kappa[:, s]
    mu = state.latents.mean[:, s]
    var = state.latents.var[:, s]
    prec = scale * (np.einsum("nt,dt,kt->ndk", om, mu, mu, optimize=True))
    diag = scale * (om @ var.T)
    idx = np.arange(state.n_latents)
    prec[:, idx, idx] += diag + state.precisions.ard_mean[None, :]
    eta1 = scale * ((ka - om * state.bias.mean[:, None]) @ mu.T)
    return NaturalParams.from_precision(prec, eta1)


def bias_natural(state, bins=None):
    s = _sel(bins)
    scale = _scale(state, bins)
    om = state.augmented.omega_mean[:, s]
    ka = state.augmented.kappa[:, s]
    lin = state.weights.mean @ state.latents.mean[:, s]
    prec = state.precisions.bias_mean + scale * om.sum(axis=1)
    eta1 = scale * (ka.sum(axis=1) - np.sum(om * lin, axis=1))
    return NaturalParams(eta1, -0.5 * prec)


def _latent_site(state, d, bins=None):
    """Gaussian site of latent ``d``: precision diagonal ``g`` and linear term ``h``.

    The cross-latent term uses ``E[w_d w_d']`` including the weight
    covariance, which makes the latent update an exact coordinate maximiser.
    """
    s = _sel(bins)
    om = state.augmented.omega_mean[:, s]
    ka = state.augmented.kappa[:, s]
    Eww = state.weights.second_moment()
    m = state.weights.mean
    mu = state.latents.mean[:, s]
    g = Eww[:, d, d] @ om
    cross = Eww[:, d, :].copy()
    cross[:, d] = 0.0
    other = cross @ mu + (m[:, d] * state.bias.mean)[:, None]
    h = m[:, d] @ ka - np.sum(om * other, axis=0)
    return g, h


def update_weights(state, data=None):
    """CAVI update of every ``q(w_n) = N(m_n, S_n)``."""
    nat = weight_natural(state)
    mean, cov = _solve_batch(-2.0 * nat.eta2, nat.eta1)
    return WeightPosterior(mean, cov)


def _solve_batch(prec, eta1):
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("weight precision is not positive definite") from exc
    eye = np.broadcast_to(np.eye(prec.shape[-1]), prec.shape)
    Linv = np.linalg.solve(L, eye)
    cov = np.swapaxes(Linv, -1, -2) @ Linv
    return np.einsum("nij,nj->ni", cov, eta1), cov


def update_bias(state, data=None):
    nat = bias_natural(state)
    var = 1.0 / (-2.0 * nat.eta2)
    return BiasPosterior(var * nat.eta1, var)


def update_precisions(state, data=None):
    cfg = state.config
    N = state.n_neurons
    ard_rate = cfg.ard_rate + 0.5 * state.weights.square_mean().sum(axis=0)
    bias_rate = cfg.bias_rate + 0.5 * float(np.sum(state.bias.mean ** 2 + state.bias.var))
    return PrecisionPosterior(np.full(state.n_latents, cfg.ard_shape + 0.5 * N), ard_rate,
                              cfg.bias_shape + 0.5 * N, bias_rate)


def _dense_posterior(K, g, h):
    """``(K^-1 + diag(g))^-1`` and its product with ``h`` for ``g >= 0``."""
    sg = np.sqrt(np.maximum(g, 0.0))
    B = np.eye(K.shape[0]) + sg[:, None] * K * sg[None, :]
    L = cholesky(B)
    V = linalg.solve_triangular(L, sg[:, None] * K, lower=True)
    cov = K - V.T @ V
    cov = 0.5 * (cov + cov.T)
    return cov @ h, cov


def update_latents_dense(state, data=None):
    """Sequential CAVI update of each dense ``q(X_d)``, using the freshest means."""
    D = state.n_latents
    lat = state.latents
    mean = lat.mean.copy()
    var = lat.var.copy()
    cov = lat.cov.copy()
    work = _with_latents(state, mean, var)
    for d in range(D):
        K = kernel_matrix(state.config.kernel(state.lengthscales[d]), state.grid)
        g, h = _latent_site(work, d)
        mean[d], cov[d] = _dense_posterior(K, g, h)
        var[d] = np.diag(cov[d])
    return LatentPosterior(mean=mean, var=var, cov=cov)


def _with_latents(state, mean, var):
    """Shallow view of ``state`` whose latent marginals are the given arrays."""
    return replace(state, latents=LatentPosterior(mean=mean, var=var))


def _inducing_blocks(state, d):
    spec = state.config.kernel(state.lengthscales[d])
    z = state.latents.inducing_grid
    Kmm = kernel_matrix(spec, z)
    Ktm = kernel_matrix(spec, state.grid, z)
    return Kmm, Ktm


def update_inducing(state, data=None):
    """Sequential CAVI update of each ``q(U_d) = N(m_d, S_d)``.

    ``S_d = K_mm (K_mm + K_mt G K_tm)^-1 K_mm`` and
    ``m_d = K_mm (K_mm + K_mt G K_tm)^-1 K_mt h``, algebraically equal to the
    precision form but free of ``K_mm^-1``.
    """
    lat = state.latents
    new = LatentPosterior(mean=lat.mean.copy(), var=lat.var.copy(),
                          inducing_mean=lat.inducing_mean.copy(),
                          inducing_cov=lat.inducing_cov.copy(),
                          projector=None if lat.projector is None else lat.projector.copy(),
                          inducing_grid=lat.inducing_grid)
    work = _with_latents(state, new.mean, new.var)
    for d in range(state.n_latents):
        Kmm, Ktm = _inducing_blocks(state, d)
        g, h = _latent_site(work, d)
        Sigma = Kmm + (Ktm.T * g[None, :]) @ Ktm
        L = cholesky(0.5 * (Sigma + Sigma.T))
        S = Kmm @ linalg.cho_solve((L, True), Kmm)
        S = 0.5 * (S + S.T)
        m = Kmm @ linalg.cho_solve((L, True), Ktm.T @ h)
        new.inducing_mean[d], new.inducing_cov[d] = m, S
        mu, var, A = project_inducing(state.config, state.grid, state.lengthscales[d],
                                      lat.inducing_grid, m, S)
        new.mean[d], new.var[d] = mu, var
        if new.projector is None:
            new.projector = np.zeros((state.n_latents,) + A.shape)
        new.projector[d] = A
    return new


def update_dispersion(state, data):
    """PTN update of every ``q(r_n)`` (negative-binomial model only).

    ``p = M T``, ``a = M T E[xi_n]`` and
    ``b = sum_{m,t} (E[log tau] + gamma) - M sum_t (clip(E[f]) / 2 + L_nt)``
    where ``L_nt = log(2 cosh(c/2)) + tanh(c/2)/(4c) (E[f^2] - c^2)`` under the
    exact rule and ``log 2`` under the literal rule.
    """
    if state.config.observation != "negbin":
        raise ValueError("dispersion factors exist only for the negative-binomial model")
    stats = as_stats(data, state)
    return _dispersion_from_sums(state, stats, None)


def _dispersion_from_sums(state, stats, bins):
    aug = state.augmented
    s = _sel(bins)
    scale = _scale(state, bins)
    M, T = stats.n_trials, state.n_bins
    Ef, Ef2 = f_moments(state)
    Ef, Ef2 = Ef[:, s], Ef2[:, s]
    clip = state.config.clip_threshold
    half_f = 0.5 * np.clip(Ef, -clip, clip)
    if state.config.dispersion_rule == "exact":
        c = aug.pg_tilt[:, s]
        lam = np.asarray(pg_mean(1.0, c)) / 2.0
        norm = np.asarray(log_2cosh_half(c)) + lam * (Ef2 - c * c)
    else:
        norm = np.full(Ef.shape, LOG2)
    power = np.full(state.n_neurons, float(M * T))
    quad = M * T * aug.xi_mean
    lin = scale * (aug.log_tau_sum[:, s].sum(axis=1) + M * Ef.shape[1] * EULER_GAMMA
                   - M * np.sum(half_f + norm, axis=1))
    return _dispersion_posterior(power, quad, lin)


def _dispersion_posterior(power, quad, lin):
    stats = []
    for n, (p, a, b) in enumerate(zip(power, quad, lin)):
        try:
            stats.append(ptn_stats(p, a, b))
        except (NumericalError, ValueError) as exc:
            raise NumericalError(f"dispersion quadrature failed for neuron {n}: {exc}") from exc
    return DispersionPosterior(np.asarray(power, float), np.asarray(quad, float),
                               np.asarray(lin, float), *_stack_ptn(stats))


def cavi_sweep(state, stats):
    """One full sweep: augmented, dispersion, weights, bias, precisions, latents."""
    state.augmented = update_augmented(state, stats)
    if state.config.observation == "negbin":
        state.dispersion = update_dispersion(state, stats)
        refresh_augmented(state, stats)
    state.weights = update_weights(state)
    state.bias = update_bias(state)
    state.precisions = update_precisions(state)
    if state.config.sparse:
        state.latents = update_inducing(state)
    else:
        state.latents = update_latents_dense(state)
    return state


def _natgrad_gaussian(old_mean, old_cov, target, rho):
    old = NaturalParams.from_moments(old_mean, old_cov)
    while rho > 1e-8:
        new = old.interpolate(target, rho)
        if new.is_valid():
            return new.to_moments(), rho
        rho *= 0.5
    return (old_mean, old_cov), 0.0


def inducing_natural(state, d, bins=None):
    """Natural parameters of the ``q(U_d)`` target with minibatch scaling."""
    s = _sel(bins)
    scale = _scale(state, bins)
    Kmm, Ktm = _inducing_blocks(state, d)
    L = cholesky(Kmm)
    Kinv = linalg.cho_solve((L, True), np.eye(Kmm.shape[0]))
    A = (Kinv @ Ktm.T).T[s]
    g, h = _latent_site(state, d, bins)
    prec = Kinv + scale * (A.T * g[None, :]) @ A
    return NaturalParams(scale * (A.T @ h), -0.5 * 0.5 * (prec + prec.T))


def natgrad_step(state, data=None, bins=None, rho=1.0):
    """Natural-gradient step on weights, biases and inducing factors.

    Targets use data sums over ``bins`` scaled by ``T / |bins|``; the new
    natural parameters are ``(1 - rho) eta + rho eta_new``. If an
    interpolated precision loses positive definiteness, ``rho`` is halved for
    that factor. Returns a new state; the input is not modified.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    new = state.copy()
    if rho == 0.0:
        return new
    target = weight_natural(new, bins)
    (mean, cov), _ = _natgrad_gaussian(new.weights.mean, new.weights.cov, target, rho)
    new.weights = WeightPosterior(mean, cov)

    target = bias_natural(new, bins)
    old_prec = 1.0 / new.bias.var
    prec = (1.0 - rho) * old_prec + rho * (-2.0 * target.eta2)
    eta1 = (1.0 - rho) * old_prec * new.bias.mean + rho * target.eta1
    new.bias = BiasPosterior(eta1 / prec, 1.0 / prec)

    if new.config.sparse:
        lat = new.latents
        for d in range(new.n_latents):
            target = inducing_natural(new, d, bins)
            (m, S), _ = _natgrad_gaussian(lat.inducing_mean[d], lat.inducing_cov[d], target, rho)
            lat.inducing_mean[d], lat.inducing_cov[d] = m, 0.5 * (S + S.T)
            lat.mean[d], lat.var[d], lat.projector[d] = project_inducing(
                new.config, new.grid, new.lengthscales[d], lat.inducing_grid, m, lat.inducing_cov[d])
    return new


def stochastic_sweep(state, stats, rng):
    """Minibatch sweep: local factors on a random bin subset, then natural-gradient steps."""
    T = state.n_bins
    B = state.config.batch_size or T
    bins = np.sort(rng.choice(T, size=B, replace=False)) if B < T else None
    rho = state.config.step_size
    state.augmented = update_augmented(state, stats, bins)
    if state.config.observation == "negbin":
        target = _dispersion_from_sums(state, stats, bins)
        d = state.dispersion
        quad = (1.0 - rho) * d.quad + rho * target.quad
        lin = (1.0 - rho) * d.lin + rho * target.lin
        state.dispersion = _dispersion_posterior(target.power, quad, lin)
        refresh_augmented(state, stats)
    state = natgrad_step(state, stats, bins, rho)
    state.precisions = update_precisions(state)
    return state


def _gamma_kl(shape, rate, shape0, rate0):
    """KL(Gamma(shape, rate) || Gamma(shape0, rate0))."""
    return ((shape - shape0) * special.digamma(shape) - special.gammaln(shape)
            + special.gammaln(shape0) + shape0 * (np.log(rate) - np.log(rate0))
            + shape * (rate0 - rate) / rate)


def elbo_terms(state, data):
    """Named ELBO contributions; :func:`compute_elbo` is their sum."""
    stats = as_stats(data, state)
    cfg = state.config
    aug = state.augmented
    Ef, Ef2 = f_moments(state)
    c = aug.pg_tilt
    if cfg.observation == "negbin":
        Er = state.dispersion.mean
        b = stats.ysum + stats.n_trials * Er[:, None]
        ka = 0.5 * (stats.ysum - stats.n_trials * Er[:, None])
    else:
        b = np.broadcast_to(stats.n_trials * state.total_count[:, None], Ef.shape)
        ka = stats.ysum - 0.5 * b
    om = np.asarray(pg_mean(b, c))
    terms = {"pg": float(np.sum(ka * Ef - 0.5 * om * (Ef2 - c * c) - b * log_2cosh_half(c))),
             "count_base": stats.log_base}

    if cfg.observation == "negbin":
        disp = state.dispersion
        M, T = stats.n_trials, state.n_bins
        terms["tau"] = float(np.sum(aug.lgamma_tau_sum
                                    + (disp.mean[:, None] - aug.tau_r) * aug.log_tau_sum))
        cx = aug.pig_tilt
        xi = aug.xi_mean
        terms["xi"] = float(M * T * np.sum(disp.log_mean + EULER_GAMMA * disp.mean
                                           - disp.second_moment * xi + cx * cx * xi
                                           - special.gammaln(cx + 1.0) - EULER_GAMMA * cx))
        entropy = (-(disp.power - 1.0) * disp.log_mean + disp.quad * disp.second_moment
                   - disp.lin * disp.mean + disp.log_norm)
        terms["dispersion"] = float(np.sum(-disp.log_mean + entropy))

    prec = state.precisions
    w = state.weights
    _, logdet = np.linalg.slogdet(w.cov)
    D = state.n_latents
    terms["kl_weights"] = -0.5 * float(np.sum(w.square_mean() @ prec.ard_mean - D
                                              - np.sum(prec.ard_log_mean) - logdet))
    bias = state.bias
    terms["kl_bias"] = -0.5 * float(np.sum(prec.bias_mean * (bias.mean ** 2 + bias.var) - 1.0
                                           - prec.bias_log_mean - np.log(bias.var)))
    terms["kl_ard"] = -float(np.sum(_gamma_kl(prec.ard_shape, prec.ard_rate,
                                              cfg.ard_shape, cfg.ard_rate)))
    terms["kl_bias_precision"] = -float(_gamma_kl(prec.bias_shape, prec.bias_rate,
                                                  cfg.bias_shape, cfg.bias_rate))
    terms["kl_latents"] = -latent_kl(state)
    return terms


def latent_kl(state):
    lat = state.latents
    total = 0.0
    for d in range(state.n_latents):
        spec = state.config.kernel(state.lengthscales[d])
        if lat.sparse:
            K = kernel_matrix(spec, lat.inducing_grid)
            q = GaussianDensity(lat.inducing_mean[d], lat.inducing_cov[d])
        else:
            K = kernel_matrix(spec, state.grid)
            q = GaussianDensity(lat.mean[d], lat.cov[d])
        total += gauss_kl(q, GaussianDensity(np.zeros(K.shape[0]), K))
    return total


def compute_elbo(state, data):
    """Evidence lower bound (up to the constant of the improper dispersion prior)."""
    return float(sum(elbo_terms(state, data).values()))


def _latent_q(state, d):
    lat = state.latents
    if lat.sparse:
        return GaussianDensity(lat.inducing_mean[d], lat.inducing_cov[d]), lat.inducing_grid
    return GaussianDensity(lat.mean[d], lat.cov[d]), state.grid


def m_step(state, max_iter=20):
    """Optimise each RBF lengthscale against the latent KL term."""
    new_ls = state.lengthscales.copy()
    for d in range(state.n_latents):
        q, grid = _latent_q(state, d)
        new_ls[d], _ = optimize_lengthscale(state.lengthscales[d], q, grid,
                                            state.config.kernel(state.lengthscales[d]),
                                            max_iter=max_iter)
    state.lengthscales = new_ls
    if state.latents.sparse:
        latent_marginals_from_inducing(state)
    return state


def _rel_change(new, old):
    return (new - old) / max(abs(old), 1e-300)


def fit(data, config=None, options=None, state=None, callback=None):
    """Variational EM.

    Each EM iteration runs E-step sweeps until the relative ELBO gain drops
    below ``elbo_rel_tol`` (or ``e_step_sweeps`` is reached), then one
    lengthscale M-step. Iterations stop when the ELBO gain across an EM
    iteration falls below the same tolerance. Returns ``(state, report)``.
    """
    from ccgpfa.model import init_state

    options = options or FitOptions()
    if state is None:
        if config is None:
            raise ValueError("need a config or an initial state")
        if options.mode == "dense" and config.sparse:
            raise ValueError("dense mode requires n_inducing = 0")
        if options.mode != "dense" and not config.sparse:
            raise ValueError(f"{options.mode} mode requires n_inducing >= 2")
        state = init_state(config, data, seed=options.seed)
    stats = as_stats(data, state)
    rng = np.random.default_rng(options.seed)
    report = FitReport()
    start = time.perf_counter()
    last_good = state.copy()
    try:
        elbo = compute_elbo(state, stats)
        report.elbo_trace.append(elbo)
        em_prev = elbo
        for it in range(options.max_em_iters):
            sweeps = 0
            for _ in range(options.e_step_sweeps):
                if options.mode == "sparse_natgrad":
                    state = stochastic_sweep(state, stats, rng)
                else:
                    state = cavi_sweep(state, stats)
                new = compute_elbo(state, stats)
                if not math.isfinite(new):
                    raise NumericalError("ELBO became non-finite")
                report.elbo_trace.append(new)
                sweeps += 1
                gain = _rel_change(new, elbo)
                elbo = new
                last_good = state.copy()
                if options.mode != "sparse_natgrad" and abs(gain) < options.elbo_rel_tol:
                    break
            if options.learn_lengthscales and options.m_step_iters > 0:
                state = m_step(state, options.m_step_iters)
                elbo = compute_elbo(state, stats)
                report.elbo_trace.append(elbo)
                last_good = state.copy()
            report.em_elbo.append(elbo)
            report.lengthscale_trace.append(state.lengthscales.tolist())
            report.wall_time.append(time.perf_counter() - start)
            report.sweeps_per_iter.append(sweeps)
            report.n_iters = it + 1
            if callback is not None:
                callback(it, state, report)
            if abs(_rel_change(elbo, em_prev)) < options.elbo_rel_tol:
                report.converged = True
                break
            em_prev = elbo
    except (NumericalError, ConditioningError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise FitError(f"fit aborted: {exc}", state=last_good, report=report) from exc
    return state, report
