"""Model configuration, variational state, initialisation and moment bookkeeping.

The model is ``f = W X + beta 1^T`` with ``p_hat = sigmoid(f)``. Under the
negative-binomial observation model the mean count is ``r * exp(f)``; under
the binomial model it is ``k * p_hat``. All trials share one set of latents,
so the engine only needs counts summed over trials plus a few per-trial
reductions for the dispersion augmentation.
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import linalg, special

from ccgpfa.augdist import gamma_log_mean, pg_mean, pig_mean, ptn_stats
from ccgpfa.container import read_container, write_container
from ccgpfa.gp import KernelSpec, cholesky, kernel_matrix
from ccgpfa.specfun import digamma, log_gamma

OBSERVATIONS = ("negbin", "binomial")
DISPERSION_RULES = ("exact", "literal")


class InitError(ValueError):
    """Data cannot support the requested model (for example all-zero counts)."""


@dataclass(frozen=True)
class ModelConfig:
    """Static model settings.

    ``lengthscales`` holds the initial RBF lengthscale of each latent, in
    bins; a single value is broadcast. ``n_inducing = 0`` selects the dense
    GP posterior and ``batch_size = 0`` means full batch.
    ``dispersion_rule`` selects how the Polya-gamma normaliser enters the
    dispersion update: ``"exact"`` keeps its dependence on ``r``
    (coordinate ascent on the bound), ``"literal"`` replaces it by
    ``log 2``.
    """

    n_latents: int
    observation: str = "negbin"
    lengthscales: tuple = (5.0,)
    jitter: float = 1e-6
    ard_shape: float = 1e-5
    ard_rate: float = 1e-5
    bias_shape: float = 1e-5
    bias_rate: float = 1e-5
    n_inducing: int = 0
    batch_size: int = 0
    step_size: float = 1.0
    clip_threshold: float = 8.0
    dispersion_rule: str = "exact"
    total_count: tuple = None

    def __post_init__(self):
        if int(self.n_latents) < 1:
            raise ValueError("n_latents must be at least 1")
        if self.observation not in OBSERVATIONS:
            raise ValueError(f"observation must be one of {OBSERVATIONS}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.size == 1:
            ls = np.repeat(ls, self.n_latents)
        if ls.size != self.n_latents or np.any(~(ls > 0)):
            raise ValueError("need one positive lengthscale per latent")
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in ls))
        if min(self.ard_shape, self.ard_rate, self.bias_shape, self.bias_rate) <= 0:
            raise ValueError("gamma prior hyperparameters must be positive")
        if self.n_inducing != 0 and self.n_inducing < 2:
            raise ValueError("n_inducing must be 0 (dense) or at least 2")
        if self.batch_size < 0:
            raise ValueError("batch_size must be non-negative")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must lie in (0, 1]")
        if not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be positive")
        if self.dispersion_rule not in DISPERSION_RULES:
            raise ValueError(f"dispersion_rule must be one of {DISPERSION_RULES}")
        if self.total_count is not None:
            object.__setattr__(self, "total_count", tuple(int(k) for k in self.total_count))
        KernelSpec(1.0, jitter=self.jitter)

    @property
    def sparse(self):
        return self.n_inducing > 0

    def kernel(self, lengthscale):
        return KernelSpec(float(lengthscale), jitter=self.jitter)

    def to_dict(self):
        out = asdict(self)
        out["lengthscales"] = list(self.lengthscales)
        if self.total_count is not None:
            out["total_count"] = list(self.total_count)
        return out

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown model setting(s): {', '.join(sorted(unknown))}")
        values = dict(values)
        if "lengthscales" in values:
            values["lengthscales"] = tuple(np.atleast_1d(values["lengthscales"]).tolist())
        return cls(**values)


class CountStats:
    """Reductions of a count tensor used by the engine.

    Only ``ysum`` (counts summed over trials) reaches the Gaussian factors.
    The raw tensor is kept for the per-trial gamma augmentation sums.
    """

    def __init__(self, counts, observation="negbin", total_count=None):
        counts = np.asarray(counts)
        if counts.ndim == 2:
            counts = counts[None]
        self.counts = counts
        self.n_trials, self.n_neurons, self.n_bins = counts.shape
        self.ysum = counts.sum(axis=0).astype(float)
        self.observation = observation
        if observation == "binomial":
            if total_count is None:
                total_count = np.maximum(counts.max(axis=(0, 2)), 1)
            total_count = np.asarray(total_count, dtype=float)
            if total_count.shape != (self.n_neurons,):
                raise ValueError("total_count needs one entry per neuron")
            if np.any(counts > total_count[None, :, None]):
                raise ValueError("binomial counts exceed total_count")
            self.total_count = total_count
            self.log_base = float(np.sum(special.gammaln(total_count + 1.0)[None, :, None]
                                         - special.gammaln(counts + 1.0)
                                         - special.gammaln(total_count[None, :, None] - counts + 1.0)))
        else:
            self.total_count = None
            self.log_base = -float(np.sum(special.gammaln(counts + 1.0)))
        # Counts grouped by value: for each distinct count v the per-(n, t)
        # number of trials with y = v. Sums of psi(y + r) then cost one
        # digamma call per distinct value instead of one per trial.
        values, inverse = np.unique(counts, return_inverse=True)
        self._values = values.astype(float)
        cells = self.n_neurons * self.n_bins
        if values.size <= 10 * self.n_trials and values.size * cells <= 2 ** 25:
            flat = inverse.reshape(self.n_trials, cells) * cells + np.arange(cells)[None, :]
            self._hist = np.bincount(flat.ravel(), minlength=values.size * cells).reshape(
                values.size, self.n_neurons, self.n_bins).astype(float)
        else:
            self._hist = None

    @classmethod
    def from_data(cls, data, state_or_config=None):
        counts = data.counts if hasattr(data, "counts") else data
        observation, total = "negbin", None
        if isinstance(state_or_config, VariationalState):
            observation = state_or_config.config.observation
            total = state_or_config.total_count
        elif isinstance(state_or_config, ModelConfig):
            observation = state_or_config.observation
            total = state_or_config.total_count
        return cls(counts, observation, total)

    def trial_sum(self, fn, shift, bins=None):
        """``sum_m fn(y[m, n, t] + shift[n])`` for each ``(n, t)``."""
        shift = np.asarray(shift, dtype=float)[:, None]
        if self._hist is not None:
            hist = self._hist if bins is None else self._hist[:, :, bins]
            out = np.zeros(hist.shape[1:])
            for v, h in zip(self._values, hist):
                out += h * fn(v + shift)
            return out
        counts = self.counts if bins is None else self.counts[:, :, bins]
        return np.sum(fn(counts + shift[None]), axis=0)


def as_stats(data, state):
    return data if isinstance(data, CountStats) else CountStats.from_data(data, state)


@dataclass
class WeightPosterior:
    mean: np.ndarray
    cov: np.ndarray

    def second_moment(self):
        """``E[w_n w_n^T]`` with shape ``(N, D, D)``."""
        return self.mean[:, :, None] * self.mean[:, None, :] + self.cov

    def square_mean(self):
        return self.mean ** 2 + np.diagonal(self.cov, axis1=1, axis2=2)


@dataclass
class BiasPosterior:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class LatentPosterior:
    """Marginals ``mean``/``var`` on the time grid, plus the parameters of q.

    Dense fits store the full ``cov``; sparse fits store the inducing
    posterior and the projector ``K_tm K_mm^-1``.
    """

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray = None
    inducing_mean: np.ndarray = None
    inducing_cov: np.ndarray = None
    projector: np.ndarray = None
    inducing_grid: np.ndarray = None

    @property
    def sparse(self):
        return self.inducing_mean is not None


@dataclass
class PrecisionPosterior:
    ard_shape: np.ndarray
    ard_rate: np.ndarray
    bias_shape: float
    bias_rate: float

    @property
    def ard_mean(self):
        return self.ard_shape / self.ard_rate

    @property
    def ard_log_mean(self):
        return gamma_log_mean(self.ard_shape, self.ard_rate)

    @property
    def bias_mean(self):
        return self.bias_shape / self.bias_rate

    @property
    def bias_log_mean(self):
        return float(gamma_log_mean(self.bias_shape, self.bias_rate))


@dataclass
class DispersionPosterior:
    """Per-neuron PTN(p, a, b) factors with cached moments."""

    power: np.ndarray
    quad: np.ndarray
    lin: np.ndarray
    mean: np.ndarray
    second_moment: np.ndarray
    log_mean: np.ndarray
    log_norm: np.ndarray

    @classmethod
    def from_params(cls, power, quad, lin):
        power, quad, lin = (np.asarray(v, dtype=float).copy() for v in (power, quad, lin))
        stats = [ptn_stats(p, a, b) for p, a, b in zip(power, quad, lin)]
        return cls(power, quad, lin, *_stack_ptn(stats))


def _stack_ptn(stats):
    return tuple(np.array([getattr(s, name) for s in stats])
                 for name in ("mean", "second_moment", "log_mean", "log_norm"))


@dataclass
class AugmentedPosterior:
    """Local augmentation factors, stored as per-(n, t) trial sums.

    ``pg_tilt`` is the Polya-gamma tilt; the PG shape, ``omega_mean`` and
    ``kappa`` are derived from it and the current dispersion moments.
    ``tau_r`` records the ``E[r_n]`` at which each gamma factor
    ``tau ~ Gamma(y + tau_r, 1)`` was set, and ``log_tau_sum`` /
    ``lgamma_tau_sum`` are ``sum_m psi(alpha)`` and ``sum_m log Gamma(alpha)``.
    The P-IG tilt is shared by all trials and bins of a neuron.
    """

    pg_tilt: np.ndarray
    pg_shape: np.ndarray
    omega_mean: np.ndarray
    kappa: np.ndarray
    tau_r: np.ndarray = None
    log_tau_sum: np.ndarray = None
    lgamma_tau_sum: np.ndarray = None
    pig_tilt: np.ndarray = None
    xi_mean: np.ndarray = None


@dataclass
class VariationalState:
    config: ModelConfig
    grid: np.ndarray
    n_trials: int
    lengthscales: np.ndarray
    weights: WeightPosterior
    bias: BiasPosterior
    latents: LatentPosterior
    precisions: PrecisionPosterior
    augmented: AugmentedPosterior = None
    dispersion: DispersionPosterior = None
    total_count: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_neurons(self):
        return self.weights.mean.shape[0]

    @property
    def n_bins(self):
        return self.grid.size

    @property
    def n_latents(self):
        return self.weights.mean.shape[1]

    def copy(self):
        return _deepcopy_state(self)


def _deepcopy_state(state):
    def dup(obj):
        if obj is None:
            return None
        return replace(obj, **{f.name: (np.array(getattr(obj, f.name), copy=True)
                                        if isinstance(getattr(obj, f.name), np.ndarray)
                                        else getattr(obj, f.name))
                               for f in fields(obj)})
    return replace(state, grid=state.grid.copy(), lengthscales=state.lengthscales.copy(),
                   weights=dup(state.weights), bias=dup(state.bias), latents=dup(state.latents),
                   precisions=dup(state.precisions), augmented=dup(state.augmented),
                   dispersion=dup(state.dispersion),
                   total_count=None if state.total_count is None else state.total_count.copy(),
                   meta=dict(state.meta))


def inducing_grid(n_bins, n_inducing):
    """``n_inducing`` uniformly spaced points on ``[1, T]``."""
    return np.linspace(1.0, float(n_bins), int(n_inducing))


def project_inducing(config, grid, lengthscale, z, m, S):
    """Marginals of ``q(x) = int p(x | u) q(u) du`` on ``grid``.

    Returns ``(mean, var, projector)`` with ``projector = K_tm K_mm^-1``.
    """
    spec = config.kernel(lengthscale)
    Kmm = kernel_matrix(spec, z)
    Ktm = kernel_matrix(spec, grid, z)
    L = cholesky(Kmm)
    A = linalg.cho_solve((L, True), Ktm.T).T
    prior_var = spec.variance * (1.0 + spec.jitter) * np.ones(grid.size)
    var = prior_var - np.sum(A * Ktm, axis=1) + np.sum((A @ S) * A, axis=1)
    return A @ m, np.maximum(var, 0.0), A


def latent_marginals_from_inducing(state):
    lat = state.latents
    D = state.n_latents
    means, vars_, projs = [], [], []
    for d in range(D):
        mu, var, A = project_inducing(state.config, state.grid, state.lengthscales[d],
                                      lat.inducing_grid, lat.inducing_mean[d], lat.inducing_cov[d])
        means.append(mu)
        vars_.append(var)
        projs.append(A)
    lat.mean = np.array(means)
    lat.var = np.array(vars_)
    lat.projector = np.array(projs)


def f_moments(state):
    """``(E[f], E[f^2])`` for every neuron and bin, each of shape ``(N, T)``."""
    m = state.weights.mean
    Eww = state.weights.second_moment()
    mu = state.latents.mean
    var = state.latents.var
    mb = state.bias.mean
    lin = m @ mu
    Ef = lin + mb[:, None]
    quad = np.einsum("ndt,dt->nt", np.einsum("ndk,kt->ndt", Eww, mu), mu)
    quad += state.weights.square_mean() @ var
    Ef2 = quad + 2.0 * mb[:, None] * lin + (mb ** 2 + state.bias.var)[:, None]
    return Ef, Ef2


def pg_shape(stats, state):
    if state.config.observation == "binomial":
        return np.broadcast_to((stats.n_trials * state.total_count)[:, None], stats.ysum.shape).copy()
    return stats.ysum + stats.n_trials * state.dispersion.mean[:, None]


def kappa(data, state):
    """``E[Omega z]`` per neuron and bin, shape ``(N, T)``."""
    stats = as_stats(data, state)
    if state.config.observation == "binomial":
        return stats.ysum - 0.5 * stats.n_trials * state.total_count[:, None]
    return 0.5 * (stats.ysum - stats.n_trials * state.dispersion.mean[:, None])


def refresh_augmented(state, stats):
    """Recompute the derived PG caches (shape, E[omega], kappa) in place."""
    aug = state.augmented
    aug.pg_shape = pg_shape(stats, state)
    aug.omega_mean = np.asarray(pg_mean(aug.pg_shape, aug.pg_tilt))
    aug.kappa = kappa(stats, state)


def update_augmented(state, data, bins=None):
    """Closed-form updates of the local PG, gamma and P-IG factors.

    ``bins`` restricts the PG tilt and gamma factors to a subset of time
    bins (used by minibatch inference). Returns a new
    :class:`AugmentedPosterior`.
    """
    stats = as_stats(data, state)
    _, Ef2 = f_moments(state)
    N, T = stats.ysum.shape
    old = state.augmented
    sel = slice(None) if bins is None else np.asarray(bins)
    tilt = np.zeros((N, T)) if old is None else old.pg_tilt.copy()
    tilt[:, sel] = np.sqrt(np.maximum(Ef2[:, sel], 0.0))
    aug = AugmentedPosterior(pg_tilt=tilt, pg_shape=None, omega_mean=None, kappa=None)
    if state.config.observation == "negbin":
        disp = state.dispersion
        if old is None or old.tau_r is None:
            aug.tau_r = np.zeros((N, T))
            aug.log_tau_sum = np.zeros((N, T))
            aug.lgamma_tau_sum = np.zeros((N, T))
        else:
            aug.tau_r = old.tau_r.copy()
            aug.log_tau_sum = old.log_tau_sum.copy()
            aug.lgamma_tau_sum = old.lgamma_tau_sum.copy()
        bin_index = None if bins is None else np.asarray(bins)
        aug.tau_r[:, sel] = disp.mean[:, None]
        aug.log_tau_sum[:, sel] = stats.trial_sum(digamma, disp.mean, bin_index)
        aug.lgamma_tau_sum[:, sel] = stats.trial_sum(log_gamma, disp.mean, bin_index)
        aug.pig_tilt = np.sqrt(disp.second_moment)
        aug.xi_mean = np.asarray(pig_mean(aug.pig_tilt), dtype=float).reshape(N)
    previous, state.augmented = state.augmented, aug
    try:
        refresh_augmented(state, stats)
    finally:
        state.augmented = previous
    return aug


def _pca_latents(counts, n_latents):
    root = np.sqrt(counts).mean(axis=0)
    root = root - root.mean(axis=1, keepdims=True)
    T = root.shape[1]
    X = np.zeros((n_latents, T))
    if not np.any(root):
        return X
    U, s, Vt = np.linalg.svd(root, full_matrices=False)
    k = min(n_latents, s.size)
    X[:k] = s[:k, None] * Vt[:k]
    rms = np.sqrt(np.mean(X ** 2, axis=1))
    if rms.max() < 1e-12 * max(1.0, s[0]):
        return np.zeros_like(X)
    # Canonical sign: first nonzero entry positive, so results do not
    # depend on LAPACK sign conventions.
    for d in range(k):
        idx = np.flatnonzero(np.abs(X[d]) > 1e-12 * rms.max())
        if idx.size and X[d, idx[0]] < 0:
            X[d] = -X[d]
    return X / rms.max()


def initial_bias(stats, config):
    """Per-neuron bias from the empirical mean rate through the inverse link.

    NegBin uses the plug-in ``r = 1`` so ``beta = log(mean)``; binomial uses
    ``logit(mean / k)``. Means are floored at half a spike over the recording.
    """
    MT = stats.n_trials * stats.n_bins
    mean = stats.ysum.sum(axis=1) / MT
    floor = 0.5 / MT
    if config.observation == "binomial":
        frac = np.clip(mean / stats.total_count, floor / stats.total_count,
                       1.0 - floor / stats.total_count)
        return np.log(frac) - np.log1p(-frac)
    return np.log(np.maximum(mean, floor))


def init_state(config, data, seed=None):
    """Initial variational state.

    Weights have means drawn from ``N(0, 0.1^2)`` and covariance ``0.1 I``;
    biases come from :func:`initial_bias` with unit variance; latent means
    are scaled PCA scores of square-root counts with the GP prior
    covariance; gamma factors sit at their priors; the dispersion starts at
    ``PTN(1, 1/pi, 0)``, whose mean is exactly 1; finally one sweep of the
    local augmentation updates fills the caches.
    """
    stats = data if isinstance(data, CountStats) else CountStats.from_data(data, config)
    if not np.any(stats.counts):
        raise InitError("all counts are zero; the data support only a bias-only model")
    N, T, D = stats.n_neurons, stats.n_bins, config.n_latents
    if config.n_inducing > T:
        raise ValueError(f"n_inducing={config.n_inducing} exceeds the number of bins {T}")
    if config.batch_size > T:
        raise ValueError(f"batch_size={config.batch_size} exceeds the number of bins {T}")
    rng = np.random.default_rng(seed)
    grid = np.arange(1, T + 1, dtype=float)
    ls = np.array(config.lengthscales, dtype=float)

    weights = WeightPosterior(0.1 * rng.standard_normal((N, D)), np.tile(0.1 * np.eye(D), (N, 1, 1)))
    bias = BiasPosterior(initial_bias(stats, config), np.ones(N))
    X0 = _pca_latents(stats.counts, D)
    if config.sparse:
        z = inducing_grid(T, config.n_inducing)
        m = np.array([np.interp(z, grid, X0[d]) for d in range(D)])
        S = np.array([kernel_matrix(config.kernel(ls[d]), z) for d in range(D)])
        latents = LatentPosterior(mean=None, var=None, inducing_mean=m, inducing_cov=S,
                                  inducing_grid=z)
    else:
        cov = np.array([kernel_matrix(config.kernel(ls[d]), grid) for d in range(D)])
        latents = LatentPosterior(mean=X0, var=np.diagonal(cov, axis1=1, axis2=2).copy(), cov=cov)
    precisions = PrecisionPosterior(np.full(D, config.ard_shape), np.full(D, config.ard_rate),
                                    float(config.bias_shape), float(config.bias_rate))
    state = VariationalState(config=config, grid=grid, n_trials=stats.n_trials, lengthscales=ls,
                             weights=weights, bias=bias, latents=latents, precisions=precisions,
                             total_count=stats.total_count)
    if config.sparse:
        latent_marginals_from_inducing(state)
    if config.observation == "negbin":
        state.dispersion = DispersionPosterior.from_params(np.ones(N), np.full(N, 1.0 / math.pi),
                                                           np.zeros(N))
    state.augmented = update_augmented(state, stats)
    return state


_STATE_ARRAYS = {
    "weights": ("mean", "cov"),
    "bias": ("mean", "var"),
    "latents": ("mean", "var", "cov", "inducing_mean", "inducing_cov", "projector", "inducing_grid"),
    "precisions": ("ard_shape", "ard_rate"),
    "dispersion": ("power", "quad", "lin", "mean", "second_moment", "log_mean", "log_norm"),
    "augmented": ("pg_tilt", "pg_shape", "omega_mean", "kappa", "tau_r", "log_tau_sum",
                  "lgamma_tau_sum", "pig_tilt", "xi_mean"),
}


def save_state(state, path, meta=None):
    """Write a bit-exact checkpoint of every posterior parameter."""
    arrays = {"grid": state.grid, "lengthscales": state.lengthscales}
    if state.total_count is not None:
        arrays["total_count"] = state.total_count
    for part, names in _STATE_ARRAYS.items():
        obj = getattr(state, part)
        if obj is None:
            continue
        for name in names:
            value = getattr(obj, name)
            if value is not None:
                arrays[f"{part}.{name}"] = value
    header = {"config": state.config.to_dict(), "n_trials": state.n_trials,
              "bias_shape": state.precisions.bias_shape, "bias_rate": state.precisions.bias_rate,
              "state_meta": state.meta}
    header.update(meta or {})
    write_container(path, arrays, header, kind="state")


def load_state(path):
    arrays, meta = read_container(path, kind="state")
    config = ModelConfig.from_dict(meta["config"])

    def part(name, cls, **extra):
        keys = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(name + ".")}
        if not keys:
            return None
        return cls(**{**{n: None for n in _STATE_ARRAYS[name]}, **keys, **extra})

    precisions = PrecisionPosterior(arrays["precisions.ard_shape"], arrays["precisions.ard_rate"],
                                    meta["bias_shape"], meta["bias_rate"])
    return VariationalState(
        config=config, grid=arrays["grid"], n_trials=int(meta["n_trials"]),
        lengthscales=arrays["lengthscales"], weights=part("weights", WeightPosterior),
        bias=part("bias", BiasPosterior), latents=part("latents", LatentPosterior),
        precisions=precisions, augmented=part("augmented", AugmentedPosterior),
        dispersion=part("dispersion", DispersionPosterior),
        total_count=arrays.get("total_count"), meta=meta.get("state_meta", {}))
