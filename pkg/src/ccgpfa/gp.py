"""RBF kernels, Cholesky solves, Gaussian KL and the lengthscale M-step."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

KERNEL_FAMILIES = ("rbf",)


class ConditioningError(np.linalg.LinAlgError):
    """Cholesky factorisation failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel of one latent; lengthscale is in time-bin units."""

    lengthscale: float
    family: str = "rbf"
    variance: float = 1.0
    jitter: float = 1e-6

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        if not 1e-8 <= self.jitter <= 1e-2:
            raise ValueError("jitter must lie in [1e-8, 1e-2]")

    def with_lengthscale(self, lengthscale):
        return KernelSpec(float(lengthscale), self.family, self.variance, self.jitter)


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


def _grid(x, name):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D grid")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def kernel_matrix(spec, s, t=None):
    """Gram matrix ``k(s_i, t_j)``; jitter is added when the two grids coincide."""
    s = _grid(s, "s")
    t = s if t is None else _grid(t, "t")
    sq = (s[:, None] - t[None, :]) ** 2
    K = spec.variance * np.exp(-0.5 * sq / spec.lengthscale ** 2)
    if s.shape == t.shape and np.array_equal(s, t):
        K[np.diag_indices_from(K)] += spec.jitter * spec.variance
    return K


def kernel_lengthscale_derivative(spec, s, t=None):
    """Entrywise dK/dlengthscale for the RBF kernel (jitter has no lengthscale dependence)."""
    s = _grid(s, "s")
    t = s if t is None else _grid(t, "t")
    sq = (s[:, None] - t[None, :]) ** 2
    ell = spec.lengthscale
    return spec.variance * np.exp(-0.5 * sq / ell ** 2) * sq / ell ** 3


def cholesky(A, max_escalations=3):
    """Lower Cholesky factor, adding diagonal jitter (x10 each retry) on failure."""
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.abs(np.diag(A)))), 1e-300)
    jitter = 1e-10 * scale
    eye = np.eye(A.shape[-1])
    for _ in range(max_escalations):
        try:
            return np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ConditioningError(f"matrix of size {A.shape[-1]} is not positive definite after jitter")


def chol_solve(A, B):
    """Solve ``A X = B`` for symmetric positive-definite ``A``."""
    L = cholesky(A)
    return linalg.cho_solve((L, True), np.asarray(B, dtype=float))


def logdet_from_chol(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def gauss_kl(q, p):
    """KL(q || p) between two multivariate Gaussians."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    Lp = cholesky(p.cov)
    Lq = cholesky(q.cov)
    diff = p.mean - q.mean
    alpha = linalg.solve_triangular(Lp, diff, lower=True)
    # Tr(P^-1 Q) = ||Lp^-1 Lq||_F^2
    M = linalg.solve_triangular(Lp, Lq, lower=True)
    kl = 0.5 * (logdet_from_chol(Lp) - logdet_from_chol(Lq) - q.dim
                + float(np.sum(M * M)) + float(alpha @ alpha))
    return max(kl, 0.0)


def lengthscale_objective(lengthscale, q, grid, spec=None):
    """M-step objective in the lengthscale and its derivative.

    ``L = -1/2 (log|K| + mu^T K^-1 mu + Tr(K^-1 Sigma))`` where ``q = N(mu, Sigma)``
    is the variational posterior over the latent on ``grid`` (time bins for a
    dense model, inducing points for a sparse one).
    """
    spec = KernelSpec(float(lengthscale)) if spec is None else spec.with_lengthscale(lengthscale)
    grid = _grid(grid, "grid")
    if q.dim != grid.size:
        raise ValueError(f"posterior dimension {q.dim} does not match grid size {grid.size}")
    K = kernel_matrix(spec, grid)
    L = cholesky(K)
    Kinv = linalg.cho_solve((L, True), np.eye(grid.size))
    a = Kinv @ q.mean
    value = -0.5 * (logdet_from_chol(L) + float(q.mean @ a) + float(np.sum(Kinv * q.cov)))
    dK = kernel_lengthscale_derivative(spec, grid)
    # dL/dK = 1/2 (K^-1 (mu mu^T + Sigma) K^-1 - K^-1)
    G = np.outer(a, a) + Kinv @ q.cov @ Kinv - Kinv
    grad = 0.5 * float(np.sum(G * dK))
    return value, grad


def optimize_lengthscale(lengthscale, q, grid, spec=None, max_iter=20, tol=1e-8):
    """Gradient ascent on log-lengthscale with backtracking line search.

    Returns the new lengthscale and the objective value there.
    """
    log_ell = math.log(lengthscale)
    value, grad = lengthscale_objective(lengthscale, q, grid, spec)
    step = 0.5
    for _ in range(max_iter):
        g = grad * math.exp(log_ell)
        if abs(g) < tol:
            break
        delta = math.copysign(min(step * abs(g), 1.0), g)
        accepted = False
        while abs(delta) > 1e-10:
            trial = log_ell + delta
            try:
                new_value, new_grad = lengthscale_objective(math.exp(trial), q, grid, spec)
            except ConditioningError:
                new_value = -math.inf
            if new_value >= value + 1e-4 * delta * g:
                accepted = True
                break
            delta *= 0.5
        if not accepted:
            break
        step = 2.0 * abs(delta) / abs(g)
        log_ell, value, grad = trial, new_value, new_grad
    return math.exp(log_ell), value
