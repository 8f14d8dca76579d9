"""Augmentation distributions and count likelihoods.

Polya-gamma (PG), Polya-inverse-gamma (P-IG) and power-truncated-normal
(PTN) moments, gamma log-moments, and the negative-binomial / binomial
log-pmfs in the logit parameterisation ``p = sigmoid(f)``.

PTN moments are computed by peak-centred Gauss-Legendre quadrature in the
log domain. ``ptn_sample`` is a gamma-proposal rejection sampler kept as an
independent cross-check.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from ccgpfa.specfun import EULER_GAMMA, DomainError, NumericalError, QuadratureGrid, digamma

_SMALL_TILT = 1e-4
# Tail cutoff for PTN quadrature, in nats below the peak (e^-45 ~ 3e-20).
_PTN_TAIL = 45.0
_PTN_PANELS = 24
_PTN_ORDER = 24


@dataclass(frozen=True)
class PolyaGamma:
    shape: float
    tilt: float = 0.0

    def __post_init__(self):
        if not self.shape > 0:
            raise DomainError("PolyaGamma shape must be positive")
        object.__setattr__(self, "tilt", abs(float(self.tilt)))

    def mean(self):
        return float(pg_mean(self.shape, self.tilt))


@dataclass(frozen=True)
class PolyaInverseGamma:
    tilt: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tilt", abs(float(self.tilt)))

    def mean(self):
        return float(pig_mean(self.tilt))


@dataclass(frozen=True)
class PowerTruncatedNormal:
    """Density proportional to ``x**(p-1) * exp(-a x**2 + b x)`` on ``x > 0``."""

    power: float
    quad: float
    lin: float

    def __post_init__(self):
        if not (self.power > 0 and self.quad > 0) or not math.isfinite(self.lin):
            raise DomainError("PTN requires power > 0, quad > 0 and finite lin")

    def moments(self):
        return ptn_moments(self.power, self.quad, self.lin)

    def stats(self):
        return ptn_stats(self.power, self.quad, self.lin)


@dataclass(frozen=True)
class GammaDist:
    """Gamma distribution with shape ``alpha`` and rate ``beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("GammaDist requires positive shape and rate")

    def mean(self):
        return self.alpha / self.beta

    def log_mean(self):
        return float(gamma_log_mean(self.alpha, self.beta))


def _as_float(x):
    x = np.asarray(x, dtype=float)
    return x


def _scalar_or_array(out):
    return float(out) if np.ndim(out) == 0 else out


def pg_mean(shape, tilt):
    """E[omega] for PG(shape, tilt): ``shape / (2c) * tanh(c / 2)``."""
    b = _as_float(shape)
    c = np.abs(_as_float(tilt))
    small = c < _SMALL_TILT
    safe = np.where(small, 1.0, c)
    out = np.where(small, b * (0.25 - c * c / 48.0), b * np.tanh(0.5 * safe) / (2.0 * safe))
    return _scalar_or_array(out)


def log_2cosh_half(tilt):
    """``log(2 cosh(c / 2))`` evaluated without overflow."""
    c = np.abs(_as_float(tilt))
    return _scalar_or_array(0.5 * c + np.log1p(np.exp(-c)))


def pig_mean(tilt):
    """E[xi] for P-IG with tilt c: ``(psi(c + 1) - psi(1)) / (2c)``.

    Small tilts use ``pi^2/12 - zeta(3) c / 2``, the expansion of the ratio
    around zero.
    """
    c = np.abs(_as_float(tilt))
    small = c < _SMALL_TILT
    safe = np.where(small, 1.0, c)
    exact = (digamma(safe + 1.0) + EULER_GAMMA) / (2.0 * safe)
    limit = np.pi ** 2 / 12.0 - 0.5 * special.zeta(3.0) * c
    return _scalar_or_array(np.where(small, limit, exact))


def gamma_log_mean(alpha, beta):
    """E[log tau] for tau ~ Gamma(alpha, rate=beta)."""
    return _scalar_or_array(digamma(alpha) - np.log(_as_float(beta)))


@dataclass(frozen=True)
class PTNStats:
    """Moments and log normaliser of a PTN density."""

    mean: float
    second_moment: float
    log_mean: float
    log_norm: float


def _ptn_log_kernel(x, p, a, b):
    power_term = (p - 1.0) * math.log(x) if p != 1.0 else 0.0
    return power_term - a * x * x + b * x


def _ptn_mode(p, a, b):
    # Positive root of 2a x^2 - b x - (p - 1) = 0, written to avoid cancellation.
    disc = math.sqrt(b * b + 8.0 * a * (p - 1.0))
    if b >= 0:
        return (b + disc) / (4.0 * a)
    return 2.0 * (p - 1.0) / (disc - b)


def _bisect(fn, lo, hi, iters=80):
    # fn(lo) > 0 > fn(hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _ptn_grid_x(p, a, b):
    """Quadrature grid in x for p >= 1 plus the log peak value."""
    mode = _ptn_mode(p, a, b)
    peak = _ptn_log_kernel(mode, p, a, b) if mode > 0 else 0.0
    # Concavity with curvature at least 2a bounds the support half-width.
    reach = math.sqrt((_PTN_TAIL + 1.0) / a)

    def excess(x):
        return _ptn_log_kernel(x, p, a, b) - peak + _PTN_TAIL

    upper = _bisect(excess, mode, mode + reach)
    candidate = max(mode - reach, 0.0)
    probe = candidate if candidate > 0 else mode * 1e-12
    if mode == 0.0 or excess(probe) >= 0:
        lower = 0.0
    else:
        lower = _bisect(lambda x: -excess(x), probe, mode)
        if lower < upper * 1e-3:
            lower = 0.0
    if lower == 0.0:
        graded = upper * np.geomspace(1e-14, 0.05, 20)
        edges = np.concatenate([[0.0], graded, np.linspace(0.05 * upper, upper, _PTN_PANELS + 1)[1:]])
    else:
        edges = np.linspace(lower, upper, _PTN_PANELS + 1)
    return QuadratureGrid.from_edges(edges, _PTN_ORDER), peak


def ptn_stats(power, quad, lin):
    """Mean, second moment, E[log x] and log normaliser of PTN(p, a, b).

    For ``p >= 1`` the integral is taken in ``x``; for ``0 < p < 1`` the
    substitution ``u = x**p`` removes the singularity at zero.
    """
    p, a, b = float(power), float(quad), float(lin)
    if not (p > 0 and math.isfinite(p)):
        raise DomainError(f"PTN power must be positive and finite, got {p}")
    if not (a > 1e-300 and math.isfinite(a)):
        raise DomainError(f"PTN quadratic coefficient must be positive, got {a}")
    if not math.isfinite(b):
        raise DomainError(f"PTN linear coefficient must be finite, got {b}")

    if p >= 1.0:
        grid, peak = _ptn_grid_x(p, a, b)
        x = grid.nodes
        logk = (p - 1.0) * np.log(x) - a * x * x + b * x - peak
        w = grid.weights * np.exp(logk)
        log_x = np.log(x)
        log_scale = peak
    else:
        # exp(-a x^2 + b x) with x = u^(1/p); peak of the smooth factor.
        xm = max(b / (2.0 * a), 0.0)
        peak = -a * xm * xm + b * xm
        x_hi = (b + math.sqrt(b * b + 4.0 * a * (_PTN_TAIL - peak))) / (2.0 * a)
        u_hi = x_hi ** p
        edges = np.concatenate([[0.0], u_hi * np.geomspace(1e-14, 0.05, 20),
                                np.linspace(0.05 * u_hi, u_hi, _PTN_PANELS + 1)[1:]])
        grid = QuadratureGrid.from_edges(edges, _PTN_ORDER)
        u = grid.nodes
        log_x = np.log(u) / p
        x = np.exp(log_x)
        w = grid.weights * np.exp(-a * x * x + b * x - peak)
        log_scale = peak - math.log(p)

    total = w.sum()
    if not (total > 0 and math.isfinite(total)):
        raise NumericalError(f"PTN({p}, {a}, {b}) normaliser quadrature failed")
    mean = float(np.dot(w, x) / total)
    second = float(np.dot(w, x * x) / total)
    log_mean = float(np.dot(w, log_x) / total)
    return PTNStats(mean, second, log_mean, log_scale + math.log(total))


def ptn_moments(power, quad, lin):
    """(E[x], E[x^2]) under PTN(p, a, b)."""
    s = ptn_stats(power, quad, lin)
    return s.mean, s.second_moment


def ptn_sample(power, quad, lin, n, seed=None):
    """Draw ``n`` samples from PTN(p, a, b) by rejection from a gamma proposal.

    The proposal is Gamma(p, rate lam) with lam chosen so the acceptance
    weight ``exp(-a (x - x0)^2)`` is centred at the PTN mode x0.
    """
    p, a, b = float(power), float(quad), float(lin)
    PowerTruncatedNormal(p, a, b)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if p > 1.0:
        lam = (p - 1.0) / _ptn_mode(p, a, b)
    else:
        lam = math.sqrt(2.0 * a * max(p, 1.0)) + max(-b, 0.0)
    centre = (b + lam) / (2.0 * a)

    def log_accept(x):
        if centre >= 0:
            return -a * (x - centre) ** 2
        return -a * x * x + (b + lam) * x

    out = np.empty(0)
    proposed = accepted = 0
    batch = int(min(max(2 * n, 1024), 4_000_000))
    while out.size < n:
        x = rng.gamma(p, 1.0 / lam, size=batch)
        keep = np.log(rng.random(batch)) < log_accept(x)
        proposed += batch
        accepted += int(keep.sum())
        if proposed >= 100_000 and accepted < 1e-4 * proposed:
            raise NumericalError(
                f"PTN rejection sampler acceptance {accepted / proposed:.2e} below 1e-4")
        out = np.concatenate([out, x[keep]])
    return out[:n]


def _softplus(f):
    return np.logaddexp(0.0, f)


def negbin_logpmf(y, r, f):
    """log NegBin(y; r, sigmoid(f)), mean ``r * exp(f)``."""
    y = _as_float(y)
    r = _as_float(r)
    f = _as_float(f)
    out = (special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1.0)
           + y * f - (y + r) * _softplus(f))
    return _scalar_or_array(out)


def binomial_logpmf(y, k, f):
    """log Binomial(y; k, sigmoid(f))."""
    y = _as_float(y)
    k = _as_float(k)
    f = _as_float(f)
    if np.any(y < 0) or np.any(y > k):
        raise DomainError("binomial_logpmf requires 0 <= y <= k")
    log_choose = special.gammaln(k + 1.0) - special.gammaln(y + 1.0) - special.gammaln(k - y + 1.0)
    return _scalar_or_array(log_choose + y * f - k * _softplus(f))
