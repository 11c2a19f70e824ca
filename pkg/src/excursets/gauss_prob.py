"""Gaussian box probabilities ``P(a <= x <= b)``.

Three estimators share the :class:`ProbabilityEstimate` result type:

* :func:`ghk_init` / :func:`ghk_extend` -- a GHK particle filter that walks
  the backwards autoregression of a :class:`~excursets.gmrf.CholeskyFactor`
  one variable at a time. Extending the node set reuses all earlier work,
  which is what the excursion algorithms need.
* :func:`qmc_genz` -- the separation-of-variables transform to the unit
  cube with a randomly shifted Richtmyer lattice (dense covariances).
* :func:`mc_bruteforce` -- plain counting over exact joint draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special as sc

from . import _kernels, gmrf


class EmptyInterval(ValueError):
    pass


class IntervalMassUnderflow(FloatingPointError):
    pass


@dataclass(frozen=True)
class IntegrationConfig:
    """Tuning for the integrators.

    ``ess_fraction`` triggers resampling when ESS < ess_fraction * N;
    ``resample=False`` switches resampling off entirely.
    """

    n_particles: int = 10000
    ess_fraction: float = 0.5
    seed: int = 0
    qmc_points: int = 2**14
    qmc_randomizations: int = 8
    resample: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not 0.0 < self.ess_fraction <= 1.0:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if self.qmc_points < 16:
            raise ValueError("qmc_points must be >= 16")
        if self.qmc_randomizations < 2:
            raise ValueError("qmc_randomizations must be >= 2")

    def rng(self, *stream):
        """Independent generator for a named substream of ``seed``."""
        return np.random.default_rng([int(self.seed) % 2**63, *map(int, stream)])


@dataclass(frozen=True)
class Bounds:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).ravel()
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(np.isnan(a)) or np.any(np.isnan(b)):
            raise ValueError("bounds contain NaN")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def vacuous(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def __len__(self):
        return self.a.size


@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float
    std_error: float
    n_effective: float
    method: str


# -- scalar normal helpers -------------------------------------------------
# scipy.special.ndtr/ndtri/log_ndtr (Cephes) are accurate to ~1e-16.

def interval_mass(lo, hi):
    """``Phi(hi) - Phi(lo)`` without cancellation in the upper tail."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    upper = lo > 0
    return np.where(upper, sc.ndtr(-lo) - sc.ndtr(-hi), sc.ndtr(hi) - sc.ndtr(lo))


def log_interval_mass(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mass = interval_mass(lo, hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(mass)
        tiny = mass < 1e-280
        if np.any(tiny):
            upper = lo > 0
            la = np.where(upper, sc.log_ndtr(-lo), sc.log_ndtr(hi))
            lb = np.where(upper, sc.log_ndtr(-hi), sc.log_ndtr(lo))
            alt = la + np.log1p(-np.exp(lb - la))
            alt = np.where(hi > lo, alt, -np.inf)
            out = np.where(tiny, alt, out)
    return out


def truncnorm_std(lo, hi, u):
    """Inverse-CDF draw from N(0,1) truncated to ``(lo, hi)``.

    Works on complementary probabilities when the interval sits in the
    upper tail, and never returns a value outside the interval.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    upper = lo > 0
    with np.errstate(invalid="ignore"):
        z_low = sc.ndtri((1.0 - u) * sc.ndtr(lo) + u * sc.ndtr(hi))
        z_up = -sc.ndtri((1.0 - u) * sc.ndtr(-lo) + u * sc.ndtr(-hi))
    z = np.where(upper, z_up, z_low)
    return np.clip(z, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))


def ghk_truncate_sample(mean, sd, a, b, u):
    """One truncated-normal draw from N(mean, sd^2) restricted to (a, b)."""
    if not sd > 0:
        raise ValueError("sd must be positive")
    if not a < b:
        raise EmptyInterval(f"empty interval ({a}, {b})")
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    lo = (a - mean) / sd
    hi = (b - mean) / sd
    if interval_mass(lo, hi) < 1e-300:
        raise IntervalMassUnderflow(f"interval ({a}, {b}) has no mass under N({mean}, {sd}^2)")
    z = float(truncnorm_std(lo, hi, u))
    x = mean + sd * z
    return float(np.clip(x, np.nextafter(a, np.inf), np.nextafter(b, -np.inf)))


def systematic_resample(weights, u):
    """Indices of a systematic resample; ``weights`` need not be normalised."""
    N = weights.size
    c = np.cumsum(weights)
    c /= c[-1]
    positions = (u + np.arange(N)) / N
    idx = np.searchsorted(c, positions, side="right")
    return np.minimum(idx, N - 1)


# -- GHK particle filter ---------------------------------------------------

class ParticleSystem:
    """State of the sequential GHK integrator.

    Variables are integrated backwards through the factor ordering:
    depth ``k`` means positions ``n-1, ..., n-k`` have been handled.
    Particle deviations ``x - mu`` are stored row ``r`` for position
    ``n-1-r``.
    """

    def __init__(self, posterior, factor, bounds, config, rng=None, max_depth=None):
        n = factor.n
        if len(bounds) != n or posterior.n != n:
            raise ValueError("factor, posterior and bounds dimensions differ")
        fwd = factor.perm.forward
        self.factor = factor
        self.config = config
        self.mean = posterior.mean[fwd]
        self.a = bounds.a[fwd]
        self.b = bounds.b[fwd]
        if np.any(self.a >= self.b):
            bad = int(np.flatnonzero(self.a >= self.b)[0])
            raise EmptyInterval(f"empty interval at node {int(fwd[bad])}")
        self.n = n
        self.N = config.n_particles
        self.max_depth = n if max_depth is None else int(max_depth)
        self.rng = config.rng(0) if rng is None else rng
        self.D = np.empty((self.max_depth, self.N))
        self.logw = np.zeros(self.N)
        self.log_const = 0.0
        self.relvar = 0.0
        self.depth = 0
        self.n_resamples = 0
        self.degenerate = False
        L = factor.L
        self._Lp = L.indptr
        self._Li = L.indices
        self._Lx = L.data
        self._dense = factor.dense

    # -- summaries --
    def _normalised(self):
        m = self.logw.max()
        if not np.isfinite(m):
            return None, -np.inf
        return np.exp(self.logw - m), m

    @property
    def ess(self):
        w, _ = self._normalised()
        if w is None:
            return 0.0
        return float(w.sum() ** 2 / np.dot(w, w))

    @property
    def estimate(self):
        w, m = self._normalised()
        if w is None:
            return 0.0
        return float(min(1.0, np.exp(self.log_const + m + np.log(w.mean()))))

    @property
    def std_error(self):
        w, _ = self._normalised()
        if w is None:
            return 0.0
        mu = w.mean()
        rv = self.relvar + w.var() / mu**2 / self.N
        return float(self.estimate * np.sqrt(rv))

    def result(self):
        return ProbabilityEstimate(self.estimate, self.std_error, self.ess, "GHK")

    # -- stepping --
    def _shift(self, i, r):
        # sum_{j>i} L_ji (x_j - mu_j) for every particle
        if r == 0:
            return np.zeros(self.N)
        if self._dense is not None:
            col = self._dense[i + 1:, i][::-1]
            return col @ self.D[:r]
        start, end = self._Lp[i] + 1, self._Lp[i + 1]
        shift = np.empty(self.N)
        rows = (self.n - 1) - self._Li[start:end]
        _kernels.accumulate_shift(self._Lx[start:end], rows, self.D, shift)
        return shift

    def step(self):
        if self.depth >= self.max_depth:
            raise ValueError("particle system already at full depth")
        r = self.depth
        i = self.n - 1 - r
        u = self.rng.random(self.N)
        if self.degenerate:
            self.D[r] = 0.0
            self.depth += 1
            return
        lii = self._Lx[self._Lp[i]]
        shift = self._shift(i, r)
        with np.errstate(invalid="ignore"):
            lo = lii * (self.a[i] - self.mean[i])
            hi = lii * (self.b[i] - self.mean[i])
        alive = _kernels.truncated_step(lo, hi, shift, u, lii, self.logw, self.D[r])
        self.depth += 1
        if alive == 0:
            self.degenerate = True
            return
        if self.config.resample and self.ess < self.config.ess_fraction * self.N:
            self._resample()

    def _resample(self):
        w, m = self._normalised()
        mu = w.mean()
        self.relvar += w.var() / mu**2 / self.N
        self.log_const += m + np.log(mu)
        idx = systematic_resample(w, self.rng.random())
        self.D[: self.depth] = self.D[: self.depth, idx]
        self.logw = np.zeros(self.N)
        self.n_resamples += 1


def ghk_init(posterior, factor, bounds, config, rng=None, max_depth=None):
    """Particle system after integrating the last-ordered variable.

    At depth one every particle carries the exact univariate probability
    as its weight, so the estimate is exact with zero standard error.
    """
    state = ParticleSystem(posterior, factor, bounds, config, rng=rng, max_depth=max_depth)
    state.step()
    return state


def ghk_extend(state, count=1):
    """Integrate ``count`` further variables (mutates and returns ``state``)."""
    if state.depth + count > state.max_depth:
        raise ValueError(
            f"cannot extend depth {state.depth} by {count}: limit is {state.max_depth}"
        )
    for _ in range(count):
        state.step()
    return state


def ghk_probability(posterior, bounds, config=None, perm=None, factor=None):
    """Full-depth GHK estimate of ``P(a <= x <= b)``."""
    config = IntegrationConfig() if config is None else config
    if factor is None:
        factor = gmrf.cholesky(posterior, perm)
    state = ghk_init(posterior, factor, bounds, config)
    ghk_extend(state, posterior.n - 1)
    return state.result()


# -- quasi Monte Carlo -----------------------------------------------------

def _primes(count):
    limit = max(16, int(count * (np.log(count + 2) + np.log(np.log(count + 3)) + 3)))
    while True:
        sieve = np.ones(limit + 1, dtype=bool)
        sieve[:2] = False
        for p in range(2, int(limit**0.5) + 1):
            if sieve[p]:
                sieve[p * p::p] = False
        primes = np.flatnonzero(sieve)
        if primes.size >= count:
            return primes[:count]
        limit *= 2


def qmc_genz(mean, covariance, bounds, config=None):
    """Randomised-lattice QMC estimate of a dense Gaussian box probability.

    Separation of variables maps the problem to ``[0,1]^{n-1}``; points
    come from a Richtmyer lattice ``frac(k sqrt(p_j) + shift)`` with the
    baker's (tent) periodisation. The standard error is taken over the
    independent random shifts.
    """
    config = IntegrationConfig() if config is None else config
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64)
    n = mean.size
    if n > 2000:
        raise ValueError("qmc_genz supports n <= 2000")
    try:
        C = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise gmrf.NotPositiveDefinite(0) from None
    a = bounds.a - mean
    b = bounds.b - mean
    if np.any(a >= b):
        raise EmptyInterval("empty integration box")
    first = float(interval_mass(a[0] / C[0, 0], b[0] / C[0, 0]))
    if n == 1:
        return ProbabilityEstimate(first, 0.0, float("inf"), "QMC-richtmyer")
    M = config.qmc_points
    R = config.qmc_randomizations
    gen = np.sqrt(_primes(n - 1).astype(np.float64))
    k = np.arange(1, M + 1, dtype=np.float64)[:, None]
    base = np.mod(k * gen[None, :], 1.0)
    rng = config.rng(7)
    values = np.empty(R)
    for r in range(R):
        pts = np.mod(base + rng.random(n - 1)[None, :], 1.0)
        w = np.abs(2.0 * pts - 1.0)
        Y = np.empty((M, n - 1))
        lo = np.full(M, a[0] / C[0, 0])
        hi = np.full(M, b[0] / C[0, 0])
        f = np.full(M, first)
        for i in range(1, n):
            Y[:, i - 1] = truncnorm_std(lo, hi, w[:, i - 1])
            s = Y[:, :i] @ C[i, :i]
            lo = (a[i] - s) / C[i, i]
            hi = (b[i] - s) / C[i, i]
            f *= interval_mass(lo, hi)
        values[r] = f.mean()
    value = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(R))
    return ProbabilityEstimate(value, se, float(M * R), "QMC-richtmyer")


def mc_bruteforce(posterior, bounds, n_samples, rng, factor=None, chunk=20000):
    """Fraction of exact joint draws that land in the box."""
    if np.all(np.isneginf(bounds.a)) and np.all(np.isposinf(bounds.b)):
        return ProbabilityEstimate(1.0, 0.0, float(n_samples), "MC")
    if factor is None:
        factor = gmrf.cholesky(posterior, gmrf.fill_reducing_permutation(posterior))
    hits = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        X = gmrf.sample(posterior, factor, rng, size=m)
        hits += int(np.count_nonzero(np.all((X > bounds.a) & (X < bounds.b), axis=1)))
        done += m
    p = hits / n_samples
    return ProbabilityEstimate(p, float(np.sqrt(p * (1 - p) / n_samples)), float(n_samples), "MC")
