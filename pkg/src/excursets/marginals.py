"""Per-node Gaussian mixture marginals."""

from __future__ import annotations

import numpy as np
import scipy.special as sc

DEGENERATE_SD = 1e-12


class QuantileOverflow(FloatingPointError):
    pass


class MixtureMarginals:
    """Marginal law of each node as a finite Gaussian mixture.

    Parameters
    ----------
    means, sds : array_like, shape (k, n)
        Component means and standard deviations per node.
    weights : array_like, shape (k,)
        Non-negative component weights; normalised on construction.
    """

    def __init__(self, means, sds, weights):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        sds = np.atleast_2d(np.asarray(sds, dtype=np.float64))
        w = np.asarray(weights, dtype=np.float64).ravel()
        if means.shape != sds.shape or means.shape[0] != w.size:
            raise ValueError("means, sds and weights have inconsistent shapes")
        if np.any(sds < 0) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("sds and weights must be non-negative, weights not all zero")
        self.means = means
        self.sds = sds
        self.weights = w / w.sum()

    @classmethod
    def gaussian(cls, mean, sd):
        return cls(np.asarray(mean)[None, :], np.asarray(sd)[None, :], [1.0])

    @property
    def n(self):
        return self.means.shape[1]

    @property
    def k(self):
        return self.means.shape[0]

    @property
    def mean(self):
        return self.weights @ self.means

    @property
    def sd(self):
        second = self.weights @ (self.sds**2 + self.means**2)
        return np.sqrt(np.maximum(second - self.mean**2, 0.0))

    def _z(self, x):
        x = np.broadcast_to(np.asarray(x, dtype=np.float64), (self.n,))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (x[None, :] - self.means) / self.sds
        # point-mass components: the value itself counts as "below or at"
        z = np.where(np.isnan(z), np.inf, z)
        return z

    def cdf(self, x):
        """``P(X_i <= x_i)`` for every node."""
        return self.weights @ sc.ndtr(self._z(x))

    def sf(self, x):
        """``P(X_i > x_i)``, accurate in the upper tail."""
        return self.weights @ sc.ndtr(-self._z(x))

    def pdf(self, x):
        z = self._z(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.exp(-0.5 * z**2) / (np.sqrt(2 * np.pi) * self.sds)
        dens = np.where(np.isfinite(dens), dens, 0.0)
        return self.weights @ dens

    def quantile(self, rho, tol=1e-10):
        """Node-wise ``q`` with ``cdf(q) = rho`` via bisection and secant polish.

        ``rho`` may be scalar or a length-n vector.
        """
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (self.n,)).copy()
        if np.any((rho <= 0) | (rho >= 1)):
            raise QuantileOverflow("quantile level must lie strictly in (0, 1)")
        zq = sc.ndtri(rho)
        comp = self.means + self.sds * zq[None, :]
        lo = comp.min(axis=0) - 1e-12 * (1 + np.abs(comp.min(axis=0)))
        hi = comp.max(axis=0) + 1e-12 * (1 + np.abs(comp.max(axis=0)))
        if self.k == 1:
            return comp[0]
        flo = self.cdf(lo) - rho
        fhi = self.cdf(hi) - rho
        for _ in range(200):
            width = hi - lo
            if np.all(width <= tol * (1 + np.abs(lo))):
                break
            mid = 0.5 * (lo + hi)
            fm = self.cdf(mid) - rho
            left = fm >= 0
            hi = np.where(left, mid, hi)
            fhi = np.where(left, fm, fhi)
            lo = np.where(left, lo, mid)
            flo = np.where(left, flo, fm)
            if np.all(hi - lo <= 1e-6 * (1 + np.abs(lo))):
                break
        # secant polish inside the bracket
        x = 0.5 * (lo + hi)
        for _ in range(8):
            denom = fhi - flo
            with np.errstate(divide="ignore", invalid="ignore"):
                xs = hi - fhi * (hi - lo) / denom
            xs = np.where(np.isfinite(xs) & (xs > lo) & (xs < hi), xs, 0.5 * (lo + hi))
            fs = self.cdf(xs) - rho
            left = fs >= 0
            hi = np.where(left, xs, hi)
            fhi = np.where(left, fs, fhi)
            lo = np.where(left, lo, xs)
            flo = np.where(left, flo, fs)
            x = xs
            if np.all(np.abs(fs) <= tol * 1e-2) or np.all(hi - lo <= tol * (1 + np.abs(lo))):
                break
        return x
