"""Handling hyperparameter uncertainty: EB, QC and NI.

A :class:`ParamConfigSet` holds weighted hyperparameter configurations,
each with its conditional Gaussian posterior. The three strategies are

* EB: plug in the configuration with the largest weight;
* QC: integrate under that configuration but move each bound so that its
  marginal probability matches the mixture marginal;
* NI: weighted sum over all configurations.

All configurations are integrated with the same random stream, so a set of
identical configurations reproduces the single-configuration answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special as sc

from . import excursions as ex
from . import families as fam
from . import gauss_prob as gp
from . import gmrf
from .marginals import MixtureMarginals, QuantileOverflow

__all__ = [
    "MixtureMarginals",
    "ParamConfig",
    "ParamConfigSet",
    "QuantileOverflow",
    "eb_probability",
    "qc_bounds",
    "ni_probability",
    "eb_excursion",
    "qc_excursion",
    "ni_excursion",
    "run_method",
]


@dataclass(frozen=True)
class ParamConfig:
    theta: dict
    weight: float
    posterior: gmrf.GaussianPosterior


@dataclass(frozen=True)
class ParamConfigSet:
    """Weighted configurations; weights are normalised to sum to one."""

    configs: tuple
    _sd_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        configs = tuple(self.configs)
        if not configs:
            raise ValueError("a configuration set needs at least one configuration")
        w = np.array([c.weight for c in configs], dtype=np.float64)
        if np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be finite, non-negative and not all zero")
        n = {c.posterior.n for c in configs}
        if len(n) != 1:
            raise ValueError("all configurations must share the node set")
        w = w / w.sum()
        configs = tuple(ParamConfig(dict(c.theta), float(wi), c.posterior) for c, wi in zip(configs, w))
        object.__setattr__(self, "configs", configs)

    @classmethod
    def single(cls, posterior, theta=None):
        return cls((ParamConfig(theta or {}, 1.0, posterior),))

    @property
    def k(self):
        return len(self.configs)

    @property
    def n(self):
        return self.configs[0].posterior.n

    @property
    def weights(self):
        return np.array([c.weight for c in self.configs])

    @property
    def eb_index(self):
        """Configuration used by EB and QC: the largest weight (first on ties)."""
        return int(np.argmax(self.weights))

    def sds(self, i):
        if i not in self._sd_cache:
            var = gmrf.marginal_variances(self.configs[i].posterior)
            self._sd_cache[i] = np.sqrt(np.maximum(var, 0.0))
        return self._sd_cache[i]

    def mixture(self):
        means = np.stack([c.posterior.mean for c in self.configs])
        sds = np.stack([self.sds(i) for i in range(self.k)])
        return MixtureMarginals(means, sds, self.weights)


def _factor(posterior):
    return gmrf.cholesky(posterior, gmrf.fill_reducing_permutation(posterior))


def eb_probability(config_set, bounds, config=None, index=None):
    """Box probability under a single configuration (default: largest weight)."""
    config = gp.IntegrationConfig() if config is None else config
    i = config_set.eb_index if index is None else int(index)
    post = config_set.configs[i].posterior
    return gp.ghk_probability(post, bounds, config, factor=_factor(post))


def _map_level(level, mixture, mean0, sd0):
    # x0 level with the same marginal probability as the mixture at `level`
    cdf = mixture.cdf(level)
    sf = mixture.sf(level)
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = mean0 + sd0 * sc.ndtri(cdf)
        upper = mean0 - sd0 * sc.ndtri(sf)
    out = np.where(cdf <= 0.5, lower, upper)
    overflow = (cdf <= 0.0) | (sf <= 0.0)
    return out, overflow


def qc_bounds(mixture, gaussian, bounds, strict=False, return_flags=False):
    """Quantile-corrected bounds for integrating under ``gaussian``.

    A finite bound ``a_i`` becomes ``mu0_i + sd0_i * Phi^{-1}(G_i(a_i))``
    with ``G_i`` the mixture CDF, so the marginal probability of every
    constraint is that of the mixture. Bounds whose mixture probability is
    exactly 0 or 1 map to an infinite level; ``strict=True`` turns that
    into :class:`QuantileOverflow`.
    """
    if mixture.n != gaussian.n or len(bounds) != gaussian.n:
        raise ValueError("mixture, gaussian and bounds must share the dimension")
    mean0 = gaussian.mean
    sd0 = np.sqrt(np.maximum(gmrf.marginal_variances(gaussian), 0.0))
    a = bounds.a.copy()
    b = bounds.b.copy()
    flags = np.zeros(gaussian.n, dtype=bool)
    for arr in (a, b):
        fin = np.isfinite(arr)
        if np.any(fin):
            mapped, over = _map_level(np.where(fin, arr, 0.0), mixture, mean0, sd0)
            arr[fin] = mapped[fin]
            flags |= fin & over
    if strict and np.any(flags):
        raise QuantileOverflow(f"mixture probability is 0 or 1 at node {int(np.flatnonzero(flags)[0])}")
    out = gp.Bounds(a, b)
    return (out, flags) if return_flags else out


def ni_probability(config_set, bounds, config=None):
    """Weighted sum of per-configuration GHK estimates."""
    config = gp.IntegrationConfig() if config is None else config
    vals = np.empty(config_set.k)
    ses = np.empty(config_set.k)
    ess = np.empty(config_set.k)
    for i, c in enumerate(config_set.configs):
        est = gp.ghk_probability(c.posterior, bounds, config, factor=_factor(c.posterior))
        vals[i], ses[i], ess[i] = est.value, est.std_error, est.n_effective
    w = config_set.weights
    # common random numbers correlate the terms; w @ ses bounds the se for any correlation
    return gp.ProbabilityEstimate(float(w @ vals), float(w @ ses), float(w @ ess), "GHK-NI")


def eb_excursion(problem, config_set):
    post = config_set.configs[config_set.eb_index].posterior
    summary = fam.marginal_summary(post, problem.u)
    return ex.solve(problem, ex.gaussian_models(post, problem.u), summary, method="eb")


def qc_excursion(problem, config_set):
    """Sequential pass under the EB configuration with quantile-corrected levels;
    the admission order and probability bounds use the mixture marginals."""
    i = config_set.eb_index
    post = config_set.configs[i].posterior
    mix = config_set.mixture()
    summary = fam.marginal_summary(mix, problem.u)
    levels, _ = _map_level(np.full(post.n, float(problem.u)), mix, post.mean, config_set.sds(i))
    return ex.solve(problem, [ex.Model(post, levels, 1.0)], summary, method="qc")


def ni_excursion(problem, config_set):
    """All configurations in lockstep over one ordering from the mixture marginals."""
    summary = fam.marginal_summary(config_set.mixture(), problem.u)
    models = [ex.Model(c.posterior, np.full(c.posterior.n, float(problem.u)), c.weight)
              for c in config_set.configs]
    return ex.solve(problem, models, summary, method="ni")


def run_method(method, problem, config_set):
    if method == "eb":
        return eb_excursion(problem, config_set)
    if method == "qc":
        return qc_excursion(problem, config_set)
    if method == "ni":
        return ni_excursion(problem, config_set)
    raise ValueError(f"unknown method {method!r}")
