"""Excursion sets, level-avoiding sets, contour regions and their functions.

The workhorse is a single sequential pass: nodes are admitted in the order
given by a parametric family and the joint probability of the growing set
is tracked by one GHK particle system per Gaussian model. Mixture
posteriors simply run several systems in lockstep and combine them with
their weights.

Post-processing of the running probabilities ``P_k``:

* each ``P_k`` is clipped to the interval between the union bound
  ``1 - sum_j q_j`` and the smallest marginal ``min_j p_j`` of the prefix;
* a running minimum makes the sequence non-increasing, so thresholding it
  always yields a prefix of the admission order;
* near the crossing of ``1 - alpha`` the prefix is recomputed with four
  times as many particles when any value in the window is within three
  standard errors of the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import families as fam
from . import gauss_prob as gp
from . import gmrf

CONTOUR = "contour"
STREAM_MAIN = 1
STREAM_REFINE = 2
REFINE_WINDOW = 10
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ExcursionProblem:
    """What to compute.

    ``direction`` is ``positive``, ``negative``, ``avoid`` or ``contour``;
    the last two share the avoiding computation and differ only in what is
    reported. ``family`` defaults to the one-parameter family matching the
    direction.
    """

    u: float
    alpha: float
    direction: str = fam.POSITIVE
    family: fam.Family | None = None
    config: gp.IntegrationConfig = field(default_factory=gp.IntegrationConfig)
    p_floor: float = 1e-10
    refine: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.direction not in (*fam.DIRECTIONS, CONTOUR):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.family is None:
            kind = fam.AVOID_ONE if self.avoiding else fam.ONE
            object.__setattr__(self, "family", fam.Family(kind, self.family_direction, self.u))
        elif self.family.direction != self.family_direction or self.family.u != self.u:
            raise ValueError("family direction/level do not match the problem")

    @property
    def avoiding(self):
        return self.direction in (fam.AVOID, CONTOUR)

    @property
    def family_direction(self):
        return fam.AVOID if self.avoiding else self.direction


@dataclass(frozen=True)
class Trace:
    """Per-admission record. ``P_raw``/``se`` come from the integrator,
    ``P`` is the post-processed (clipped, monotone) value."""

    nodes: np.ndarray
    sides: np.ndarray
    P_raw: np.ndarray
    se: np.ndarray
    P: np.ndarray
    n_class1: int
    refined_to: int


@dataclass(frozen=True)
class ExcursionResult:
    """Excursion (or avoidance) function with the set at ``alpha``.

    ``F`` holds the excursion function for excursion problems and the level
    avoidance function for avoiding problems. ``side`` is +1/-1 for nodes
    that carry a side (0 when never admitted).
    """

    F: np.ndarray
    alpha: float
    u: float
    direction: str
    side: np.ndarray
    marginal_p: np.ndarray
    U1: np.ndarray
    L2: np.ndarray
    trace: Trace
    family_kind: str
    family_param: float | None = None
    search: tuple = ()
    method: str = "eb"

    @property
    def n(self):
        return self.F.size

    def members(self, alpha=None):
        return self.F >= 1.0 - (self.alpha if alpha is None else alpha)

    def excursion_set(self, alpha=None):
        return set_from_function(self.F, self.alpha if alpha is None else alpha)

    @property
    def contour_function(self):
        return 1.0 - self.F

    def avoiding_sets(self, alpha=None):
        """``(M+, M-)`` node index arrays (avoiding problems)."""
        m = self.members(alpha)
        return np.flatnonzero(m & (self.side > 0)), np.flatnonzero(m & (self.side < 0))

    def contour_region(self, alpha=None):
        return np.flatnonzero(~self.members(alpha))


def set_from_function(F, alpha):
    """Nodes with ``F >= 1 - alpha``; at ``alpha = 1`` nodes with ``F > 0``."""
    F = np.asarray(F, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha >= 1.0:
        return np.flatnonzero(F > 0)
    return np.flatnonzero(F >= 1.0 - alpha)


# -- models ----------------------------------------------------------------

@dataclass(frozen=True)
class Model:
    """One Gaussian component of the posterior with its integration levels."""

    posterior: gmrf.GaussianPosterior
    levels: np.ndarray
    weight: float = 1.0


def gaussian_models(posterior, u):
    return [Model(posterior, np.full(posterior.n, float(u)), 1.0)]


class _Lockstep:
    """Particle systems of all models advancing through one admission order.

    Zero-weight models are skipped.
    """

    def __init__(self, models, admitted, sides, perm, config, stream, depth):
        self.systems = []
        w = np.array([m.weight for m in models], dtype=np.float64)
        keep = w > 0
        models = [m for m, k in zip(models, keep) if k]
        self.weights = w[keep] / w[keep].sum()
        K = depth
        nodes = admitted[:K]
        for m in models:
            post = m.posterior
            lev = m.levels[nodes]
            a = np.where(sides[:K] > 0, lev, -np.inf)
            b = np.where(sides[:K] < 0, lev, np.inf)
            if post.is_sparse:
                full_a = np.full(post.n, -np.inf)
                full_b = np.full(post.n, np.inf)
                full_a[nodes] = a
                full_b[nodes] = b
                factor = gmrf.cholesky(post, perm)
                bnd = gp.Bounds(full_a, full_b)
            else:
                post = post.subset(nodes)
                factor = gmrf.cholesky(post, gmrf.Permutation.from_order(np.arange(K)[::-1]))
                bnd = gp.Bounds(a, b)
            # common random numbers across models
            rng = config.rng(stream)
            self.systems.append(gp.ParticleSystem(post, factor, bnd, config, rng=rng, max_depth=K))

    def step(self):
        vals = np.empty(len(self.systems))
        ses = np.empty(len(self.systems))
        for c, s in enumerate(self.systems):
            s.step()
            vals[c] = s.estimate
            ses[c] = s.std_error
        # shared random stream: the terms are correlated, so use the bound w @ se
        return float(self.weights @ vals), float(self.weights @ ses)


def _postprocess(P_raw, p_adm, q_adm, n1):
    upper = np.minimum.accumulate(p_adm)
    lower = 1.0 - np.cumsum(q_adm)
    P = np.clip(P_raw, lower, upper)
    P = np.clip(P, 0.0, 1.0)
    if n1 > 0:
        P[:n1] = P[n1 - 1]
    return np.minimum.accumulate(P)


def _crossing(P, se, target, n1):
    start = max(n1 - 1, 0)
    below = np.flatnonzero(P[start:] + se[start:] < target)
    return None if below.size == 0 else int(below[0]) + start


@dataclass
class _Plan:
    admitted: np.ndarray
    sides: np.ndarray
    n_class1: int
    perm: gmrf.Permutation
    p_adm: np.ndarray
    q_adm: np.ndarray


def _plan(models, summary, ordering, set_bounds, p_floor):
    """Admission plan: class 1, then the family order truncated at the first
    node whose side probability is below ``p_floor``."""
    n = summary.n
    deg = summary.degenerate
    side = ordering.side.copy()
    side[set_bounds.L2] = set_bounds.side[set_bounds.L2]
    p_side = np.where(side > 0, summary.p_pos, summary.p_neg)
    q_side = np.where(side > 0, summary.p_neg, summary.p_pos)
    cand = np.zeros(n, dtype=bool)
    seq = ordering.order[~deg[ordering.order] & ~set_bounds.L2[ordering.order]]
    low = np.flatnonzero(p_side[seq] < p_floor)
    cut = seq.size if low.size == 0 else int(low[0])
    cand[seq[:cut]] = True
    cand |= set_bounds.L2 & ~deg
    sparse = [m.posterior for m in models if m.posterior.is_sparse]
    admitted, n1, _, perm, reordered = fam.build_ordering(
        set_bounds, ordering, sparse[0] if sparse else None, candidates=cand
    )
    block = n1 if reordered else 0
    return _Plan(admitted, side[admitted], block, perm, p_side[admitted], q_side[admitted])


def _integrate(models, plan, config, stream, stop=None, depth=None):
    """Run the lockstep pass over the first ``depth`` admissions;
    ``stop(t, P_raw, se)`` may end it early."""
    K = plan.admitted.size if depth is None else depth
    P = np.empty(K)
    se = np.empty(K)
    if K == 0:
        return P, se
    lock = _Lockstep(models, plan.admitted, plan.sides, plan.perm, config, stream, K)
    for t in range(K):
        P[t], se[t] = lock.step()
        if stop is not None and stop(t, P[: t + 1], se[: t + 1]):
            return P[: t + 1], se[: t + 1]
    return P, se


def _run(problem, models, summary, ordering, set_bounds, full=True):
    """Sequential pass with stopping, refinement and post-processing."""
    plan = _plan(models, summary, ordering, set_bounds, problem.p_floor)
    cfg = problem.config
    target = 1.0 - problem.alpha
    n1 = plan.n_class1
    K = plan.admitted.size
    state = {"cross": None}

    def stop(t, P_raw, se):
        if t < max(n1 - 1, 0):
            return False
        if P_raw[t] < problem.p_floor:
            return True
        Pp = _postprocess(P_raw, plan.p_adm[: t + 1], plan.q_adm[: t + 1], min(n1, t + 1))
        if state["cross"] is None:
            state["cross"] = _crossing(Pp, se, target, min(n1, t + 1))
        if full or state["cross"] is None:
            return False
        return t >= state["cross"] + REFINE_WINDOW

    P_raw, se = _integrate(models, plan, cfg, STREAM_MAIN, stop)
    T = P_raw.size
    P = _postprocess(P_raw, plan.p_adm[:T], plan.q_adm[:T], min(n1, T))
    refined_to = 0
    c = _crossing(P, se, target, min(n1, T))
    if problem.refine and c is not None:
        lo = max(c - REFINE_WINDOW, n1 - 1 if n1 else 0)
        hi = min(c + REFINE_WINDOW, T - 1)
        near = np.abs(P[lo:hi + 1] - target) <= 3.0 * se[lo:hi + 1]
        if np.any(near):
            big = replace(cfg, n_particles=4 * cfg.n_particles)
            Pr, ser = _integrate(models, plan, big, STREAM_REFINE, depth=hi + 1)
            P_raw = P_raw.copy()
            se = se.copy()
            P_raw[: hi + 1] = Pr
            se[: hi + 1] = ser
            refined_to = hi + 1
            P = _postprocess(P_raw, plan.p_adm[:T], plan.q_adm[:T], min(n1, T))
    n = summary.n
    F = np.zeros(n)
    F[plan.admitted[:T]] = P
    side = np.zeros(n, dtype=np.int8)
    side[plan.admitted] = plan.sides
    _degenerate_fill(F, side, summary, problem)
    trace = Trace(plan.admitted[:T], plan.sides[:T], P_raw, se, P, n1, refined_to)
    return F, side, trace


def _degenerate_fill(F, side, summary, problem):
    d = np.flatnonzero(summary.degenerate)
    if d.size == 0:
        return
    m = summary.mean[d]
    u = problem.u
    if problem.direction == fam.POSITIVE:
        F[d] = (m > u).astype(float)
        side[d] = 1
    elif problem.direction == fam.NEGATIVE:
        F[d] = (m < u).astype(float)
        side[d] = -1
    else:
        F[d] = (m != u).astype(float)
        side[d] = np.sign(m - u).astype(np.int8)


def _size(F, alpha):
    return int(np.count_nonzero(F >= 1.0 - alpha))


def solve(problem, models, summary, method="eb"):
    """Run the problem's family on a set of weighted Gaussian models."""
    family = problem.family
    set_bounds = fam.bounds(summary, problem.alpha, problem.family_direction)

    def evaluate(param, full):
        ordering = fam.admission_order(family.with_param(param), summary)
        return _run(problem, models, summary, ordering, set_bounds, full=full)

    search = []
    best_param = None
    if not family.two_parameter:
        F, side, trace = evaluate(None, True)
    else:
        lo, hi = family.bracket(summary)
        null = family.null_param
        cache = {}

        def size(v):
            if v not in cache:
                cache[v] = _size(evaluate(v, False)[0], problem.alpha)
                search.append((float(v), cache[v]))
            return cache[v]

        def better(a, b):
            # larger set wins, ties go to the smaller parameter
            sa, sb = size(a), size(b)
            return sa > sb or (sa == sb and a < b)

        best = null
        size(null)
        if hi > lo:
            x1 = hi - GOLDEN * (hi - lo)
            x2 = lo + GOLDEN * (hi - lo)
            width0 = hi - lo
            for cand in (x1, x2):
                if better(cand, best):
                    best = cand
            for _ in range(30):
                if hi - lo < 1e-3 * width0:
                    break
                if size(x1) >= size(x2):
                    hi, x2 = x2, x1
                    x1 = hi - GOLDEN * (hi - lo)
                    if better(x1, best):
                        best = x1
                else:
                    lo, x1 = x1, x2
                    x2 = lo + GOLDEN * (hi - lo)
                    if better(x2, best):
                        best = x2
        # final choice between the search optimum and the one-parameter slice
        F, side, trace = evaluate(null, True)
        best_param = null
        if best != null:
            F2, side2, trace2 = evaluate(best, True)
            s1, s2 = _size(F, problem.alpha), _size(F2, problem.alpha)
            if s2 > s1 or (s2 == s1 and best < null):
                F, side, trace, best_param = F2, side2, trace2, best
    p_side, _, _ = fam.side_probabilities(summary, problem.family_direction)
    if problem.avoiding:
        p_side = np.where(side < 0, summary.p_neg, np.where(side > 0, summary.p_pos, p_side))
    return ExcursionResult(
        F=F, alpha=problem.alpha, u=problem.u, direction=problem.direction, side=side,
        marginal_p=p_side, U1=set_bounds.U1, L2=set_bounds.L2, trace=trace,
        family_kind=family.kind, family_param=best_param, search=tuple(search), method=method,
    )


def excursion_one_param(problem, posterior):
    """Excursion function and set from one sequential pass (known parameters)."""
    if problem.family.two_parameter or problem.avoiding:
        raise ValueError("excursion_one_param needs a one-parameter excursion family")
    summary = fam.marginal_summary(posterior, problem.u)
    return solve(problem, gaussian_models(posterior, problem.u), summary)


def excursion_two_param(problem, posterior):
    """Golden-section search over the family's secondary parameter."""
    if not problem.family.two_parameter or problem.avoiding:
        raise ValueError("excursion_two_param needs a two-parameter excursion family")
    summary = fam.marginal_summary(posterior, problem.u)
    return solve(problem, gaussian_models(posterior, problem.u), summary)


def level_avoid(problem, posterior):
    """Level-avoiding pair, avoidance function and contour region."""
    if not problem.avoiding:
        raise ValueError("level_avoid needs direction 'avoid' or 'contour'")
    summary = fam.marginal_summary(posterior, problem.u)
    return solve(problem, gaussian_models(posterior, problem.u), summary)


def excursion(problem, posterior):
    """Dispatch on the problem's family and direction."""
    summary = fam.marginal_summary(posterior, problem.u)
    return solve(problem, gaussian_models(posterior, problem.u), summary)
