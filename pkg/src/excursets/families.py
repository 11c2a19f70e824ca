"""Parametric families of candidate sets and the node orderings they induce.

Every family is reduced to an *admission key* per node: a probability of
falling on the wrong side of the relevant threshold. Nodes are admitted in
increasing key order (ties by node index), so a family's sets are exactly
the prefixes of that order. Keys are computed from accurately evaluated
tail probabilities, never as ``1 - p``, so that a two-parameter family
evaluated at its one-parameter slice reproduces the one-parameter order
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import gmrf
from .marginals import DEGENERATE_SD, MixtureMarginals

ONE = "one"
TWO_LEVEL = "two-level"
TWO_SMOOTH = "two-smooth"
AVOID_ONE = "avoid1"
AVOID_TWO = "avoid2"
KINDS = (ONE, TWO_LEVEL, TWO_SMOOTH, AVOID_ONE, AVOID_TWO)

POSITIVE = "positive"
NEGATIVE = "negative"
AVOID = "avoid"
DIRECTIONS = (POSITIVE, NEGATIVE, AVOID)


@dataclass(frozen=True)
class MarginalSummary:
    """Marginal exceedance information at level ``u``.

    ``p_pos[i] = P(x_i > u)`` and ``p_neg[i] = P(x_i < u)``, both computed
    directly from the marginal law. Degenerate nodes (sd below 1e-12) are
    flagged and carry 0/1 probabilities from comparing the mean with u.
    """

    u: float
    mean: np.ndarray
    sd: np.ndarray
    p_pos: np.ndarray
    p_neg: np.ndarray
    degenerate: np.ndarray
    marginals: MixtureMarginals

    @property
    def n(self):
        return self.mean.size

    def exceed(self, v):
        """``P(x_i > v)``."""
        return self._fix(self.marginals.sf(v), v, 1)

    def below(self, v):
        """``P(x_i < v)`` (equal to ``P(x_i <= v)`` off degenerate nodes)."""
        return self._fix(self.marginals.cdf(v), v, -1)

    def quantile(self, rho):
        return self.marginals.quantile(rho)

    def _fix(self, p, v, sign):
        d = self.degenerate
        if np.any(d):
            m = self.mean[d]
            vv = np.broadcast_to(np.asarray(v, dtype=np.float64), (self.n,))[d]
            p = p.copy()
            p[d] = np.where(sign * (m - vv) > 0, 1.0, 0.0)
        return p


def marginal_summary(source, u):
    """Marginals of a :class:`~excursets.gmrf.GaussianPosterior` or a
    :class:`~excursets.marginals.MixtureMarginals` at level ``u``."""
    if isinstance(source, gmrf.GaussianPosterior):
        sd = np.sqrt(np.maximum(gmrf.marginal_variances(source), 0.0))
        mix = MixtureMarginals.gaussian(source.mean, sd)
    elif isinstance(source, MixtureMarginals):
        mix = source
    else:
        raise TypeError("source must be a GaussianPosterior or MixtureMarginals")
    mean = mix.mean
    sd = mix.sd
    degenerate = sd < DEGENERATE_SD
    s = MarginalSummary(float(u), mean, sd, None, None, degenerate, mix)
    p_pos = s.exceed(u)
    p_neg = s.below(u)
    object.__setattr__(s, "p_pos", p_pos)
    object.__setattr__(s, "p_neg", p_neg)
    return s


@dataclass(frozen=True)
class Family:
    """A parametric family of candidate excursion sets.

    Parameters
    ----------
    kind : str
        One of ``one``, ``two-level``, ``two-smooth``, ``avoid1``, ``avoid2``.
    direction : str
        ``positive`` or ``negative`` for excursion families, ``avoid`` for
        the avoiding families.
    u : float
        Level of the excursion.
    param : float, optional
        Secondary parameter: the level ``v`` (two-level), the radius
        (two-smooth) or the log ratio of the two side parameters (avoid2).
        ``None`` selects the one-parameter slice.
    coords : ndarray, optional
        Node coordinates, shape (n, d); required for ``two-smooth``.
    """

    kind: str
    direction: str
    u: float
    param: float | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        avoid_kind = self.kind in (AVOID_ONE, AVOID_TWO)
        if avoid_kind != (self.direction == AVOID):
            raise ValueError("avoiding families need direction 'avoid' and vice versa")
        if self.kind == TWO_SMOOTH:
            if self.coords is None:
                raise ValueError("smoothing family needs node coordinates")
            c = np.asarray(self.coords, dtype=np.float64)
            object.__setattr__(self, "coords", c.reshape(c.shape[0], -1))
            if self.param is not None and self.param < 0:
                raise ValueError("smoothing radius must be non-negative")

    @property
    def two_parameter(self):
        return self.kind in (TWO_LEVEL, TWO_SMOOTH, AVOID_TWO)

    @property
    def null_param(self):
        """Secondary parameter at which the family is the one-parameter one."""
        return {TWO_LEVEL: self.u, TWO_SMOOTH: 0.0, AVOID_TWO: 0.0}.get(self.kind)

    def with_param(self, value):
        return replace(self, param=None if value is None else float(value))

    def bracket(self, summary):
        """Search interval for the secondary parameter."""
        if self.kind == TWO_LEVEL:
            spread = 3.0 * float(np.max(summary.sd))
            return self.u - spread, self.u + spread
        if self.kind == TWO_SMOOTH:
            return 0.0, 0.5 * domain_diameter(self.coords)
        if self.kind == AVOID_TWO:
            return -5.0, 5.0
        raise ValueError(f"{self.kind} has no secondary parameter")


@dataclass(frozen=True)
class NodeOrdering:
    """Admission order plus per-node side tags.

    ``order`` lists all nodes, earliest admission first. ``key[i]`` is the
    admission key (smaller is earlier) and ``side[i]`` is +1 or -1.
    ``classes`` is filled by :func:`build_ordering` (1, 2 or 3 per node).
    """

    order: np.ndarray
    key: np.ndarray
    side: np.ndarray
    classes: np.ndarray | None = None


def domain_diameter(coords):
    c = np.asarray(coords, dtype=np.float64).reshape(len(coords), -1)
    if c.shape[0] < 2:
        return 0.0
    # the bounding-box diagonal bounds the diameter and equals it on grids
    return float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))


def smooth_probs(p, coords, tau, block=2048):
    """Circular average of ``p`` over all nodes within distance ``tau``."""
    p = np.asarray(p, dtype=np.float64)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if tau == 0:
        return p.copy()
    c = np.asarray(coords, dtype=np.float64).reshape(p.size, -1)
    out = np.empty_like(p)
    t2 = tau * tau
    for start in range(0, p.size, block):
        d2 = ((c[start:start + block, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
        mask = d2 <= t2
        out[start:start + block] = (mask @ p) / mask.sum(axis=1)
    return out


def _sorted(key):
    return np.lexsort((np.arange(key.size), key))


def admission_order(family, summary):
    """Order in which nodes join the family's sets as the level grows."""
    n = summary.n
    side = np.ones(n, dtype=np.int8)
    if family.direction == NEGATIVE:
        side[:] = -1
    kind = family.kind
    if kind == ONE or (kind == TWO_LEVEL and family.param is None):
        key = summary.p_neg if family.direction == POSITIVE else summary.p_pos
    elif kind == TWO_LEVEL:
        v = family.param
        key = summary.below(v) if family.direction == POSITIVE else summary.exceed(v)
    elif kind == TWO_SMOOTH:
        # smoothing is linear, so average the complementary probabilities
        tau = 0.0 if family.param is None else family.param
        q = summary.p_neg if family.direction == POSITIVE else summary.p_pos
        key = smooth_probs(q, family.coords, tau)
    else:
        nu = 0.0 if (kind == AVOID_ONE or family.param is None) else family.param
        with np.errstate(divide="ignore"):
            kp = np.log(summary.p_neg) - 0.5 * nu
            kn = np.log(summary.p_pos) + 0.5 * nu
        neg = kn < kp
        side = np.where(neg, -1, 1).astype(np.int8)
        key = np.where(neg, kn, kp)
        # map back to a probability-like scale for reporting
        key = np.exp(key)
    key = np.asarray(key, dtype=np.float64)
    return NodeOrdering(_sorted(key), key, side)


@dataclass(frozen=True)
class SetBounds:
    """Boolean masks of the upper bound and the two lower bounds."""

    U1: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    p: np.ndarray
    q: np.ndarray
    side: np.ndarray


def side_probabilities(summary, direction):
    """Marginal probability of the required side and its complement.

    For ``avoid`` the better side of every node is used.
    """
    if direction == POSITIVE:
        return summary.p_pos, summary.p_neg, np.ones(summary.n, dtype=np.int8)
    if direction == NEGATIVE:
        return summary.p_neg, summary.p_pos, -np.ones(summary.n, dtype=np.int8)
    pos = summary.p_pos >= summary.p_neg
    p = np.where(pos, summary.p_pos, summary.p_neg)
    q = np.where(pos, summary.p_neg, summary.p_pos)
    return p, q, np.where(pos, 1, -1).astype(np.int8)


def bounds_from_probs(p, q, alpha):
    """U1, L1 and L2 masks from side probabilities ``p`` and complements ``q``.

    L2 is the largest set of the ``K`` smallest ``q`` values with
    ``q_(k) <= alpha / k`` for every ``k <= K``; since the largest of them
    is at most ``alpha / K`` the union bound keeps the joint probability at
    least ``1 - alpha``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = p.size
    U1 = p >= 1.0 - alpha
    L1 = p >= 1.0 - alpha / n
    order = _sorted(q)
    ok = q[order] <= alpha / np.arange(1, n + 1)
    K = n if ok.all() else int(np.argmin(ok))
    L2 = np.zeros(n, dtype=bool)
    L2[order[:K]] = True
    L2 |= L1
    L2 &= U1
    L1 = L1 & L2
    return U1, L1, L2


def bounds(summary, alpha, direction=POSITIVE):
    p, q, side = side_probabilities(summary, direction)
    U1, L1, L2 = bounds_from_probs(p, q, alpha)
    return SetBounds(U1, L1, L2, p, q, side)


def build_ordering(set_bounds, ordering, posterior=None, candidates=None):
    """Three-class integration order.

    Class 1 (the L2 nodes) are admitted first, in minimum-degree order on
    their induced subgraph for sparse precisions. Class 2 are the remaining
    candidate nodes in family order. Class 3 are never admitted. The
    returned permutation lists class 3 first, then class 2 in reverse
    admission order, then class 1, so the first admitted node sits at the
    last position of the factor (the integrator runs backwards) and, for a
    precision, class 3 is marginalised exactly by never being reached.

    Parameters
    ----------
    set_bounds : SetBounds
    ordering : NodeOrdering
    posterior : GaussianPosterior, optional
        Supplies the graph for the class-1 ordering.
    candidates : array_like of bool, optional
        Nodes eligible for admission (default: the U1 mask).

    Returns
    -------
    admitted : ndarray
        Nodes in admission order.
    n_class1 : int
    classes : ndarray
        Class label per node.
    perm : Permutation
        Factor order over all nodes.
    reordered : bool
        Whether class 1 departs from the family order. Only then are the
        intermediate probabilities inside the class-1 block meaningless.
    """
    n = ordering.order.size
    cand = set_bounds.U1.copy() if candidates is None else np.asarray(candidates, bool).copy()
    cls1_mask = set_bounds.L2 & cand
    pos = np.empty(n, dtype=np.int64)
    pos[ordering.order] = np.arange(n)
    cls1 = np.flatnonzero(cls1_mask)
    in_family = cls1[np.argsort(pos[cls1], kind="stable")]
    if cls1.size and posterior is not None and posterior.is_sparse:
        # later family members are eliminated first on ties, so that
        # without fill pressure the block keeps the family order
        cls1 = gmrf.minimum_degree(posterior.adjacency(), cls1, priority=-pos)[::-1]
    else:
        cls1 = in_family
    rest = ordering.order[cand[ordering.order] & ~cls1_mask[ordering.order]]
    admitted = np.concatenate([cls1, rest]).astype(np.int64)
    classes = np.full(n, 3, dtype=np.int8)
    classes[rest] = 2
    classes[cls1] = 1
    outside = np.flatnonzero(classes == 3)
    perm = gmrf.Permutation.from_order(np.concatenate([outside, admitted[::-1]]))
    reordered = not np.array_equal(cls1, in_family)
    return admitted, cls1.size, classes, perm, reordered
