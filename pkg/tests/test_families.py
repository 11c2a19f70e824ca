import numpy as np
import pytest
import scipy.special as sc
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from excursets import families as fam
from excursets import gmrf
from excursets.marginals import MixtureMarginals

probs = arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 1.0))
alphas = st.floats(0.001, 0.999)


def _summary(mean, sd, u=0.0):
    return fam.marginal_summary(MixtureMarginals.gaussian(np.asarray(mean, float), np.asarray(sd, float)), u)


def test_lower_bound_rule_example():
    q = np.array([0.03, 0.001, 0.02])
    _, _, L2 = fam.bounds_from_probs(1 - q, q, 0.05)
    # sorted q: 0.001 <= 0.05, 0.02 <= 0.025, 0.03 > 0.0167
    np.testing.assert_array_equal(L2, [False, True, True])


@given(probs, alphas)
def test_lower_bound_inside_upper_bound(p, alpha):
    U1, L1, L2 = fam.bounds_from_probs(p, 1 - p, alpha)
    assert not np.any(L2 & ~U1)
    assert not np.any(L1 & ~L2)


@given(probs, alphas)
def test_lower_bound_is_a_valid_union_bound(p, alpha):
    q = 1 - p
    _, _, L2 = fam.bounds_from_probs(p, q, alpha)
    assert q[L2].sum() <= alpha + 1e-12


@given(probs, alphas, alphas)
def test_bounds_nested_in_alpha(p, a1, a2):
    lo, hi = sorted((a1, a2))
    U_lo, _, L_lo = fam.bounds_from_probs(p, 1 - p, lo)
    U_hi, _, L_hi = fam.bounds_from_probs(p, 1 - p, hi)
    assert not np.any(U_lo & ~U_hi)
    assert not np.any(L_lo & ~L_hi)


def test_bounds_reject_bad_alpha():
    with pytest.raises(ValueError):
        fam.bounds_from_probs(np.ones(2), np.zeros(2), 1.0)


def test_summary_probabilities():
    s = _summary([1.0, -2.0, 0.0], [1.0, 2.0, 0.5], u=0.5)
    np.testing.assert_allclose(s.p_pos, sc.ndtr((np.array([1.0, -2.0, 0.0]) - 0.5) / [1.0, 2.0, 0.5]))
    np.testing.assert_allclose(s.p_pos + s.p_neg, 1.0)


def test_degenerate_nodes_get_hard_probabilities():
    s = _summary([1.0, -1.0, 0.2], [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(s.degenerate, [True, True, False])
    assert s.p_pos[0] == 1.0 and s.p_neg[0] == 0.0
    assert s.p_pos[1] == 0.0 and s.p_neg[1] == 1.0


def test_one_param_order_follows_marginals():
    s = _summary([0.5, 2.0, -1.0, 1.0], np.ones(4))
    o = fam.admission_order(fam.Family(fam.ONE, fam.POSITIVE, 0.0), s)
    np.testing.assert_array_equal(o.order, [1, 3, 0, 2])
    o = fam.admission_order(fam.Family(fam.ONE, fam.NEGATIVE, 0.0), s)
    np.testing.assert_array_equal(o.order, [2, 0, 3, 1])
    assert np.all(o.side == -1)


@given(arrays(np.float64, 12, elements=st.floats(-3, 3)), arrays(np.float64, 12, elements=st.floats(0.1, 3)))
def test_two_parameter_families_reduce_at_null(mean, sd):
    s = _summary(mean, sd)
    coords = np.column_stack([np.arange(12) % 4, np.arange(12) // 4]).astype(float)
    base = fam.admission_order(fam.Family(fam.ONE, fam.POSITIVE, 0.0), s)
    lvl = fam.admission_order(fam.Family(fam.TWO_LEVEL, fam.POSITIVE, 0.0, param=0.0), s)
    smo = fam.admission_order(fam.Family(fam.TWO_SMOOTH, fam.POSITIVE, 0.0, param=0.0, coords=coords), s)
    np.testing.assert_array_equal(lvl.order, base.order)
    np.testing.assert_array_equal(smo.order, base.order)
    a1 = fam.admission_order(fam.Family(fam.AVOID_ONE, fam.AVOID, 0.0), s)
    a2 = fam.admission_order(fam.Family(fam.AVOID_TWO, fam.AVOID, 0.0, param=0.0), s)
    np.testing.assert_array_equal(a1.order, a2.order)
    np.testing.assert_array_equal(a1.side, a2.side)


def test_avoid_sides_pick_the_likelier_side():
    s = _summary([1.5, -0.7, 0.1], np.ones(3))
    o = fam.admission_order(fam.Family(fam.AVOID_ONE, fam.AVOID, 0.0), s)
    np.testing.assert_array_equal(o.side, [1, -1, 1])
    np.testing.assert_array_equal(o.order, [0, 1, 2])


def test_avoid_parameter_shifts_sides():
    s = _summary([0.1, -0.1], np.ones(2))
    plus = fam.admission_order(fam.Family(fam.AVOID_TWO, fam.AVOID, 0.0, param=4.0), s)
    minus = fam.admission_order(fam.Family(fam.AVOID_TWO, fam.AVOID, 0.0, param=-4.0), s)
    # a positive parameter favours the upper side, a negative one the lower
    assert np.all(plus.side == 1)
    assert np.all(minus.side == -1)


def test_smoothing_matches_brute_force_disc_average(rng):
    coords = rng.uniform(0, 5, (60, 2))
    p = rng.uniform(size=60)
    tau = 1.3
    ref = np.array([p[np.linalg.norm(coords - c, axis=1) <= tau].mean() for c in coords])
    np.testing.assert_allclose(fam.smooth_probs(p, coords, tau, block=7), ref, rtol=1e-12)


def test_family_validation():
    with pytest.raises(ValueError):
        fam.Family("three", fam.POSITIVE, 0.0)
    with pytest.raises(ValueError):
        fam.Family(fam.AVOID_ONE, fam.POSITIVE, 0.0)
    with pytest.raises(ValueError):
        fam.Family(fam.TWO_SMOOTH, fam.POSITIVE, 0.0)
    with pytest.raises(ValueError):
        fam.Family(fam.TWO_SMOOTH, fam.POSITIVE, 0.0, param=-1.0, coords=np.zeros((2, 2)))


def test_brackets():
    s = _summary([0.0, 1.0], [1.0, 2.0])
    assert fam.Family(fam.TWO_LEVEL, fam.POSITIVE, 0.5).bracket(s) == (-5.5, 6.5)
    coords = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert fam.Family(fam.TWO_SMOOTH, fam.POSITIVE, 0.0, coords=coords).bracket(s) == (0.0, 2.5)
    assert fam.Family(fam.AVOID_TWO, fam.AVOID, 0.0).bracket(s) == (-5.0, 5.0)


def test_build_ordering_classes_and_permutation():
    mean = np.array([3.0, 2.5, 0.5, -1.0, 2.8])
    s = _summary(mean, np.ones(5))
    sb = fam.bounds(s, 0.2)
    o = fam.admission_order(fam.Family(fam.ONE, fam.POSITIVE, 0.0), s)
    post = gmrf.GaussianPosterior(mean, covariance=np.eye(5))
    admitted, n1, classes, perm, reordered = fam.build_ordering(sb, o, post)
    assert set(np.flatnonzero(classes == 1)) == set(np.flatnonzero(sb.L2 & sb.U1))
    assert n1 == int(sb.L2.sum())
    # class 3 first in the factor, first admitted node last
    assert perm.forward[-1] == admitted[0]
    assert set(perm.forward[: np.sum(classes == 3)]) == set(np.flatnonzero(classes == 3))
    assert not reordered
    np.testing.assert_array_equal(admitted, o.order[: admitted.size])
