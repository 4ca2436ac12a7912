"""Exact bound verifiers on discrete joints and the representation quantizer."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tappfl.theory import (
    DiscreteJoint,
    JointError,
    SigmoidClassifier,
    bayes_accuracy,
    binary_entropy_bits,
    brute_force_advantage,
    conditional_entropy_bits,
    empirical_joint,
    group_cross_entropy_sum,
    inverse_binary_entropy,
    label_gap,
    quantize,
    random_joint,
    report_row,
    run_suite,
    thm2_accuracy_bound,
    tv_advantage,
    verify_inverse_entropy_lemma,
    verify_thm1,
    verify_thm2,
    worst_case_advantage,
)


def _from_conditionals(c0, c1, pu1=0.5, py1=0.5):
    """Joint with p(r|u=a) = c_a and y independent of everything."""
    c0, c1 = np.asarray(c0, float), np.asarray(c1, float)
    pmf = np.zeros((len(c0), 2, 2))
    for a, (c, pa) in enumerate(((c0, 1 - pu1), (c1, pu1))):
        pmf[:, a, 1] = c * pa * py1
        pmf[:, a, 0] = c * pa * (1 - py1)
    return DiscreteJoint(pmf)


def _subset_oracle(c0, c1):
    """Exhaustive maximization in exact rational arithmetic."""
    c0 = [Fraction(v).limit_denominator(10**6) for v in c0]
    c1 = [Fraction(v).limit_denominator(10**6) for v in c1]
    n = len(c0)
    return max(abs(sum(c0[i] - c1[i] for i in range(n) if mask >> i & 1)) for mask in range(2**n))


class TestJoint:
    def test_rejects_bad_pmf(self):
        with pytest.raises(ValueError):
            DiscreteJoint(np.full((2, 2, 2), 0.2))
        with pytest.raises(ValueError):
            DiscreteJoint(np.ones((2, 3, 2)) / 12)
        with pytest.raises(ValueError):
            DiscreteJoint(np.array([[[1.5, 0], [0, -0.5]]]))

    def test_missing_attribute_value(self):
        pmf = np.zeros((2, 2, 2))
        pmf[:, 0, :] = 0.25
        with pytest.raises(JointError):
            tv_advantage(DiscreteJoint(pmf))
        with pytest.raises(JointError):
            label_gap(DiscreteJoint(pmf))


class TestAdvantage:
    def test_identical_conditionals(self):
        assert worst_case_advantage(_from_conditionals([0.2, 0.8], [0.2, 0.8])) == 0.0

    def test_disjoint_supports(self):
        assert worst_case_advantage(_from_conditionals([1, 0, 0], [0, 0.5, 0.5])) == pytest.approx(1.0, abs=1e-15)

    def test_two_bin_oracle(self):
        joint = _from_conditionals([0.7, 0.3], [0.4, 0.6])
        assert float(_subset_oracle([0.7, 0.3], [0.4, 0.6])) == pytest.approx(0.3, abs=1e-15)
        assert worst_case_advantage(joint) == pytest.approx(0.3, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31))
    def test_tv_equals_brute_force(self, bins, seed):
        joint = random_joint(np.random.default_rng(seed), bins, alpha=0.7)
        if np.any(joint.p_u <= 0):
            return
        assert abs(tv_advantage(joint) - brute_force_advantage(joint)) <= 1e-12

    def test_brute_force_matches_rational_oracle(self):
        rng = np.random.default_rng(5)
        c0, c1 = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        joint = _from_conditionals(c0, c1)
        assert brute_force_advantage(joint) == pytest.approx(float(_subset_oracle(c0, c1)), abs=1e-6)

    def test_chunking_is_transparent(self):
        joint = random_joint(np.random.default_rng(1), 10)
        assert brute_force_advantage(joint, chunk_bits=3) == pytest.approx(brute_force_advantage(joint), abs=1e-15)

    def test_brute_force_cap(self):
        with pytest.raises(ValueError):
            brute_force_advantage(random_joint(np.random.default_rng(0), 21))


class TestEntropy:
    def test_independent_uniform_is_one_bit(self):
        assert conditional_entropy_bits(_from_conditionals([0.3, 0.7], [0.3, 0.7])) == pytest.approx(1.0, abs=1e-15)

    def test_deterministic_is_zero(self):
        assert conditional_entropy_bits(_from_conditionals([1, 0], [0, 1])) == 0.0

    def test_quarter_oracle(self):
        # p(r) = [1/2, 1/2], p(u=1 | r) = [1/4, 3/4]
        joint = _from_conditionals([0.75, 0.25], [0.25, 0.75])
        h2 = -(0.25 * math.log2(0.25) + 0.75 * math.log2(0.75))
        assert h2 == pytest.approx(0.811278, abs=1e-6)
        assert conditional_entropy_bits(joint) == pytest.approx(h2, abs=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 0.99), st.integers(1, 6), st.integers(0, 2**31))
    def test_independent_equals_prior_entropy(self, pu1, bins, seed):
        c = np.random.default_rng(seed).dirichlet(np.ones(bins))
        joint = _from_conditionals(c, c, pu1=pu1)
        assert conditional_entropy_bits(joint) == pytest.approx(float(binary_entropy_bits(pu1)), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31))
    def test_at_most_one_bit(self, bins, seed):
        assert conditional_entropy_bits(random_joint(np.random.default_rng(seed), bins)) <= 1.0 + 1e-12


class TestThm2:
    def test_bound_values(self):
        # 30-digit decimal oracles
        assert thm2_accuracy_bound(1.0) == pytest.approx(0.806573596382729206, abs=1e-15)
        assert thm2_accuracy_bound(0.5) == pytest.approx(0.930264263587217539, abs=1e-15)

    def test_vacuous_limit(self):
        assert thm2_accuracy_bound(0.0) == 1.0
        assert thm2_accuracy_bound(-0.1) == 1.0
        assert thm2_accuracy_bound(1e-12) > 1 - 1e-12

    def test_entropy_cap(self):
        with pytest.raises(ValueError):
            thm2_accuracy_bound(1.01)

    def test_independent_joint(self):
        res = verify_thm2(_from_conditionals([0.5, 0.5], [0.5, 0.5]))
        assert res.bayes_acc == pytest.approx(0.5) and res.holds
        assert res.margin == pytest.approx(0.306573596382729206, abs=1e-15)

    def test_deterministic_joint(self):
        res = verify_thm2(_from_conditionals([1, 0], [0, 1]))
        assert res.bayes_acc == pytest.approx(1.0) and res.bound == 1.0 and res.holds

    def test_bayes_accuracy_beats_any_rule(self):
        joint = random_joint(np.random.default_rng(3), 5)
        best = bayes_accuracy(joint)
        for mask in range(2**5):
            guess = [(mask >> r) & 1 for r in range(5)]
            acc = sum(joint.p_ru[r, guess[r]] for r in range(5))
            assert acc <= best + 1e-15

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.floats(0.1, 3.0), st.integers(0, 2**31))
    def test_bound_holds_on_random_joints(self, bins, alpha, seed):
        assert verify_thm2(random_joint(np.random.default_rng(seed), bins, alpha)).holds


class TestLemma:
    def test_endpoint(self):
        assert inverse_binary_entropy(1.0) == 0.5
        assert verify_inverse_entropy_lemma(1)[0].lower == pytest.approx(0.193426403617270793, abs=1e-15)

    def test_inverse_round_trips(self):
        for q in (1e-6, 0.01, 0.11, 0.25, 0.4999):
            assert inverse_binary_entropy(float(binary_entropy_bits(q))) == pytest.approx(q, abs=1e-11)

    def test_zero(self):
        assert inverse_binary_entropy(0.0) == 0.0

    def test_domain(self):
        with pytest.raises(ValueError):
            inverse_binary_entropy(1.2)

    def test_small_grid(self):
        points = verify_inverse_entropy_lemma(50)
        assert len(points) == 50 and all(p.holds for p in points)
        assert points[0].p == pytest.approx(0.02) and points[-1].p == 1.0


class TestThm1:
    def test_independent_label_gives_zero_gap(self):
        joint = _from_conditionals([0.6, 0.4], [0.1, 0.9], py1=0.3)
        assert label_gap(joint) == pytest.approx(0.0, abs=1e-15)
        rep = verify_thm1(joint, np.array([[0.0, 1.0], [1.0, 0.0]]), SigmoidClassifier(np.array([1.0, -1.0]), 0.0))
        assert rep.thm1_rhs <= 0 and rep.thm1_holds

    def test_fully_revealing_is_vacuous(self):
        pmf = np.zeros((2, 2, 2))
        pmf[0, 0, 0] = pmf[1, 1, 1] = 0.5
        joint = DiscreteJoint(pmf)
        clf = SigmoidClassifier(np.array([2.0, 0.0]), 0.0)
        rep = verify_thm1(joint, np.array([[1.0, 0.0], [-1.0, 0.0]]), clf)
        assert rep.adv == pytest.approx(1.0) and rep.R * rep.C_L >= 0.5
        assert rep.thm1_rhs <= 0 and rep.thm1_holds

    def test_cross_entropy_oracle(self):
        # one cell per group, classifier outputs 0.5 everywhere: each group contributes ln 2
        pmf = np.zeros((1, 2, 2))
        pmf[0, :, :] = 0.25
        assert group_cross_entropy_sum(DiscreteJoint(pmf), np.array([0.5])) == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_lipschitz_certificate(self):
        clf = SigmoidClassifier(np.array([3.0, 4.0]), 0.1)
        assert clf.lipschitz == 1.25
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((200, 2)), rng.standard_normal((200, 2))
        ratio = np.abs(clf(a) - clf(b)) / np.linalg.norm(a - b, axis=1)
        assert ratio.max() <= clf.lipschitz

    def test_radius_check(self):
        joint = random_joint(np.random.default_rng(0), 2)
        with pytest.raises(ValueError):
            verify_thm1(joint, np.array([[3.0, 0.0], [0.0, 1.0]]), SigmoidClassifier(np.ones(2), 0.0), R=1.0)

    def test_suite_holds(self):
        reports = run_suite(20, seed=3)
        assert all(r.thm1_holds and r.thm2_holds for r in reports)
        assert [r.instance_id for r in reports] == list(range(20))
        assert report_row(reports[0])["verdicts"] == "thm1=pass;thm2=pass"


class TestQuantizer:
    def test_ids_are_dense(self):
        reps = np.array([[0.0], [0.1], [0.9], [1.0]])
        np.testing.assert_array_equal(quantize(reps, 2), [0, 0, 1, 1])

    def test_cell_cap(self):
        with pytest.raises(ValueError):
            quantize(np.zeros((3, 21)), 2)

    def test_refinement_never_lowers_bayes_accuracy(self):
        rng = np.random.default_rng(0)
        u = rng.integers(0, 2, 3000)
        y = rng.integers(0, 2, 3000)
        reps = np.column_stack([u + rng.normal(0, 0.8, 3000), rng.normal(0, 1, 3000)])
        low, high = reps.min(axis=0), reps.max(axis=0)
        accs = [bayes_accuracy(empirical_joint(quantize(reps, b, low, high), u, y)) for b in (1, 2, 4, 8, 16, 32)]
        assert all(b >= a - 1e-12 for a, b in zip(accs, accs[1:]))
        assert accs[0] == pytest.approx(max(u.mean(), 1 - u.mean()))

    def test_empirical_joint_counts(self):
        joint = empirical_joint(np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]), np.array([1, 1, 0, 0]))
        assert joint.pmf[0, 0, 1] == 0.25 and joint.pmf[1, 1, 0] == 0.25
