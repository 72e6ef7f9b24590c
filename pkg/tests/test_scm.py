"""Exact-enumeration checks for the discrete SCM oracle.

Every derived expectation here is computed by an independent brute-force
routine written as plain loops, sharing no code with the module under test.
"""

import numpy as np
import pytest

from ctxseg.errors import (
    NullEventError,
    PositivityError,
    UnsupportedModelError,
    ValidationError,
)
from ctxseg.scm import (
    DiscreteSCM,
    DistTable,
    backdoor_adjustment,
    confounding_gap,
    example_confounded_scm,
    intervene,
    joint_table,
    nwgm_gap,
    observe,
    random_scm,
    tv_distance,
    verify_backdoor_identity,
)


def uniform_scm(cards=(2, 2, 2, 2)):
    c, x, m, y = cards
    return DiscreteSCM(
        p_c=np.full(c, 1.0 / c),
        p_x_given_c=np.full((c, x), 1.0 / x),
        p_m_given_xc=np.full((x, c, m), 1.0 / m),
        p_y_given_xm=np.full((x, m, y), 1.0 / y),
    )


def brute_force_joint(scm):
    """Quadruple loop over all outcomes; no einsum, no shared code."""
    c_n, x_n, m_n, y_n = scm.cards
    joint = np.zeros((c_n, x_n, m_n, y_n))
    for c in range(c_n):
        for x in range(x_n):
            for m in range(m_n):
                for y in range(y_n):
                    joint[c, x, m, y] = (
                        scm.p_c[c]
                        * scm.p_x_given_c[c, x]
                        * scm.p_m_given_xc[x, c, m]
                        * scm.p_y_given_xm[x, m, y]
                    )
    return joint


class TestJoint:
    def test_uniform_factorization(self):
        joint = joint_table(uniform_scm())
        assert np.allclose(joint, 1.0 / 16, atol=0)

    def test_degenerate_prior_zeroes_other_context(self):
        scm = uniform_scm()
        scm = DiscreteSCM(
            p_c=np.array([1.0, 0.0]),
            p_x_given_c=scm.p_x_given_c,
            p_m_given_xc=scm.p_m_given_xc,
            p_y_given_xm=scm.p_y_given_xm,
        )
        joint = joint_table(scm)
        assert np.all(joint[1] == 0)
        assert abs(joint.sum() - 1.0) < 1e-10

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(101)
        scm = random_scm(rng, (3, 2, 2, 2))
        assert np.allclose(joint_table(scm), brute_force_joint(scm), atol=1e-14)

    def test_malformed_row_names_offender(self):
        bad = np.full((2, 2), 0.5)
        bad[1, 1] = 0.6
        with pytest.raises(ValidationError, match=r"p_x_given_c row \(1,\)"):
            DiscreteSCM(
                p_c=np.array([0.5, 0.5]),
                p_x_given_c=bad,
                p_m_given_xc=np.full((2, 2, 2), 0.5),
                p_y_given_xm=np.full((2, 2, 2), 0.5),
            )


class TestObserve:
    def test_single_context_equals_intervention(self):
        rng = np.random.default_rng(7)
        scm = random_scm(rng, (1, 3, 2, 2))
        for x in range(3):
            assert np.allclose(
                observe(scm, x).values, intervene(scm, x).values, atol=1e-12
            )

    def test_deterministic_outcome_is_point_mass(self):
        # Y = x regardless of m.
        p_yxm = np.zeros((2, 2, 2))
        p_yxm[0, :, 0] = 1.0
        p_yxm[1, :, 1] = 1.0
        scm = DiscreteSCM(
            p_c=np.array([0.3, 0.7]),
            p_x_given_c=np.array([[0.6, 0.4], [0.2, 0.8]]),
            p_m_given_xc=np.full((2, 2, 2), 0.5),
            p_y_given_xm=p_yxm,
        )
        for x in range(2):
            expected = np.zeros(2)
            expected[x] = 1.0
            assert np.allclose(observe(scm, x).values, expected, atol=1e-12)

    def test_matches_enumerated_conditional(self):
        rng = np.random.default_rng(55)
        scm = random_scm(rng, (3, 2, 3, 2))
        joint = brute_force_joint(scm)
        for x in range(2):
            num = np.zeros(2)
            den = 0.0
            for c in range(3):
                for m in range(3):
                    for y in range(2):
                        num[y] += joint[c, x, m, y]
                        den += joint[c, x, m, y]
            assert np.allclose(observe(scm, x).values, num / den, atol=1e-12)

    def test_null_event_raises(self):
        scm = DiscreteSCM(
            p_c=np.array([0.5, 0.5]),
            p_x_given_c=np.array([[1.0, 0.0], [1.0, 0.0]]),
            p_m_given_xc=np.full((2, 2, 2), 0.5),
            p_y_given_xm=np.full((2, 2, 2), 0.5),
        )
        with pytest.raises(NullEventError):
            observe(scm, 1)


class TestIntervene:
    def test_no_confounding_when_x_independent_of_c(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            scm = random_scm(rng, (3, 2, 2, 2))
            row = scm.p_x_given_c[0]
            scm = DiscreteSCM(
                p_c=scm.p_c,
                p_x_given_c=np.tile(row, (3, 1)),
                p_m_given_xc=scm.p_m_given_xc,
                p_y_given_xm=scm.p_y_given_xm,
            )
            for x in range(2):
                assert (
                    tv_distance(observe(scm, x), intervene(scm, x)) < 1e-10
                )

    def test_degenerate_prior_reduces_to_single_stratum(self):
        rng = np.random.default_rng(13)
        base = random_scm(rng, (3, 2, 2, 2))
        p_c = np.zeros(3)
        p_c[1] = 1.0
        scm = DiscreteSCM(
            p_c=p_c,
            p_x_given_c=base.p_x_given_c,
            p_m_given_xc=base.p_m_given_xc,
            p_y_given_xm=base.p_y_given_xm,
        )
        for x in range(2):
            expected = np.zeros(2)
            for m in range(2):
                for y in range(2):
                    expected[y] += scm.p_m_given_xc[x, 1, m] * scm.p_y_given_xm[x, m, y]
            assert np.allclose(intervene(scm, x).values, expected, atol=1e-12)

    def test_matches_independent_triple_loop(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            cards = tuple(rng.integers(1, 5, size=4))
            scm = random_scm(rng, cards)
            for x in range(cards[1]):
                expected = np.zeros(cards[3])
                for c in range(cards[0]):
                    for m in range(cards[2]):
                        for y in range(cards[3]):
                            expected[y] += (
                                scm.p_c[c]
                                * scm.p_m_given_xc[x, c, m]
                                * scm.p_y_given_xm[x, m, y]
                            )
                assert np.allclose(intervene(scm, x).values, expected, atol=1e-12)


class TestBackdoorAdjustment:
    def test_single_context_equals_observation(self):
        rng = np.random.default_rng(23)
        scm = random_scm(rng, (1, 2, 2, 2), deterministic_context=True)
        for x in range(2):
            assert np.allclose(
                backdoor_adjustment(scm, x).values, observe(scm, x).values, atol=1e-12
            )

    def test_equals_intervention_with_deterministic_context(self):
        rng = np.random.default_rng(29)
        scm = random_scm(rng, (3, 2, 3, 2), deterministic_context=True)
        for x in range(2):
            assert np.allclose(
                backdoor_adjustment(scm, x).values,
                intervene(scm, x).values,
                atol=1e-10,
            )

    def test_uniform_prior_averages_point_masses(self):
        # Three contexts, m = c, Y = m deterministically: the adjusted
        # distribution is the plain average of three point masses.
        f = np.array([[0, 1, 2], [0, 1, 2]])
        p_mxc = np.zeros((2, 3, 3))
        xs, cs = np.meshgrid(np.arange(2), np.arange(3), indexing="ij")
        p_mxc[xs, cs, f] = 1.0
        p_yxm = np.zeros((2, 3, 3))
        for m in range(3):
            p_yxm[:, m, m] = 1.0
        scm = DiscreteSCM(
            p_c=np.full(3, 1.0 / 3),
            p_x_given_c=np.array([[0.5, 0.5], [0.4, 0.6], [0.7, 0.3]]),
            p_m_given_xc=p_mxc,
            p_y_given_xm=p_yxm,
            f=f,
        )
        for x in range(2):
            assert np.allclose(
                backdoor_adjustment(scm, x).values, np.full(3, 1.0 / 3), atol=1e-12
            )

    def test_missing_mechanism_raises(self):
        rng = np.random.default_rng(31)
        scm = random_scm(rng, (2, 2, 2, 2))
        with pytest.raises(UnsupportedModelError):
            backdoor_adjustment(scm, 0)

    def test_positivity_violation_names_stratum(self):
        f = np.array([[0, 1], [0, 1]])
        p_mxc = np.zeros((2, 2, 2))
        xs, cs = np.meshgrid(np.arange(2), np.arange(2), indexing="ij")
        p_mxc[xs, cs, f] = 1.0
        scm = DiscreteSCM(
            p_c=np.array([0.5, 0.5]),
            p_x_given_c=np.array([[1.0, 0.0], [1.0, 0.0]]),  # X = 1 never happens
            p_m_given_xc=p_mxc,
            p_y_given_xm=np.full((2, 2, 2), 0.5),
            f=f,
        )
        with pytest.raises(PositivityError, match=r"x=1, c=0"):
            backdoor_adjustment(scm, 1)


class TestVerifyIdentity:
    def test_uniform_scm_gap_zero(self):
        c, x, m, y = 2, 2, 2, 2
        f = np.zeros((x, c), dtype=int)
        p_mxc = np.zeros((x, c, m))
        p_mxc[:, :, 0] = 1.0
        scm = DiscreteSCM(
            p_c=np.full(c, 0.5),
            p_x_given_c=np.full((c, x), 0.5),
            p_m_given_xc=p_mxc,
            p_y_given_xm=np.full((x, m, y), 0.5),
            f=f,
        )
        report = verify_backdoor_identity(scm)
        assert report.passed
        assert report.max_abs_gap == 0.0

    def test_hundred_random_scms_pass(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            cards = tuple(rng.integers(1, 5, size=4))
            scm = random_scm(rng, cards, deterministic_context=True)
            report = verify_backdoor_identity(scm)
            assert report.passed, f"gap {report.max_abs_gap} for cards {cards}"

    def test_positivity_violation_is_an_error_not_a_pass(self):
        f = np.array([[0, 1], [0, 1]])
        p_mxc = np.zeros((2, 2, 2))
        xs, cs = np.meshgrid(np.arange(2), np.arange(2), indexing="ij")
        p_mxc[xs, cs, f] = 1.0
        scm = DiscreteSCM(
            p_c=np.array([0.5, 0.5]),
            p_x_given_c=np.array([[1.0, 0.0], [1.0, 0.0]]),
            p_m_given_xc=p_mxc,
            p_y_given_xm=np.full((2, 2, 2), 0.5),
            f=f,
        )
        with pytest.raises(PositivityError):
            verify_backdoor_identity(scm)


class TestNwgm:
    def test_constant_scores_no_gap(self):
        prior = DistTable(np.array([0.2, 0.3, 0.5]))
        report = nwgm_gap(np.array([1.7, 1.7, 1.7]), prior)
        assert report.gap == 0.0

    def test_degenerate_prior_no_gap(self):
        prior = DistTable(np.array([0.0, 1.0, 0.0]))
        report = nwgm_gap(np.array([-2.0, 0.4, 3.0]), prior)
        assert report.gap == 0.0

    def test_outputs_are_probabilities(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            scores = rng.uniform(-3, 3, size=8)
            report = nwgm_gap(scores, DistTable(np.full(8, 0.125)))
            assert 0.0 <= report.exact <= 1.0
            assert 0.0 <= report.approx <= 1.0

    def test_exact_matches_direct_summation(self):
        rng = np.random.default_rng(41)
        scores = rng.uniform(-3, 3, size=8)
        prior = np.full(8, 0.125)
        direct = 0.0
        for c in range(8):
            direct += prior[c] / (1.0 + np.exp(-scores[c]))
        report = nwgm_gap(scores, DistTable(prior))
        assert abs(report.exact - direct) < 1e-12

    def test_gap_shrinks_under_score_contraction(self):
        rng = np.random.default_rng(43)
        prior = DistTable(np.full(8, 0.125))
        for _ in range(20):
            scores = rng.uniform(-3, 3, size=8)
            mean = float(np.sum(scores * prior.values))
            gaps = [
                nwgm_gap(mean + lam * (scores - mean), prior).gap
                for lam in (1.0, 0.5, 0.25)
            ]
            assert gaps[0] >= gaps[1] >= gaps[2]


class TestInvariantsAndExamples:
    def test_returned_distributions_are_valid(self):
        rng = np.random.default_rng(47)
        for _ in range(25):
            cards = tuple(rng.integers(1, 5, size=4))
            scm = random_scm(rng, cards, deterministic_context=True)
            for x in range(cards[1]):
                for dist in (observe(scm, x), intervene(scm, x), backdoor_adjustment(scm, x)):
                    assert abs(dist.values.sum() - 1.0) < 1e-10
                    assert np.all(dist.values >= 0) and np.all(dist.values <= 1)

    def test_shipped_example_exhibits_confounding(self):
        scm = example_confounded_scm()
        assert confounding_gap(scm) >= 0.1
        # and the adjustment still recovers the interventional truth there
        assert verify_backdoor_identity(scm).passed

    def test_json_round_trip(self, tmp_path):
        scm = example_confounded_scm()
        path = tmp_path / "scm.json"
        scm.to_json(path)
        loaded = DiscreteSCM.from_json(path)
        assert np.array_equal(loaded.p_c, scm.p_c)
        assert np.array_equal(loaded.p_x_given_c, scm.p_x_given_c)
        assert np.array_equal(loaded.p_m_given_xc, scm.p_m_given_xc)
        assert np.array_equal(loaded.p_y_given_xm, scm.p_y_given_xm)
        assert np.array_equal(loaded.f, scm.f)

    def test_load_validates(self, tmp_path):
        scm = example_confounded_scm()
        doc = scm.to_dict()
        doc["p_c"] = [0.7, 0.7]
        path = tmp_path / "bad.json"
        path.write_text(__import__("json").dumps(doc))
        with pytest.raises(ValidationError):
            DiscreteSCM.from_json(path)

    def test_cardinality_cap_enforced(self):
        with pytest.raises(ValidationError, match="cap"):
            uniform_scm((9, 2, 2, 2))

    def test_consistency_of_f_table_enforced(self):
        f = np.array([[0, 1], [0, 1]])
        with pytest.raises(ValidationError, match="0/1 table"):
            DiscreteSCM(
                p_c=np.array([0.5, 0.5]),
                p_x_given_c=np.full((2, 2), 0.5),
                p_m_given_xc=np.full((2, 2, 2), 0.5),
                p_y_given_xm=np.full((2, 2, 2), 0.5),
                f=f,
            )
