import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from anyshot.errors import ConfigError, DomainError, EmptyInput
from anyshot.loss import (BACKGROUND, IGNORE, AnchorPrediction, LossConfig, anchor_group_loss, binary_focal,
                          closed_form_gradient, dynamic_p_star, elementwise_loss, finite_diff_gradient,
                          focal_loss, gradient_check, group_loss, loss_curve, loss_gradient, penalty,
                          rebalanced_loss, rebalanced_pt, write_curve_csv, write_gradcheck_csv)

probs = st.floats(1e-4, 1 - 1e-4)
p_stars = st.floats(1e-3, 1.0)
betas = st.sampled_from([0.0, 0.5, 1.0, 2.0, 5.0]) | st.floats(0, 6)
gammas = st.sampled_from([0.0, 0.5, 1.0, 2.0]) | st.floats(0, 3)
alphas = st.floats(0.01, 1.0)
ys = st.integers(0, 1)


def cfg(**kw):
    return LossConfig(**kw)


CE = dict(alpha=1.0, gamma=0.0)


class TestPenalty:
    def test_examples(self):
        assert penalty(0.7, 0.7) == 0.0
        assert penalty(0.2, 0.5) == pytest.approx(math.log(1.3), abs=1e-6)
        assert penalty(0.2, 0.5) == pytest.approx(0.262364, abs=1e-6)
        assert penalty(1.0, 1.0) == 0.0

    @given(probs, p_stars)
    def test_sign(self, p, ps):
        v = penalty(p, ps)
        assert (v < 0) == (p > ps)

    def test_domain(self):
        with pytest.raises(DomainError):
            penalty(1.5, 0.5)
        with pytest.raises(DomainError):
            penalty(0.5, 0.0)


def test_dynamic_p_star():
    assert dynamic_p_star([0.1, 0.3, 0.2]) == 0.3
    assert dynamic_p_star([0.5, 0.5]) == 0.5
    with pytest.raises(EmptyInput):
        dynamic_p_star([])


class TestRebalancedPt:
    def test_examples(self):
        assert rebalanced_pt(0.5, 0.5, 5, 1) == 0.5
        assert rebalanced_pt(0.2, 0.5, 2, 1) == pytest.approx(0.2 / 1.69)
        assert rebalanced_pt(0.2, 0.5, 2, 1) == pytest.approx(0.118343, abs=1e-6)
        assert rebalanced_pt(0.3, 0.9, 3, 0) == pytest.approx(0.7)

    def test_domain(self):
        with pytest.raises(DomainError):
            rebalanced_pt(0.5, 0.5, -1, 1)
        with pytest.raises(DomainError):
            rebalanced_pt(-0.1, 0.5, 1, 1)


class TestRebalancedLoss:
    def test_moderate_case_equals_ce(self):
        v = rebalanced_loss((0.5, 1), cfg(beta=5, **CE), p_star=0.5)
        assert v == pytest.approx(math.log(2), abs=1e-12)

    def test_expected_case_clamps_to_zero(self):
        assert rebalanced_loss((0.9, 1), cfg(beta=1, **CE), p_star=0.5) == 0.0

    def test_hand_value(self):
        v = rebalanced_loss((0.2, 1), cfg(alpha=0.25, beta=2, gamma=2), p_star=0.5)
        pt = 0.2 / 1.3 ** 2
        assert v == pytest.approx(0.25 * (1 - pt) ** 2 * -math.log(pt), rel=1e-12)
        assert v == pytest.approx(0.4147, abs=1e-4)

    def test_fixed_p_star_default_from_config(self):
        c = cfg(p_star_mode="fixed", p_star_value=0.4, beta=2)
        assert rebalanced_loss((0.3, 1), c) == rebalanced_loss((0.3, 1), c, p_star=0.4)

    def test_clamped_probabilities(self):
        assert math.isfinite(rebalanced_loss((0.0, 1), cfg()))
        assert math.isfinite(rebalanced_loss((1.0, 0), cfg()))
        assert rebalanced_loss((0.0, 1), cfg(**CE, beta=0)) == pytest.approx(-math.log(1e-7))

    @given(probs, p_stars, betas, gammas, alphas, ys)
    def test_non_negative(self, p, ps, b, g, a, y):
        assert rebalanced_loss((p, y), cfg(alpha=a, beta=b, gamma=g), p_star=ps) >= 0.0

    @given(probs, p_stars, gammas, alphas, ys)
    def test_beta_zero_is_focal(self, p, ps, g, a, y):
        v = rebalanced_loss((p, y), cfg(alpha=a, gamma=g), p_star=ps, beta=0.0)
        assert abs(v - oracles.focal(p, y, a, g)) <= 1e-12

    @given(probs)
    def test_cross_entropy_reduction(self, p):
        v = rebalanced_loss((p, 1), cfg(beta=0.0, **CE), p_star=1.0)
        assert abs(v + math.log(p)) <= 1e-12

    @given(probs, betas, gammas, alphas)
    def test_moderate_case_matches_focal(self, p, b, g, a):
        v = rebalanced_loss((p, 1), cfg(alpha=a, beta=b, gamma=g), p_star=p)
        assert v == pytest.approx(oracles.focal(p, 1, a, g), rel=1e-12, abs=1e-15)

    @given(probs, p_stars, gammas, alphas, st.floats(0, 5), st.floats(0, 5))
    def test_extreme_case_monotone_in_beta(self, p, ps, g, a, b1, b2):
        assume(p < ps)
        lo, hi = sorted((b1, b2))
        c = cfg(alpha=a, gamma=g)
        assert rebalanced_loss((p, 1), c, ps, beta=hi) >= rebalanced_loss((p, 1), c, ps, beta=lo) - 1e-12

    @given(probs, p_stars, betas)
    def test_expected_case_below_ce(self, p, ps, b):
        assume(p > ps)
        assert rebalanced_loss((p, 1), cfg(**CE), ps, beta=b) <= -math.log(p) + 1e-12

    @given(probs, p_stars, betas, betas, gammas, alphas)
    def test_negative_label_beta_invariant(self, p, ps, b1, b2, g, a):
        c = cfg(alpha=a, gamma=g)
        assert rebalanced_loss((p, 0), c, ps, beta=b1) == rebalanced_loss((p, 0), c, ps, beta=b2)


class TestFocal:
    def test_examples(self):
        assert focal_loss((0.9, 1), cfg(alpha=0.25, gamma=2)) == pytest.approx(0.25 * 0.01 * -math.log(0.9))
        assert focal_loss((0.9, 1), cfg(alpha=0.25, gamma=2)) == pytest.approx(2.634e-4, abs=1e-7)
        assert focal_loss((0.5, 1), cfg(**CE)) == pytest.approx(0.693147, abs=1e-6)

    def test_random_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p, g, a, y = rng.uniform(0.001, 0.999), rng.uniform(0, 3), rng.uniform(0.05, 1), int(rng.integers(2))
            c = cfg(alpha=a, gamma=g, beta=float(rng.uniform(0, 5)))
            assert abs(focal_loss((p, y), c) - rebalanced_loss((p, y), c, p_star=0.7, beta=0.0)) <= 1e-12
            assert abs(focal_loss((p, y), c) - float(binary_focal(p, y, a, g))) <= 1e-12


class TestGradient:
    def test_hand_gradient(self):
        g = loss_gradient(0.5, 0.8, cfg(beta=1, **CE), 1)
        assert g == pytest.approx(-2 - 1 / 1.3, rel=1e-12)
        assert g == pytest.approx(-2.7692, abs=1e-4)

    def test_clamped_region_is_flat(self):
        c = cfg(beta=1, **CE)
        assert loss_gradient(0.9, 0.5, c, 1) == 0.0
        assert finite_diff_gradient(0.9, 0.5, c, 1) == 0.0

    def test_finite_difference_of_ce(self):
        assert finite_diff_gradient(0.5, 1.0, cfg(beta=0, **CE), 1) == pytest.approx(-2.0, rel=1e-8)

    def test_finite_difference_step_errors(self):
        with pytest.raises(DomainError):
            finite_diff_gradient(0.5, 1.0, cfg(), 1, h=0.0)
        with pytest.raises(DomainError):
            finite_diff_gradient(1e-7, 1.0, cfg(), 1, h=1e-6)

    def test_outside_clamp_gradient_is_zero(self):
        _, grad = elementwise_loss(np.array([0.0, 1.0]), np.array([1, 0]), 1.0, 2.0, 0.25, 2.0)
        np.testing.assert_array_equal(grad, [0.0, 0.0])

    @settings(max_examples=300)
    @given(st.floats(0.01, 0.99), p_stars, betas, st.sampled_from([0.0, 1.0, 2.0]), alphas, ys)
    def test_matches_finite_differences(self, p, ps, b, g, a, y):
        assume(abs(rebalanced_pt(p, ps, b, y) - 1.0) > 1e-3)
        c = cfg(alpha=a, beta=b, gamma=g)
        an = loss_gradient(p, ps, c, y)
        num = finite_diff_gradient(p, ps, c, y, h=1e-6)
        assert abs(an - num) <= 1e-4 * (abs(an) + 1e-8) or abs(an - num) <= 1e-9

    @settings(max_examples=300)
    @given(st.floats(0.01, 0.99), p_stars, betas, st.sampled_from([0.0, 1.0, 2.0]), alphas, ys)
    def test_closed_form_agrees(self, p, ps, b, g, a, y):
        assume(abs(rebalanced_pt(p, ps, b, y) - 1.0) > 1e-6)
        c = cfg(alpha=a, beta=b, gamma=g)
        alpha_t = a if y else 1 - a
        direct = loss_gradient(p, ps, c, y)
        closed = closed_form_gradient(p, ps, alpha_t, b, g, y)
        assert closed == pytest.approx(direct, rel=1e-9, abs=1e-12)


class TestGradientCheck:
    def test_default_grid_passes(self):
        points = gradient_check()
        assert len(points) > 1500
        assert all(p.passed for p in points)
        assert {p.beta for p in points} == {0.0, 0.5, 1.0, 2.0, 5.0}

    def test_corruption_is_detected(self):
        points = gradient_check(corrupt=0.01)
        assert sum(not p.passed for p in points) > 0

    def test_clamped_points_have_zero_gradient(self):
        points = gradient_check(ps=(0.9,), p_stars=(0.5,), betas=(1.0,), gammas=(0.0,), alphas=(1.0,), labels=(1,))
        assert len(points) == 1 and points[0].analytic == 0.0 and points[0].passed

    def test_csv(self, tmp_path):
        points = gradient_check(ps=(0.2, 0.4), betas=(1.0,), gammas=(2.0,), alphas=(0.25,))
        write_gradcheck_csv(tmp_path / "g.csv", points)
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "p,p_star,beta,gamma,alpha,y,analytic,numeric,pass"
        assert len(lines) == len(points) + 1


class TestLossCurve:
    def test_ce_curve(self):
        rows = loss_curve(cfg(beta=0, **CE), 1.0, 101)
        np.testing.assert_allclose(rows[:, 1], -np.log(rows[:, 0]), rtol=0, atol=1e-12)
        assert rows[0, 0] == pytest.approx(1e-7) and rows[-1, 0] == pytest.approx(1 - 1e-7)

    def test_beta_ordering_at_p_star_one(self):
        curves = {b: loss_curve(cfg(beta=b, **CE), 1.0, 201)[:, 1] for b in (1.0, 2.0, 5.0)}
        assert np.all(curves[5.0] >= curves[2.0]) and np.all(curves[2.0] >= curves[1.0])

    def test_sub_ce_region(self):
        rows = loss_curve(cfg(beta=2, **CE), 0.5, 201)
        above = rows[:, 0] > 0.5
        assert np.all(rows[above, 1] <= -np.log(rows[above, 0]))

    def test_dynamic_curve_is_focal_above_half(self):
        rows = loss_curve(cfg(beta=5, **CE), None, 201)
        upper = rows[:, 0] >= 0.5
        np.testing.assert_allclose(rows[upper, 1], -np.log(rows[upper, 0]), atol=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(DomainError):
            loss_curve(cfg(), 1.0, 1)

    def test_csv(self, tmp_path):
        write_curve_csv(tmp_path / "c.csv", loss_curve(cfg(), 1.0, 5))
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "p,loss,grad" and len(lines) == 6


class TestLossConfig:
    def test_defaults(self):
        c = LossConfig()
        assert (c.alpha, c.gamma, c.beta, c.lambda_mix, c.epsilon) == (0.25, 2.0, 5.0, 0.1, 1e-7)

    @pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(beta=-1), dict(gamma=-0.1), dict(lambda_mix=1.5),
                                     dict(p_star_mode="sometimes"), dict(p_star_value=0.0), dict(epsilon=0.1)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            LossConfig(**bad)

    def test_flat_round_trip(self):
        c = LossConfig(alpha=0.5, beta=2.0, lambda_mix=0.3, p_star_mode="fixed", p_star_value=0.6)
        flat = c.to_flat()
        assert set(flat) == {"alpha", "beta", "gamma", "lambda", "p_star_mode", "p_star_value", "epsilon"}
        assert LossConfig.from_flat(flat) == c
        assert LossConfig.from_flat({k: str(v) for k, v in flat.items()}) == c


class TestAnchorPrediction:
    def test_validation(self):
        AnchorPrediction([0.2, 0.3], [0, 1], "novel")
        with pytest.raises(DomainError):
            AnchorPrediction([0.2, 0.3], [1, 1], "seen")
        with pytest.raises(DomainError):
            AnchorPrediction([0.0, 0.3], [0, 1], "seen")
        with pytest.raises(DomainError):
            AnchorPrediction([0.2], [0, 1], "seen")
        with pytest.raises(DomainError):
            AnchorPrediction([0.2], [1], "other")


class TestAnchorGroupLoss:
    C = cfg(alpha=1.0, gamma=0.0, beta=5.0, lambda_mix=0.1)

    def test_hand_mix(self):
        preds = [AnchorPrediction([math.exp(-2)], [1], "seen"), AnchorPrediction([math.exp(-4)], [1], "novel")]
        assert anchor_group_loss(preds, self.C) == pytest.approx(0.1 * 2.0 + 0.9 * 4.0, rel=1e-12)

    def test_lambda_one_drops_novel(self):
        seen = [AnchorPrediction([0.3, 0.6], [1, 0], "seen"), AnchorPrediction([0.2, 0.1], [0, 0], "background")]
        novel = [AnchorPrediction([0.05, 0.4], [0, 1], "novel")]
        c = self.C.replace(lambda_mix=1.0)
        assert anchor_group_loss(seen + novel, c) == pytest.approx(anchor_group_loss(seen, c), rel=1e-12)

    def test_seen_only_is_lambda_times_mean_focal(self):
        rng = np.random.default_rng(5)
        c = cfg(lambda_mix=0.3)
        preds, expected = [], 0.0
        for i in range(4):
            s = rng.uniform(0.05, 0.95, size=3)
            lab = np.zeros(3)
            lab[i % 3] = 1
            preds.append(AnchorPrediction(s, lab, "seen"))
            expected += sum(oracles.focal(p, y, 0.25, 2.0) for p, y in zip(s, lab))
        assert anchor_group_loss(preds, c) == pytest.approx(0.3 * expected / 4, rel=1e-12)

    def test_empty_and_invalid(self):
        assert anchor_group_loss([], self.C) == 0.0
        with pytest.raises(DomainError):
            anchor_group_loss([AnchorPrediction([0.3], [0], "novel")], self.C)


class TestGroupLoss:
    def random_batch(self, rng, A=12, C=4):
        scores = rng.uniform(0.02, 0.98, size=(A, C))
        labels = rng.integers(-2, C, size=A)
        labels[:3] = [0, C - 1, BACKGROUND]
        return scores, labels

    def test_focal_scheme_matches_oracle(self):
        rng = np.random.default_rng(7)
        scores, labels = self.random_batch(rng)
        novel = np.array([False, False, True, True])
        total, _ = group_loss(scores, labels, novel, cfg(), rebalance=False)
        n_pos = int((labels >= 0).sum())
        expected = sum(oracles.focal(scores[a, c], labels[a] == c, 0.25, 2.0)
                       for a in range(len(labels)) if labels[a] != IGNORE for c in range(4)) / n_pos
        assert total == pytest.approx(expected, rel=1e-12)

    def test_mixed_groups_match_oracle(self):
        rng = np.random.default_rng(8)
        scores, labels = self.random_batch(rng, A=20)
        novel = np.array([False, True, False, True])
        c = cfg(p_star_mode="fixed", p_star_value=0.8, lambda_mix=0.25)
        total, _ = group_loss(scores, labels, novel, c)
        seen_sum = novel_sum = 0.0
        n_seen_pos = n_novel = 0
        for a, lab in enumerate(labels):
            if lab == IGNORE:
                continue
            is_novel = lab >= 0 and novel[lab]
            beta = 5.0 if is_novel else 0.0
            s = sum(rebalanced_loss((scores[a, k], int(lab == k)), c, 0.8, beta=beta) for k in range(4))
            if is_novel:
                novel_sum += s
                n_novel += 1
            else:
                seen_sum += s
                n_seen_pos += lab >= 0
        expected = 0.25 * seen_sum / n_seen_pos + 0.75 * novel_sum / n_novel
        assert total == pytest.approx(expected, rel=1e-12)

    def test_background_only_seen_group(self):
        scores = np.array([[0.2, 0.7], [0.4, 0.3], [0.6, 0.1]])
        labels = np.array([BACKGROUND, BACKGROUND, 1])
        c = cfg(lambda_mix=0.5, p_star_mode="fixed")
        total, _ = group_loss(scores, labels, np.array([False, True]), c)
        bg = sum(oracles.focal(p, 0, 0.25, 2.0) for p in scores[:2].ravel())
        nov = sum(rebalanced_loss((p, y), c, 1.0) for p, y in zip(scores[2], (0, 1)))
        assert total == pytest.approx(0.5 * bg / 1 + 0.5 * nov, rel=1e-12)

    def test_unmixed_weights(self):
        rng = np.random.default_rng(9)
        scores, labels = self.random_batch(rng)
        novel = np.ones(4, dtype=bool)
        c0 = cfg(beta=0.0)
        mixed_off, _ = group_loss(scores, labels, novel, c0, rebalance=True, mix=False)
        focal, _ = group_loss(scores, labels, novel, c0, rebalance=False)
        assert mixed_off == pytest.approx(focal, rel=1e-12)

    @pytest.mark.parametrize("rebalance,mix", [(True, True), (False, True), (True, False)])
    def test_gradient_matches_finite_differences(self, rebalance, mix):
        rng = np.random.default_rng(10)
        scores, labels = self.random_batch(rng, A=6, C=3)
        novel = np.array([False, True, True])
        c = cfg(p_star_mode="fixed", p_star_value=0.9, lambda_mix=0.3)
        _, grad = group_loss(scores, labels, novel, c, rebalance, mix)
        h = 1e-6
        for a in range(6):
            for k in range(3):
                up, dn = scores.copy(), scores.copy()
                up[a, k] += h
                dn[a, k] -= h
                num = (group_loss(up, labels, novel, c, rebalance, mix)[0]
                       - group_loss(dn, labels, novel, c, rebalance, mix)[0]) / (2 * h)
                assert grad[a, k] == pytest.approx(num, rel=1e-4, abs=1e-8)

    def test_ignored_anchors_contribute_nothing(self):
        scores = np.array([[0.3, 0.4], [0.9, 0.9]])
        labels = np.array([0, IGNORE])
        total, grad = group_loss(scores, labels, np.zeros(2, dtype=bool), cfg())
        alone, _ = group_loss(scores[:1], labels[:1], np.zeros(2, dtype=bool), cfg())
        assert total == alone
        np.testing.assert_array_equal(grad[1], 0.0)
