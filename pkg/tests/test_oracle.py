"""Enumeration-oracle checks: projection, risks, minimax, two-factor posterior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pidbatch import oracle as oc
from pidbatch.errors import ValidationError
from pidbatch.scmgen import DiscreteJoint, gen_discrete_toy

GRID = (0.05, 0.275, 0.5, 0.725, 0.95)


class TestPidProject:
    @given(st.floats(0.02, 0.98), st.floats(0.0, 0.45))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, p_sc, noise):
        once = oc.pid_project(gen_discrete_toy(p_sc, noise))
        twice = oc.pid_project(once)
        assert np.max(np.abs(once.table - twice.table)) <= 1e-12

    def test_half_correlation_is_fixed_point(self):
        j = gen_discrete_toy(0.5, 0.1)
        assert np.max(np.abs(oc.pid_project(j).table - j.table)) <= 1e-12

    def test_label_s_independence_exact(self):
        p = oc.pid_project(gen_discrete_toy(0.9, 0.1))
        p_ys = p.label_s_marginal()
        gap = p_ys - np.outer(p.label_marginal(), p.s_marginal())
        assert np.max(np.abs(gap)) <= 1e-15

    def test_channel_preserved_cellwise(self):
        j = gen_discrete_toy(0.8, 0.07)
        p = oc.pid_project(j)
        ch_in = j.table / j.label_s_marginal()[None, :, :]
        ch_out = p.table / p.label_s_marginal()[None, :, :]
        assert np.max(np.abs(ch_in - ch_out)) <= 1e-12

    def test_needed_zero_cell_rejected(self):
        # mass only on the diagonal (label == s), identity channel
        table = np.zeros((4, 2, 2))
        table[0, 0, 0] = 0.5
        table[3, 1, 1] = 0.5
        with pytest.raises(ValidationError):
            oc.pid_project(DiscreteJoint(table))


class TestBayesPosterior:
    def test_rows_sum_to_one(self):
        clf = oc.bayes_posterior(gen_discrete_toy(0.7, 0.12))
        assert np.max(np.abs(clf.table.sum(axis=1) - 1.0)) <= 1e-12

    def test_noiseless_channel_is_deterministic(self):
        clf = oc.bayes_posterior(gen_discrete_toy(0.6, 0.0))
        assert np.all(np.isin(clf.table, (0.0, 1.0)))

    def test_symmetric_toy_swaps_with_label(self):
        clf = oc.bayes_posterior(gen_discrete_toy(0.5, 0.1))
        for x in range(4):
            assert_allclose(clf.table[x, 0], clf.table[x ^ 2, 1], atol=1e-15)

    def test_zero_marginal_column_flagged(self):
        table = np.zeros((5, 2, 2))
        table[:4] = gen_discrete_toy(0.7, 0.1).table
        clf = oc.bayes_posterior(DiscreteJoint(table))
        assert clf.defined.tolist() == [True, True, True, True, False]
        assert np.all(np.isnan(clf.table[4]))


class TestEnvRisk:
    def test_perfect_classifier_on_noiseless_env(self):
        j = gen_discrete_toy(0.8, 0.0)
        assert oc.env_risk(oc.bayes_posterior(j), j) == 0.0

    def test_uniform_classifier_scores_log_two(self):
        j = gen_discrete_toy(0.8, 0.1)
        uniform = oc.ExactClassifier(np.full((4, 2), 0.5), np.ones(4, dtype=bool))
        assert_allclose(oc.env_risk(uniform, j), math.log(2), rtol=1e-15)

    def test_zero_probability_event_gives_infinite_risk(self):
        j = gen_discrete_toy(0.8, 0.1)
        hard = oc.ExactClassifier(np.tile([1.0, 0.0], (4, 1)), np.ones(4, dtype=bool))
        assert oc.env_risk(hard, j) == math.inf

    def test_undefined_column_with_mass_rejected(self):
        j = gen_discrete_toy(0.8, 0.1)
        clf = oc.bayes_posterior(j)
        clf.defined[1] = False
        with pytest.raises(ValidationError):
            oc.env_risk(clf, j)

    def test_bayes_optimality_by_enumeration(self):
        rng = np.random.default_rng(77)
        for p_sc in GRID:
            j = gen_discrete_toy(p_sc, 0.1)
            own = oc.env_risk(oc.bayes_posterior(j), j)
            rivals = [oc.bayes_posterior(gen_discrete_toy(q, 0.1)) for q in GRID]
            rivals.append(oc.ExactClassifier(np.full((4, 2), 0.5), np.ones(4, dtype=bool)))
            for _ in range(50):
                t = rng.dirichlet((1.0, 1.0), size=4)
                rivals.append(oc.ExactClassifier(t, np.ones(4, dtype=bool)))
            for c in rivals:
                assert own <= oc.env_risk(c, j) + 1e-12

    def test_pid_classifier_never_beaten_to_random_guess(self):
        for p_sc in GRID:
            j = gen_discrete_toy(p_sc, 0.1)
            clf = oc.bayes_posterior(oc.pid_project(j))
            assert oc.env_risk(clf, j) <= math.log(2) + 1e-12


class TestMinimax:
    def test_standard_grid_passes(self):
        rep = oc.minimax_table(GRID, 0.1)
        assert rep.all_pass
        assert rep.names[-1] == "pid"

    def test_half_classifier_coincides_with_projection_arm(self):
        mid = oc.bayes_posterior(gen_discrete_toy(0.5, 0.1))
        proj = oc.bayes_posterior(oc.pid_project(gen_discrete_toy(0.95, 0.1)))
        assert np.max(np.abs(mid.table - proj.table)) <= 1e-12

    def test_extreme_classifier_has_strictly_worse_worst_case(self):
        rep = oc.minimax_table(GRID, 0.1)
        i95 = rep.names.index("env@0.95")
        # worst case of the 0.95-trained arm is attained at the opposite extreme
        assert rep.risk_matrix[i95].argmax() == 0
        assert rep.worst_case[i95] > rep.worst_case[-1] + 1e-6

    def test_risks_reproducible_by_independent_enumeration(self):
        rep = oc.minimax_table(GRID, 0.1)
        joints = [gen_discrete_toy(p, 0.1) for p in GRID]
        # a from-scratch second path: nested scalar loops, no shared helpers
        for ci, name in enumerate(rep.names):
            if name == "pid":
                src = oc.pid_project(joints[0])
            else:
                src = joints[GRID.index(float(name.split("@")[1]))]
            pxy = src.table.sum(axis=2)
            px = pxy.sum(axis=1)
            for ei, env in enumerate(joints):
                expected = 0.0
                exy = env.table.sum(axis=2)
                for x in range(4):
                    for y in range(2):
                        if exy[x, y] > 0:
                            expected -= exy[x, y] * math.log(pxy[x, y] / px[x])
                assert abs(expected - rep.risk_matrix[ci, ei]) <= 1e-12

    def test_small_grid_rejected(self):
        with pytest.raises(ValidationError):
            oc.minimax_table((0.3, 0.5, 0.7), 0.1)

    def test_report_renders_one_line_per_check(self):
        rep = oc.minimax_table(GRID, 0.1)
        body = [ln for ln in rep.render().splitlines() if not ln.startswith("#")]
        assert len(body) == len(GRID)
        assert all(ln.endswith("PASS") for ln in body)


class TestExcessRiskIdentity:
    def test_identity_on_every_toy_instance(self):
        for p_sc in GRID:
            for noise in (0.03, 0.1, 0.25):
                lhs, rhs = oc.pid_excess_identity(gen_discrete_toy(p_sc, noise))
                assert abs(lhs - rhs) <= 1e-10
                assert lhs <= 1e-12  # never worse than the uniform guess

    def test_identity_vanishes_when_channel_ignores_s(self):
        # x depends on the label bit only: KL term hits zero, risk equals ln2 - MI
        q = 0.1
        table = np.zeros((4, 2, 2))
        for y in (0, 1):
            for s in (0, 1):
                p_ys = 0.5 * (0.8 if s == y else 0.2)
                for b1 in (0, 1):
                    for b0 in (0, 1):
                        p_b1 = 1.0 - q if b1 == y else q
                        table[2 * b1 + b0, y, s] = p_ys * p_b1 * 0.5
        lhs, rhs = oc.pid_excess_identity(DiscreteJoint(table))
        assert abs(lhs - rhs) <= 1e-10
        assert rhs < 0.0


class TestTwoFactor:
    def test_balanced_mixture_zeroes_the_style_weight(self):
        rep = oc.two_factor_bayes(0.5, 1.0, 0.7, 1.0, 1.3, distinguishable=False)
        assert rep.fs_coefficient == 0.0

    def test_distinguishable_zeroes_the_style_weight(self):
        rep = oc.two_factor_bayes(0.9, 1.0, 0.7, 1.0, 1.3, distinguishable=True)
        assert rep.fs_coefficient == 0.0
        z = rep.log_odds(np.array([0.3]), np.array([5.0]))
        assert_allclose(z, 2.0 * 0.3, rtol=1e-15)

    def test_closed_form_coefficient(self):
        rep = oc.two_factor_bayes(0.9, 1.0, 0.2, 1.0, 2.0, distinguishable=False)
        assert_allclose(rep.fs_coefficient, (2 * 0.9 - 1) * 2 * 0.2 / 4.0, rtol=1e-15)

    def test_coefficient_is_slope_of_log_odds_at_origin(self):
        rep = oc.two_factor_bayes(0.8, 0.5, 0.6, 1.1, 0.9, distinguishable=False)
        h = 1e-7
        slope = (rep.log_odds(0.0, h) - rep.log_odds(0.0, -h)) / (2 * h)
        assert_allclose(slope, rep.fs_coefficient, rtol=1e-6)

    def test_posterior_bounds_and_symmetry(self):
        rep = oc.two_factor_bayes(0.85, 1.0, 0.4, 1.0, 1.0, distinguishable=False)
        fx = np.linspace(-3, 3, 11)
        fs = np.linspace(-3, 3, 11)
        p = rep.posterior(fx, fs)
        assert np.all((p > 0) & (p < 1))
        assert_allclose(rep.posterior(-fx, -fs), 1.0 - p, rtol=1e-12)

    def test_parameter_validation(self):
        with pytest.raises(ValidationError):
            oc.two_factor_bayes(0.9, 1.0, 1.0, 0.0, 1.0, distinguishable=False)
        with pytest.raises(ValidationError):
            oc.two_factor_bayes(1.0, 1.0, 1.0, 1.0, 1.0, distinguishable=False)


class TestBatchAudit:
    def test_independent_discrete_batch_has_zero_mi(self):
        rep = oc.batch_pid_check([(np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))])
        assert rep.mi_raw_values[0] == 0.0
        assert rep.chi2_values[0] == 0.0
        # the small-sample term is subtracted even at the exact zero
        assert_allclose(rep.mean_mi, -1.0 / 8.0, rtol=1e-12)

    def test_perfectly_correlated_batch_hits_log_two(self):
        rep = oc.batch_pid_check([(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1]))])
        assert_allclose(rep.mi_raw_values[0], math.log(2), rtol=1e-12)
        assert_allclose(rep.mean_mi, math.log(2) - 1.0 / 8.0, rtol=1e-12)

    def test_single_spurious_value_needs_no_correction(self):
        rep = oc.batch_pid_check([(np.array([0, 0, 1, 1]), np.zeros(4))])
        assert rep.mean_mi == 0.0
        assert rep.mi_raw_values[0] == 0.0

    def test_single_label_batch_excluded(self):
        rep = oc.batch_pid_check([
            (np.zeros(4, dtype=int), np.array([0, 1, 0, 1])),
            (np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])),
        ])
        assert rep.excluded == [0]
        assert len(rep.mi_values) == 1

    def test_no_usable_batch_raises_on_aggregate(self):
        rep = oc.batch_pid_check([(np.zeros(3, dtype=int), np.arange(3))])
        with pytest.raises(ValidationError):
            _ = rep.mean_mi

    def test_continuous_clusters_are_binned(self):
        rng = np.random.default_rng(0)
        batches = []
        for _ in range(20):
            labels = np.repeat([0, 1], 32)
            s = np.where(labels[:, None] == 0, -4.0, 4.0) + rng.normal(size=(64, 2))
            batches.append((labels, s))
        rep = oc.batch_pid_check(batches)
        assert rep.k_bins == 8
        assert rep.mean_mi > 0.5  # labels determine the cluster

    def test_matched_continuous_batches_score_near_zero(self):
        # pooled data is bimodal; each matched batch sits inside one cluster,
        # so its labels carry no information about the within-cluster bins
        rng = np.random.default_rng(1)
        batches = []
        for b in range(40):
            labels = np.repeat([0, 1], 32)
            center = -4.0 if b % 2 == 0 else 4.0
            s = center + rng.normal(size=(64, 2))
            batches.append((labels, s))
        rep = oc.batch_pid_check(batches)
        assert abs(rep.mean_mi) < 0.02
        assert np.mean(rep.mi_raw_values) > 0.0  # raw plug-in keeps its bias floor


class TestQuadrature:
    def std_normal(self, mu):
        return lambda x: np.exp(-0.5 * (x - mu) ** 2) / math.sqrt(2 * math.pi)

    def test_identical_gaussians(self):
        kl = oc.kl_quadrature(self.std_normal(0), self.std_normal(0), -10, 10, 20_000)
        assert abs(kl) <= 1e-8

    def test_unit_mean_shift_is_half(self):
        kl = oc.kl_quadrature(self.std_normal(1), self.std_normal(0), -12, 12, 40_000)
        assert abs(kl - 0.5) <= 1e-6

    def test_step_contract_enforced(self):
        with pytest.raises(ValidationError):
            oc.kl_quadrature(self.std_normal(0), self.std_normal(0), -5, 5, 100)
        with pytest.raises(ValidationError):
            oc.quadrature_integral(self.std_normal(0), -5, 5, 100)

    def test_density_integrates_to_one(self):
        total = oc.quadrature_integral(self.std_normal(0.7), -12, 12, 20_000)
        assert abs(total - 1.0) <= 1e-8


class TestMiHelpers:
    def test_histogram_mi_known_value(self):
        a = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        b = np.array([0, 0, 0, 1, 1, 1, 1, 0])
        # joint (3/8, 1/8 / 1/8, 3/8): MI = ln2 - H(1/4)
        want = math.log(2) - oc.binary_entropy(0.25)
        assert_allclose(oc.histogram_mi(a, b), want, rtol=1e-12)

    @given(st.integers(2, 5), st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_mi_nonnegative_and_symmetric(self, k, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(k, size=200)
        b = rng.integers(k, size=200)
        assert oc.histogram_mi(a, b) >= 0
        assert_allclose(oc.histogram_mi(a, b), oc.histogram_mi(b, a), rtol=1e-12)

    def test_binary_entropy_endpoints(self):
        assert oc.binary_entropy(0.0) == 0.0
        assert oc.binary_entropy(1.0) == 0.0
        assert_allclose(oc.binary_entropy(0.5), math.log(2), rtol=1e-15)
