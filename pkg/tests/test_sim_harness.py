import math

import numpy as np
import pytest

from banditgames.game_core import (
    MatrixGame,
    Profile,
    RegularizedGame,
    exploitability_gap,
    hard_instance,
    kl_divergence,
    matching_pennies,
    regularized_equilibrium,
)
from banditgames.learners import importance_estimate, regexp3_descent, regexp3_mix, regexp3_params
from banditgames.sim_harness import (
    TRACE_HEADER,
    EpisodeTrace,
    RateCurve,
    fit_rate,
    geometric_checkpoints,
    kl_budget,
    kl_to_regularized_star,
    lower_bound_epsilon,
    lower_bound_experiment,
    lp_estimate,
    monte_carlo_lp,
    parse_trace_csv,
    replicate,
    replication_seed,
    run_batch,
    run_episode,
)


def reference_regexp3_episode(game, T, seed):
    """Scalar re-implementation of one regexp3-vs-regexp3 episode from the elementary steps."""
    A, B = game.A, game.B
    rng = np.random.Generator(np.random.PCG64(seed))
    rng.random()  # shared seed u, unused by this learner
    v = rng.random((T, 3))
    tau, eta_fn = regexp3_params(A, B, T)
    mir_mu, mir_nu = np.full(A, 1 / A), np.full(B, 1 / B)
    egs = []
    for t in range(1, T + 1):
        eta = eta_fn(t)
        mu = regexp3_mix(mir_mu, np.full(A, 1 / A), tau * eta)
        nu = regexp3_mix(mir_nu, np.full(B, 1 / B), tau * eta)
        egs.append(exploitability_gap(game, (mu, nu)))
        a = int(np.searchsorted(np.cumsum(mu)[:-1], v[t - 1, 0], side="right"))
        b = int(np.searchsorted(np.cumsum(nu)[:-1], v[t - 1, 1], side="right"))
        loss = float(v[t - 1, 2] < game.mean_loss[a, b])
        mir_mu = regexp3_descent(mu, importance_estimate(loss, a, mu, "min"), eta)
        mir_nu = regexp3_descent(nu, importance_estimate(loss, b, nu, "max"), eta)
    return np.array(egs)


class TestSeedsAndCheckpoints:
    def test_seed_is_deterministic_and_distinct(self):
        assert replication_seed(7, 3) == replication_seed(7, 3)
        assert len({replication_seed(7, r) for r in range(1000)}) == 1000
        assert replication_seed(7, 0) != replication_seed(8, 0)

    def test_geometric_grid(self):
        assert geometric_checkpoints(1000) == [1, 3, 10, 32, 100, 316, 1000]
        assert geometric_checkpoints(50, ratio=2) == [1, 2, 4, 8, 16, 32, 50]
        with pytest.raises(ValueError):
            geometric_checkpoints(10, ratio=1)


class TestRunEpisode:
    def test_static_uniform_deterministic_zero(self):
        g = hard_instance(0.0).with_mode("deterministic")
        trace = run_episode(g, "uniform", "uniform", 200, seed=1)
        assert trace.horizon == 200
        np.testing.assert_array_equal(trace.eg, 0.0)
        np.testing.assert_array_equal(trace.loss[(trace.a == trace.b)], 2 / 3)

    def test_same_seed_identical(self):
        g = hard_instance(0.03)
        t1 = run_episode(g, "regexp3:T=500", "eoe:p=1", 500, seed=11)
        t2 = run_episode(g, "regexp3:T=500", "eoe:p=1", 500, seed=11)
        assert t1.to_csv() == t2.to_csv()
        assert t1.to_csv() != run_episode(g, "regexp3:T=500", "eoe:p=1", 500, seed=12).to_csv()

    def test_first_round_uniform_for_regexp3(self):
        trace = run_episode(matching_pennies(), "regexp3:T=1", "regexp3:T=1", 1, seed=3)
        np.testing.assert_array_equal(trace.played_mu[0], [0.5, 0.5])
        np.testing.assert_array_equal(trace.played_nu[0], [0.5, 0.5])
        assert trace.eg[0] == 0.0

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(4)
        g = MatrixGame(rng.uniform(size=(3, 2)))
        T, seed = 300, 12345
        trace = run_episode(g, "regexp3:T=300", "regexp3:T=300", T, seed)
        np.testing.assert_allclose(trace.eg, reference_regexp3_episode(g, T, seed), atol=1e-12)

    def test_eg_nonnegative_and_delta_range(self):
        trace = run_episode(hard_instance(0.0), "exp3ix", "exp3ix", 2000, seed=5)
        assert np.all(trace.eg >= 0)
        assert np.all(np.abs(trace.delta) <= 0.5)
        assert set(np.unique(trace.loss)) <= {0.0, 1.0}

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            run_episode(hard_instance(0.0), "static:0.2,0.3,0.5", "uniform", 5, seed=0)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            run_episode(hard_instance(0.0), "uniform", "uniform", 0, seed=0)

    def test_batch_members_independent_of_batch(self):
        g = hard_instance(-0.05)
        seeds = [replication_seed(9, r) for r in range(6)]
        ck = [1, 10, 100, 400]
        together = run_batch(g, "doubling", "doubling", 400, seeds, ck)
        for r, s in enumerate(seeds):
            alone = run_batch(g, "doubling", "doubling", 400, [s], ck)
            np.testing.assert_array_equal(together.eg[:, r], alone.eg[:, 0])


class TestTraceCsv:
    def test_header_and_round_trip(self):
        g = hard_instance(0.0)
        T = 100
        reg_star = regularized_equilibrium(RegularizedGame(g, regexp3_params(2, 2, T)[0]))
        trace = run_episode(g, "regexp3:T=100", "regexp3:T=100", T, seed=2, reg_star=reg_star)
        text = trace.to_csv()
        lines = text.splitlines()
        assert lines[0] == TRACE_HEADER
        assert len(lines) == T + 1
        back = parse_trace_csv(text)
        for name in ("eg", "delta", "kl_star", "a", "b", "loss"):
            np.testing.assert_array_equal(getattr(back, name), getattr(trace, name))

    def test_optional_columns_empty(self):
        trace = run_episode(MatrixGame(np.full((2, 3), 0.5)), "uniform", "uniform", 3, seed=0)
        row = trace.to_csv().splitlines()[1].split(",")
        assert row[2] == "" and row[3] == ""
        back = parse_trace_csv(trace.to_csv())
        assert back.delta is None and back.kl_star is None

    def test_rejects_foreign_csv(self):
        with pytest.raises(ValueError):
            parse_trace_csv("a,b\n1,2\n")


class TestLpEstimate:
    def test_values(self):
        est, se = lp_estimate(np.array([[0.0, 3.0, 4.0]]), 2)
        assert est[0] == pytest.approx(math.sqrt(25 / 3), abs=1e-15)
        assert se[0] > 0

    def test_single_replication_has_no_stderr(self):
        est, se = lp_estimate(np.array([[0.25]]), 2)
        assert est[0] == 0.25 and math.isnan(se[0])

    def test_delta_method_matches_bootstrap(self):
        rng = np.random.default_rng(6)
        x = rng.beta(2, 5, size=4000)
        _, se = lp_estimate(x[None, :], 2)
        boot = [np.sqrt(np.mean(rng.choice(x, x.size) ** 2)) for _ in range(400)]
        assert se[0] == pytest.approx(np.std(boot), rel=0.15)


class TestMonteCarlo:
    def test_static_nash_is_zero(self):
        curve = monte_carlo_lp(hard_instance(0.0), "uniform", 50, 5, 2, [1, 10, 50], 0)
        np.testing.assert_array_equal(curve.estimate, 0.0)
        np.testing.assert_array_equal(curve.stderr, 0.0)

    def test_static_profile_exact(self):
        g = matching_pennies()
        spec = ("static:0.3,0.7", "static:0.6,0.4")
        curve = monte_carlo_lp(g, spec, 20, 4, 2, [1, 5, 20], 0)
        exact = exploitability_gap(g, Profile.of([0.3, 0.7], [0.6, 0.4]))
        np.testing.assert_allclose(curve.estimate, exact, rtol=1e-15)
        np.testing.assert_array_equal(curve.stderr, 0.0)

    def test_single_replication_equals_trace(self):
        g = hard_instance(0.02)
        ck = [1, 7, 30, 200]
        curve = monte_carlo_lp(g, "regexp3:T=200", 200, 1, 2, ck, master_seed=21)
        trace = run_episode(g, "regexp3:T=200", "regexp3:T=200", 200, replication_seed(21, 0), checkpoints=ck)
        np.testing.assert_allclose(curve.estimate, trace.eg[np.array(ck) - 1], rtol=0, atol=1e-15)

    def test_worker_count_does_not_change_bytes(self):
        g = hard_instance(0.04)
        ck = geometric_checkpoints(300)
        one = monte_carlo_lp(g, "eoe:p=2", 300, 7, 2, ck, master_seed=5, workers=1)
        two = monte_carlo_lp(g, "eoe:p=2", 300, 7, 2, ck, master_seed=5, workers=2)
        assert one.to_csv() == two.to_csv()

    def test_output_measure(self):
        curve = monte_carlo_lp(hard_instance(0.0), "exp3ix", 100, 3, 1, [10, 100], 2, measure="output")
        assert np.all(curve.estimate >= 0)
        with pytest.raises(ValueError):
            monte_carlo_lp(hard_instance(0.0), "exp3ix", 100, 3, 1, [10], 2, measure="best")

    def test_checkpoints_beyond_horizon(self):
        with pytest.raises(ValueError):
            monte_carlo_lp(hard_instance(0.0), "exp3ix", 10, 2, 2, [20], 0)

    def test_curve_csv_round_trip(self):
        curve = RateCurve([1, 10, 100], [0.5, 0.1 / 3, 0.01], [0.01, 0.002, np.nan], 5, 2.0)
        back = RateCurve.from_csv(curve.to_csv())
        assert back.to_csv() == curve.to_csv()
        assert curve.to_csv().splitlines()[0] == "t,lp_estimate,stderr,R"

    def test_curve_invariants(self):
        with pytest.raises(ValueError):
            RateCurve([1, 1], [0.1, 0.1], [0, 0], 2, 2.0)
        with pytest.raises(ValueError):
            RateCurve([1, 2], [0.1, -0.1], [0, 0], 2, 2.0)


class TestFitRate:
    @pytest.mark.parametrize("slope", [-0.25, -0.5, 0.0, -1 / 3])
    def test_planted_power_law(self, slope):
        t = np.array([1, 3, 10, 32, 100, 316, 1000, 3162, 10_000])
        curve = RateCurve(t, 0.7 * t.astype(float) ** slope, np.zeros(t.size), 10, 2.0)
        fit = fit_rate(curve)
        assert abs(fit.slope - slope) < 1e-9
        assert fit.intercept == pytest.approx(math.log(0.7), abs=1e-9)
        assert fit.t_range == (1, 10_000)

    def test_t_min(self):
        t = np.array([1, 10, 100, 1000, 10_000])
        y = np.where(t < 100, 1.0, 10.0 * t.astype(float) ** -0.5)
        fit = fit_rate(RateCurve(t, y, np.zeros(5), 3, 2.0), t_min=100)
        assert abs(fit.slope + 0.5) < 1e-9

    def test_errors(self):
        curve = RateCurve([1, 10, 100], [0.1, 0.0, 0.2], [0, 0, 0], 3, 2.0)
        with pytest.raises(ValueError):
            fit_rate(curve)
        with pytest.raises(ValueError):
            fit_rate(curve, t_min=5)


class TestKlToStar:
    def test_initial_value(self):
        rng = np.random.default_rng(7)
        g = MatrixGame(rng.uniform(size=(3, 2)))
        reg_star = regularized_equilibrium(RegularizedGame(g, 0.5))
        trace = run_episode(g, "regexp3:tau=0.5", "regexp3:tau=0.5", 10, seed=1, reg_star=reg_star, checkpoints=[1, 10])
        kl = kl_to_regularized_star(trace, reg_star)
        expected = kl_divergence(reg_star.mu, np.full(3, 1 / 3)) + kl_divergence(reg_star.nu, np.full(2, 0.5))
        assert kl[1] == pytest.approx(expected, abs=1e-14)
        assert kl[1] <= math.log(3) + math.log(2)
        assert trace.kl_star[0] == pytest.approx(expected, abs=1e-14)

    def test_requires_mirror(self):
        trace = run_episode(hard_instance(0.0), "exp3ix", "exp3ix", 5, seed=0)
        with pytest.raises(ValueError):
            kl_to_regularized_star(trace, Profile.uniform(2, 2))

    def test_mean_below_contraction_bound(self):
        g = hard_instance(0.0)
        tau, R, t = 0.2, 200, 1000
        reg_star = regularized_equilibrium(RegularizedGame(g, tau))
        reps = replicate(g, f"regexp3:tau={tau}", t, R, [t], master_seed=3, reg_star=reg_star)
        kl = reps.kl_star[0]
        bound = 2 * 4 / (tau**2 * t)
        assert bound == pytest.approx(0.2)
        assert kl.mean() <= bound + 2 * kl.std(ddof=1) / math.sqrt(R)


def _trace(a, delta):
    n = len(a)
    return EpisodeTrace(
        seed=0, min_spec="", max_spec="", eg=np.zeros(n), a=np.asarray(a), b=np.zeros(n, dtype=int),
        loss=np.zeros(n), delta=np.asarray(delta, dtype=float),
    )


class TestKlBudget:
    def test_zero_epsilon(self):
        assert kl_budget(_trace([0, 0, 1], [0.3, -0.2, 0.5]), 0.0) == (0.0, 0.0)

    def test_zero_delta(self):
        assert kl_budget(_trace([0, 0], [0.0, 0.0]), 1 / 12) == (0.0, 0.0)

    def test_single_round(self):
        budget, bound = kl_budget(_trace([0], [0.5]), 1 / 12)
        p, q = 2 / 3, 7 / 12
        expected = p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
        assert budget == pytest.approx(expected, abs=1e-15)
        assert budget == pytest.approx(0.0146397, abs=1e-7)
        assert bound == pytest.approx(1 / 24, abs=1e-15)

    def test_second_action_rounds_ignored(self):
        assert kl_budget(_trace([1, 1], [0.5, -0.5]), 1 / 12) == (0.0, 0.0)

    def test_bound_on_generated_traces(self):
        for spec in ("exp3ix", "regexp3:T=2000", "eoe:p=1"):
            trace = run_episode(hard_instance(0.0), spec, spec, 2000, seed=8)
            for eps in (-1 / 12, -0.01, 0.003, 1 / 12):
                budget, bound = kl_budget(trace, eps)
                assert 0 <= budget <= bound

    def test_errors(self):
        trace = run_episode(MatrixGame(np.full((2, 3), 0.5)), "uniform", "uniform", 3, seed=0)
        with pytest.raises(ValueError):
            kl_budget(trace, 0.01)
        with pytest.raises(ValueError):
            kl_budget(_trace([0], [0.1]), 0.5)


class TestLowerBound:
    def test_epsilon(self):
        eps = lower_bound_epsilon(10_000, 2)
        assert eps == pytest.approx(0.1 / (24 * math.sqrt(6)), rel=1e-15)
        assert eps == pytest.approx(0.0017010, abs=1e-7)

    def test_static_nash(self):
        T = 10_000
        rep = lower_bound_experiment("uniform", 2, T, 3, master_seed=0)
        eps = lower_bound_epsilon(T, 2)
        assert rep.worst >= eps / 2 - 1e-12
        assert rep.lp_plus == pytest.approx(eps / 2, abs=1e-15)
        assert rep.mean_kl_budget == 0.0

    def test_learning_run_reports(self):
        rep = lower_bound_experiment("exp3ix", 2, 500, 4, master_seed=1)
        assert rep.worst >= 0
        assert 0 <= rep.mean_kl_budget <= rep.mean_kl_bound
