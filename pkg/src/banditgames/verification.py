"""Named verification suites: each check reports a measured value, its bound and the margin.

A suite is a function returning a list of :class:`Check`.  Defaults are the
full-scale settings; keyword arguments shrink them for quick runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .game_core import (
    MatrixGame,
    RegularizedGame,
    exploitability_gaps,
    hard_instance,
    kl_divergence,
    matching_pennies,
    nash_value,
    regularized_equilibrium,
    reward_vector_law,
    solve_2x2,
)
from .learners import (
    doubling_prob,
    doubling_schedule,
    importance_estimate,
    make_learner,
    needs_shared_seed,
    regexp3_descent,
    regexp3_mix,
    shared_seed_bernoulli,
)
from .sim_harness import (
    EpisodeTrace,
    fit_rate,
    geometric_checkpoints,
    kl_budget,
    lower_bound_epsilon,
    lower_bound_experiment,
    monte_carlo_lp,
    RateCurve,
    replicate,
    replication_seed,
    run_batch,
)


@dataclass
class Check:
    """One verified inequality ``measured <= bound`` (or ``>=`` when ``relation`` says so)."""

    name: str
    measured: float
    bound: float
    relation: str = "<="

    @property
    def passed(self):
        if self.relation == "<=":
            return bool(self.measured <= self.bound)
        return bool(self.measured >= self.bound)

    @property
    def margin(self):
        return self.bound - self.measured if self.relation == "<=" else self.measured - self.bound

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name}: measured={self.measured:.6g} {self.relation} "
            f"bound={self.bound:.6g} (margin {self.margin:.3g})"
        )


def _random_games(rng, count, sizes=range(2, 6)):
    sizes = list(sizes)
    for _ in range(count):
        A, B = rng.choice(sizes), rng.choice(sizes)
        yield MatrixGame(rng.uniform(size=(A, B)))


# ---------------------------------------------------------------------------
# Exact-enumeration oracles
# ---------------------------------------------------------------------------


def estimator_bias(game, mu, nu):
    """Largest deviation between the enumerated mean of the importance estimates and the true vectors."""
    L = game.mean_loss
    e_min, e_max = np.zeros(game.A), np.zeros(game.B)
    for a in range(game.A):
        for b in range(game.B):
            for loss, pl in ((1.0, L[a, b]), (0.0, 1.0 - L[a, b])):
                w = mu[a] * nu[b] * pl
                e_min += w * importance_estimate(loss, a, mu, "min")
                e_max += w * importance_estimate(loss, b, nu, "max")
    return max(np.abs(e_min - L @ nu).max(), np.abs(e_max - (1.0 - mu @ L)).max())


def expected_descent_kl(own, mean_eff_loss, eta, side):
    """Enumerated E[KL(pi, descent(pi, estimate, eta))] over own action and Bernoulli loss.

    KL is evaluated in closed form, eta <pi, est> + log sum pi exp(-eta est),
    and cross-checked against the descent step when its output does not underflow.
    """
    total = 0.0
    log_own = np.log(own)
    for a in range(own.size):
        for eff, pl in ((1.0, mean_eff_loss[a]), (0.0, 1.0 - mean_eff_loss[a])):
            if pl == 0.0:
                continue
            loss = eff if side == "min" else 1.0 - eff
            est = importance_estimate(loss, a, own, side)
            z = log_own - eta * est
            zmax = z.max()
            kl = eta * float(own @ est) + zmax + math.log(np.exp(z - zmax).sum())
            new = regexp3_descent(own, est, eta)
            if np.all(new > 1e-300) and abs(kl - kl_divergence(own, new)) > 1e-8 * max(1.0, kl):
                raise AssertionError("closed-form KL disagrees with the descent step")
            total += own[a] * pl * kl
    return total


def scheduler_sequences(horizon):
    """The three probability sequences used by the scheduler checks."""
    t = np.arange(1, horizon + 1, dtype=float)
    doubling = []
    i = 1
    while len(doubling) < horizon:
        T_i, _ = doubling_schedule(i)
        doubling.extend(doubling_prob(i, j) for j in range(1, T_i + 1))
        i += 1
    return {
        "constant 0.5": np.full(horizon, 0.5),
        "t^-1/2": t**-0.5,
        "doubling p_i^j": np.array(doubling[:horizon]),
    }


def scheduler_check(p, grid=1000):
    """(worst deficit of sum B^i below floor(s^t), worst |grid mean of B^t - p^t|)."""
    s = np.concatenate([[0.0], np.cumsum(p)])
    u = np.arange(grid) / grid
    bits = shared_seed_bernoulli(u[None, :], s[:-1, None], s[1:, None])
    deficit = np.floor(s[1:, None]) - np.cumsum(bits, axis=0)
    return float(deficit.max()), float(np.abs(bits.mean(axis=1) - p).max())


def suite_oracles(seed=0, n_profiles=100, n_states=100, horizon=10_000, **_):
    rng = np.random.default_rng(seed)
    checks = []

    worst = max(
        estimator_bias(g, rng.dirichlet(np.ones(g.A)), rng.dirichlet(np.ones(g.B)))
        for g in _random_games(rng, n_profiles)
    )
    checks.append(Check("importance estimators unbiased (enumerated)", worst, 1e-12))

    for eta in (0.01, 0.1, 0.5):
        ratio = 0.0
        for g in _random_games(rng, n_states):
            mu, nu = rng.dirichlet(np.ones(g.A)), rng.dirichlet(np.ones(g.B))
            L = g.mean_loss
            ratio = max(
                ratio,
                expected_descent_kl(mu, L @ nu, eta, "min") / (eta**2 * g.A / 2),
                expected_descent_kl(nu, 1.0 - mu @ L, eta, "max") / (eta**2 * g.B / 2),
            )
        checks.append(Check(f"E[KL] / (eta^2 K/2) at eta={eta}", ratio, 1.0))

    for name, p in scheduler_sequences(horizon).items():
        deficit, mean_err = scheduler_check(p)
        checks.append(Check(f"scheduler sum B >= floor(s), {name} (max deficit)", deficit, 0.0))
        checks.append(Check(f"scheduler grid mean vs p, {name}", mean_err, 2e-3))

    err = 0.0
    for g in _random_games(rng, 20, sizes=[2]):
        value, _ = nash_value(g, tol=1e-9)
        err = max(err, abs(value - solve_2x2(g)[0]))
    checks.append(Check("Nash value vs 2x2 closed form", err, 1e-9))
    return checks


# ---------------------------------------------------------------------------
# Monte Carlo rate suites
# ---------------------------------------------------------------------------


def contraction_game(seed=2024):
    return MatrixGame(np.random.default_rng(seed).uniform(size=(3, 3)))


def suite_contraction(R=200, checkpoints=(10, 100, 1000, 10_000), taus=(0.2, 0.5), seed=1, workers=1, **_):
    checks = []
    for gname, game in (("M0", hard_instance(0.0)), ("random 3x3", contraction_game())):
        for tau in taus:
            reg_star = regularized_equilibrium(RegularizedGame(game, tau))
            reps = replicate(
                game, f"regexp3:tau={tau}", max(checkpoints), R, checkpoints, seed,
                reg_star=reg_star, workers=workers,
            )
            for i, t in enumerate(reps.checkpoints):
                kl = reps.kl_star[i]
                se = kl.std(ddof=1) / math.sqrt(R) if R > 1 else 0.0
                bound = 2 * (game.A + game.B) / (tau**2 * t)
                checks.append(Check(f"{gname} tau={tau} t={t}: mean KL(w*, w_t) vs bound + 2SE", kl.mean(), bound + 2 * se))
    return checks


def regexp3_bound(A, B, T):
    return 3 * math.sqrt(2) * ((A + B) / T) ** 0.25 * math.sqrt(math.log(A * B))


def regexp3_final_curve(game, horizons, R, seed, workers=1):
    """L^2 norm of EG at the final round, one tuned run per horizon."""
    est, se = [], []
    for T in horizons:
        c = monte_carlo_lp(game, f"regexp3:T={T}", T, R, 2, [T], seed, workers=workers)
        est.append(c.estimate[0])
        se.append(c.stderr[0])
    return RateCurve(list(horizons), est, se, R, 2.0)


def suite_regexp3_rate(R=100, horizons=(1000, 10_000, 100_000, 1_000_000), seed=1, workers=1, **_):
    checks = []
    for gname, game in (("M0", hard_instance(0.0)), ("matching pennies", matching_pennies())):
        curve = regexp3_final_curve(game, horizons, R, seed, workers)
        for T, e in zip(curve.t, curve.estimate):
            checks.append(Check(f"{gname} T={T}: ||EG||_2", e, regexp3_bound(2, 2, T)))
        if len(horizons) >= 3:
            slope = fit_rate(curve).slope
            checks.append(Check(f"{gname}: fitted slope >= -0.45", slope, -0.45, ">="))
            checks.append(Check(f"{gname}: fitted slope <= -0.15", slope, -0.15))
    return checks


def eoe_bound(A, B, t, p):
    return 17 * math.sqrt(A + B) * 2 ** (1 / p) * t ** (-1 / (2 + p)) * math.log(4 * (A + B) * t**2 / p)


def suite_eoe_rate(R=100, horizon=100_000, ps=(1.0, 2.0), seed=1, workers=1, fit_t_min=1000, **_):
    game = hard_instance(0.0)
    ck = geometric_checkpoints(horizon)
    checks = []
    for p in ps:
        curve = monte_carlo_lp(game, f"eoe:p={p:g}", horizon, R, p, ck, seed, workers=workers)
        for t, e in zip(curve.t, curve.estimate):
            checks.append(Check(f"EOE p={p:g} t={t}: ||EG||_p", e, eoe_bound(2, 2, t, p)))
    curve = monte_carlo_lp(game, "exp3ix", horizon, R, 2, ck, seed, measure="output", workers=workers)
    slope = fit_rate(curve, t_min=min(fit_t_min, ck[-3])).slope
    checks.append(Check("EXP3-IX average output: fitted slope >= -0.65", slope, -0.65, ">="))
    checks.append(Check("EXP3-IX average output: fitted slope <= -0.40", slope, -0.40))
    return checks


def doubling_bound(A, B, t):
    return 30 * ((A + B) / t) ** 0.25 * math.sqrt(math.log(A * B) * math.log(t))


def doubling_checkpoints(loops=6, count=20):
    total = sum(doubling_schedule(i)[0] for i in range(1, loops + 1))
    pts = np.unique(np.round(np.geomspace(2, total, count)).astype(int))
    return total, [int(t) for t in pts]


def suite_doubling_rate(R=100, loops=6, seed=1, workers=1, **_):
    total, ck = doubling_checkpoints(loops)
    curve = monte_carlo_lp(hard_instance(0.0), "doubling", total, R, 2, ck, seed, workers=workers)
    return [Check(f"doubling t={t}: ||EG||_2", e, doubling_bound(2, 2, t)) for t, e in zip(curve.t, curve.estimate)]


# ---------------------------------------------------------------------------
# Lower-bound constructions
# ---------------------------------------------------------------------------


def suite_lowerbound(T=10_000, p=2.0, R=20, seed=1, trace_horizon=2000, **_):
    checks = []
    err = 0.0
    for eps in np.linspace(-1 / 12, 1 / 12, 100):
        L = hard_instance(eps).mean_loss
        for delta in np.linspace(-0.5, 0.5, 100):
            law = np.array(reward_vector_law(eps, delta))
            err = max(err, np.abs(law - L @ np.array([0.5 + delta, 0.5 - delta])).max())
    # both sides are evaluated in different orders, so agreement is to a few ulps
    checks.append(Check("reward-vector law vs M^eps nu on 100x100 grid", err, 1e-15))

    eps_T = lower_bound_epsilon(T, p)
    ratio = 0.0
    for spec in ("exp3ix", "eoe:p=2", "regexp3:T=%d" % trace_horizon, "doubling"):
        seeds = [replication_seed(seed, r) for r in range(R)]
        res = run_batch(hard_instance(0.0), spec, spec, trace_horizon, seeds, [trace_horizon], record_rounds=True)
        for r in range(R):
            trace = EpisodeTrace.from_batch(res, r, spec, spec)
            for eps in (eps_T, 1 / 12):
                budget, bound = kl_budget(trace, eps)
                if bound > 0:
                    ratio = max(ratio, budget / bound)
    checks.append(Check("KL budget / reverse-Pinsker bound, all traces", ratio, 1.0))

    rep = lower_bound_experiment("uniform", p, T, 2, seed)
    checks.append(Check(f"static Nash worst-case ||EG||_p at eps_T={eps_T:.6g}", rep.worst, eps_T / 2 - 1e-12, ">="))
    checks.append(Check("static Nash KL budget", rep.mean_kl_budget, 0.0))
    return checks


# ---------------------------------------------------------------------------
# Structural properties
# ---------------------------------------------------------------------------


def policy_validity(spec, n=100, rounds=10_000, seed=0):
    """(worst |row sum - 1|, smallest entry) over every policy played or output."""
    rng = np.random.default_rng(seed)
    u = rng.random(n) if needs_shared_seed(spec) else None
    learner = make_learner(spec, "min", 3, 2, n=n, u=u)
    worst_sum, smallest = 0.0, 1.0
    for _ in range(rounds):
        pol = learner.act()
        worst_sum = max(worst_sum, np.abs(pol.sum(axis=1) - 1).max())
        smallest = min(smallest, pol.min())
        a = np.minimum((rng.random(n)[:, None] > np.cumsum(pol, axis=1)).sum(axis=1), 2)
        learner.observe(a, (rng.random(n) < 0.2 + 0.3 * a).astype(float))
    out = learner.output()
    return max(worst_sum, np.abs(out.sum(axis=1) - 1).max()), min(smallest, out.min())


def suite_properties(seed=0, n_pairs=100_000, workers=2, **_):
    rng = np.random.default_rng(seed)
    checks = []
    for spec in ("regexp3:T=10000", "exp3ix", "eoe:p=1", "doubling"):
        worst_sum, smallest = policy_validity(spec, seed=seed)
        checks.append(Check(f"{spec}: |sum - 1| after 10^6 updates", worst_sum, 1e-12))
        # strictly positive: at least the smallest subnormal double
        checks.append(Check(f"{spec}: smallest probability", smallest, float(np.nextafter(0.0, 1.0)), ">="))

    worst = -np.inf
    per = n_pairs // 4
    for A, B in ((2, 2), (3, 4), (5, 3), (4, 5)):
        g = MatrixGame(rng.uniform(size=(A, B)))
        mu, mu2 = rng.dirichlet(np.ones(A), per), rng.dirichlet(np.ones(A), per)
        nu, nu2 = rng.dirichlet(np.ones(B), per), rng.dirichlet(np.ones(B), per)
        gap = np.abs(exploitability_gaps(g, mu, nu) - exploitability_gaps(g, mu2, nu2))
        dist = np.abs(mu - mu2).sum(axis=1) + np.abs(nu - nu2).sum(axis=1)
        worst = max(worst, float((gap - dist).max()))
    checks.append(Check(f"EG 1-Lipschitz: max |dEG| - ||dw||_1 over {4 * per} pairs", worst, 1e-9))

    worst = -np.inf
    for k in (2, 3, 5):
        P, Q = rng.dirichlet(np.ones(k), 10_000), rng.dirichlet(np.ones(k), 10_000)
        worst = max(worst, float((np.abs(P - Q).sum(axis=1) ** 2 - 2 * kl_divergence(P, Q)).max()))
    checks.append(Check("Pinsker: max ||p - q||_1^2 - 2 KL(p, q)", worst, 1e-12))

    worst = 0.0
    for _ in range(1000):
        k = rng.integers(2, 6)
        m, an, c = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k)), rng.random()
        out = regexp3_mix(m, an, c)
        lhs = np.log(out[:, None] / out[None, :])
        rhs = (1 - c) * np.log(m[:, None] / m[None, :]) + c * np.log(an[:, None] / an[None, :])
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    checks.append(Check("mix log-odds identity", worst, 1e-12))

    game = hard_instance(0.05)
    ck = geometric_checkpoints(2000)
    mismatches = 0
    for spec in ("eoe:p=2", "regexp3:T=2000", "doubling"):
        one = monte_carlo_lp(game, spec, 2000, 12, 2, ck, seed, workers=1).to_csv()
        again = monte_carlo_lp(game, spec, 2000, 12, 2, ck, seed, workers=1).to_csv()
        many = monte_carlo_lp(game, spec, 2000, 12, 2, ck, seed, workers=max(2, workers)).to_csv()
        mismatches += (one != again) + (one != many)
    checks.append(Check("byte mismatches between reruns with 1 and N workers", mismatches, 0))
    return checks


SUITES = {
    "oracles": suite_oracles,
    "lemma2": suite_contraction,
    "thm3": suite_regexp3_rate,
    "thm2": suite_eoe_rate,
    "thm4": suite_doubling_rate,
    "lowerbound": suite_lowerbound,
    "properties": suite_properties,
}


def run_suite(name, **options):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name](**options)
