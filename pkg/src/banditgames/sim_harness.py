"""Episodes under the bandit protocol, Monte Carlo L^p curves, rate fits and KL accounting."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .game_core import bernoulli_kl, exploitability_gaps, hard_instance
from .learners import MAX, MIN, make_learner, needs_shared_seed

RNG_CHUNK = 4096


# ---------------------------------------------------------------------------
# Seeds and checkpoints
# ---------------------------------------------------------------------------


def kl_from_log(p, log_q):
    """KL(p, q) along the last axis with q given by its logarithm; exact even when q underflows."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - log_q), 0.0)
    return terms.sum(axis=-1)


def replication_seed(master_seed, index):
    """Seed of replication ``index``, mixed from the master seed; independent of run order."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def geometric_checkpoints(horizon, ratio=math.sqrt(10.0), start=1):
    """Rounded powers of ``ratio`` from ``start`` up to ``horizon``, always including ``horizon``."""
    if ratio <= 1:
        raise ValueError("ratio must exceed 1")
    pts = []
    x = float(start)
    while x < horizon * (1 + 1e-12):
        pts.append(int(round(x)))
        x *= ratio
    pts.append(int(horizon))
    return sorted({t for t in pts if 1 <= t <= horizon})


def _as_spec_pair(learner_spec):
    if isinstance(learner_spec, str):
        return learner_spec, learner_spec
    min_spec, max_spec = learner_spec
    return min_spec, max_spec


def _sample_actions(policy, v):
    """Inverse-CDF sampling of one action per row from uniforms ``v``."""
    actions = np.zeros(policy.shape[0], dtype=np.int64)
    cum = np.zeros(policy.shape[0])
    for k in range(policy.shape[1] - 1):
        cum = cum + policy[:, k]
        actions += cum <= v
    return actions


# ---------------------------------------------------------------------------
# Batched episode engine
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    """Checkpointed diagnostics for a batch of independent replications.

    Arrays indexed (checkpoint, replication[, action]).
    """

    seeds: list
    checkpoints: np.ndarray
    eg: np.ndarray
    played_mu: np.ndarray
    played_nu: np.ndarray
    eg_output: np.ndarray | None = None
    mirror_mu: np.ndarray | None = None  # log-probabilities
    mirror_nu: np.ndarray | None = None  # log-probabilities
    kl_star: np.ndarray | None = None
    rounds: dict | None = None


def run_batch(
    game,
    min_spec,
    max_spec,
    horizon,
    seeds,
    checkpoints=None,
    reg_star=None,
    record_rounds=False,
    track_output=False,
):
    """Run one episode per seed, all in lockstep, and collect checkpoint diagnostics.

    Every replication owns its RNG stream, so its trajectory does not depend
    on which other replications share the batch.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(seeds)
    A, B = game.A, game.B
    ckpts = np.array(sorted(set(checkpoints if checkpoints is not None else [horizon])), dtype=np.int64)
    if ckpts.size == 0 or ckpts[0] < 1 or ckpts[-1] > horizon:
        raise ValueError("checkpoints must lie in [1, horizon]")
    ckpt_index = {int(t): i for i, t in enumerate(ckpts)}

    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    u = np.array([rng.random() for rng in rngs])
    shared = u if (needs_shared_seed(min_spec) or needs_shared_seed(max_spec)) else None
    min_l = make_learner(min_spec, MIN, A, B, n, u=shared)
    max_l = make_learner(max_spec, MAX, A, B, n, u=shared)
    has_mirror = hasattr(min_l, "log_mirror") and hasattr(max_l, "log_mirror")

    C = ckpts.size
    eg_ck = np.empty((C, n))
    mu_ck = np.empty((C, n, A))
    nu_ck = np.empty((C, n, B))
    eg_out = np.empty((C, n)) if track_output else None
    mir_mu = np.empty((C, n, A)) if has_mirror else None
    mir_nu = np.empty((C, n, B)) if has_mirror else None
    kl_ck = np.empty((C, n)) if (has_mirror and reg_star is not None) else None

    rounds = None
    if record_rounds:
        rounds = {
            "eg": np.empty((horizon, n)),
            "a": np.empty((horizon, n), dtype=np.int64),
            "b": np.empty((horizon, n), dtype=np.int64),
            "loss": np.empty((horizon, n)),
        }
        if B == 2:
            rounds["delta"] = np.empty((horizon, n))
        if kl_ck is not None:
            rounds["kl_star"] = np.empty((horizon, n))

    def kl_to_star(log_mu, log_nu):
        return kl_from_log(reg_star[0], log_mu) + kl_from_log(reg_star[1], log_nu)

    block = None
    for t in range(1, horizon + 1):
        k = (t - 1) % RNG_CHUNK
        if k == 0:
            size = min(RNG_CHUNK, horizon - t + 1)
            block = np.stack([rng.random((size, 3)) for rng in rngs], axis=1)
        v = block[k]

        ci = ckpt_index.get(t)
        if has_mirror and (ci is not None or (record_rounds and kl_ck is not None)):
            m_mu, m_nu = min_l.log_mirror, max_l.log_mirror
            if ci is not None:
                mir_mu[ci], mir_nu[ci] = m_mu, m_nu
                if kl_ck is not None:
                    kl_ck[ci] = kl_to_star(m_mu, m_nu)
            if record_rounds and kl_ck is not None:
                rounds["kl_star"][t - 1] = kl_to_star(m_mu, m_nu)

        mu = min_l.act()
        nu = max_l.act()
        a = _sample_actions(mu, v[:, 0])
        b = _sample_actions(nu, v[:, 1])
        loss = np.broadcast_to(game.sample_loss(a, b, v[:, 2]), (n,))

        if record_rounds or ci is not None:
            eg = exploitability_gaps(game, mu, nu)
            if ci is not None:
                eg_ck[ci], mu_ck[ci], nu_ck[ci] = eg, mu, nu
            if record_rounds:
                rounds["eg"][t - 1] = eg
                rounds["a"][t - 1], rounds["b"][t - 1], rounds["loss"][t - 1] = a, b, loss
                if B == 2:
                    rounds["delta"][t - 1] = nu[:, 0] - 0.5

        # each side sees only its own action and the shared scalar loss
        min_l.observe(a, loss)
        max_l.observe(b, loss)

        if track_output and ci is not None:
            eg_out[ci] = exploitability_gaps(game, min_l.output(), max_l.output())

    return BatchResult(
        seeds=list(seeds),
        checkpoints=ckpts,
        eg=eg_ck,
        played_mu=mu_ck,
        played_nu=nu_ck,
        eg_output=eg_out,
        mirror_mu=mir_mu,
        mirror_nu=mir_nu,
        kl_star=kl_ck,
        rounds=rounds,
    )


# ---------------------------------------------------------------------------
# Single episodes
# ---------------------------------------------------------------------------

TRACE_HEADER = "t,eg,delta,kl_star,a,b,loss"


def _fmt(x):
    return "" if x is None else repr(float(x))


@dataclass
class EpisodeTrace:
    """Per-round record of one episode, plus full profiles at the checkpoints.

    Actions are 0-based indices.  ``delta`` is nu^t(first action) - 1/2 and is
    only recorded for two-action max players; ``kl_star`` only when a
    regularized equilibrium was supplied and both learners expose mirror
    iterates.  Mirror iterates at the checkpoints are kept as log-probabilities.
    """

    seed: int
    min_spec: str
    max_spec: str
    eg: np.ndarray
    a: np.ndarray
    b: np.ndarray
    loss: np.ndarray
    delta: np.ndarray | None = None
    kl_star: np.ndarray | None = None
    checkpoints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    played_mu: np.ndarray | None = None
    played_nu: np.ndarray | None = None
    mirror_mu: np.ndarray | None = None  # log-probabilities
    mirror_nu: np.ndarray | None = None  # log-probabilities

    @property
    def horizon(self):
        return len(self.eg)

    def to_csv(self):
        out = io.StringIO()
        out.write(TRACE_HEADER + "\n")
        for i in range(self.horizon):
            row = (
                str(i + 1),
                _fmt(self.eg[i]),
                _fmt(None if self.delta is None else self.delta[i]),
                _fmt(None if self.kl_star is None else self.kl_star[i]),
                str(int(self.a[i])),
                str(int(self.b[i])),
                _fmt(self.loss[i]),
            )
            out.write(",".join(row) + "\n")
        return out.getvalue()

    @classmethod
    def from_batch(cls, batch, r, min_spec, max_spec):
        rd = batch.rounds
        if rd is None:
            raise ValueError("batch was run without per-round recording")
        pick = lambda arr: None if arr is None else arr[:, r].copy()  # noqa: E731
        return cls(
            seed=batch.seeds[r],
            min_spec=min_spec,
            max_spec=max_spec,
            eg=rd["eg"][:, r].copy(),
            a=rd["a"][:, r].copy(),
            b=rd["b"][:, r].copy(),
            loss=rd["loss"][:, r].copy(),
            delta=pick(rd.get("delta")),
            kl_star=pick(rd.get("kl_star")),
            checkpoints=batch.checkpoints.copy(),
            played_mu=batch.played_mu[:, r].copy(),
            played_nu=batch.played_nu[:, r].copy(),
            mirror_mu=None if batch.mirror_mu is None else batch.mirror_mu[:, r].copy(),
            mirror_nu=None if batch.mirror_nu is None else batch.mirror_nu[:, r].copy(),
        )


def run_episode(game, min_spec, max_spec, horizon, seed, reg_star=None, checkpoints=None):
    """Play ``horizon`` rounds of the bandit protocol between two learners.

    Deterministic in (seed, learner specs).  Full profiles are kept at
    ``checkpoints`` (default: a geometric grid); scalars are kept every round.
    """
    if checkpoints is None:
        checkpoints = geometric_checkpoints(horizon)
    batch = run_batch(
        game, min_spec, max_spec, horizon, [seed], checkpoints, reg_star=reg_star, record_rounds=True
    )
    return EpisodeTrace.from_batch(batch, 0, min_spec, max_spec)


def parse_trace_csv(text):
    """Inverse of ``EpisodeTrace.to_csv`` for the per-round columns."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or ",".join(rows[0]) != TRACE_HEADER:
        raise ValueError("not a trace CSV")
    body = rows[1:]
    col = lambda j: [r[j] for r in body]  # noqa: E731
    opt = lambda j: None if all(x == "" for x in col(j)) else np.array([float(x) for x in col(j)])  # noqa: E731
    return EpisodeTrace(
        seed=0,
        min_spec="",
        max_spec="",
        eg=np.array([float(x) for x in col(1)]),
        delta=opt(2),
        kl_star=opt(3),
        a=np.array([int(x) for x in col(4)]),
        b=np.array([int(x) for x in col(5)]),
        loss=np.array([float(x) for x in col(6)]),
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

CURVE_HEADER = "t,lp_estimate,stderr,R"


@dataclass
class RateCurve:
    t: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    R: int
    p: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.estimate = np.asarray(self.estimate, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("checkpoints must be strictly increasing")
        if np.any(self.estimate < 0):
            raise ValueError("L^p estimates cannot be negative")

    def to_csv(self):
        lines = [CURVE_HEADER]
        for t, e, s in zip(self.t, self.estimate, self.stderr):
            lines.append(f"{int(t)},{_fmt(e)},{_fmt(s)},{self.R}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, p=2.0):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or ",".join(rows[0]) != CURVE_HEADER:
            raise ValueError("not a curve CSV")
        body = rows[1:]
        R = int(body[0][3]) if body else 0
        return cls(
            t=[int(r[0]) for r in body],
            estimate=[float(r[1]) for r in body],
            stderr=[float(r[2]) for r in body],
            R=R,
            p=p,
        )


def lp_estimate(samples, p):
    """Plug-in (mean |X|^p)^(1/p) along the last axis, with a delta-method standard error."""
    x = np.abs(np.asarray(samples, dtype=float)) ** p
    R = x.shape[-1]
    m = x.mean(axis=-1)
    est = m ** (1.0 / p)
    if R < 2:
        return est, np.full_like(est, np.nan)
    se_m = x.std(axis=-1, ddof=1) / math.sqrt(R)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(m > 0, (1.0 / p) * m ** (1.0 / p - 1.0) * se_m, 0.0)
    return est, se


def _run_block(args):
    game, min_spec, max_spec, horizon, seeds, checkpoints, reg_star, track_output = args
    res = run_batch(game, min_spec, max_spec, horizon, seeds, checkpoints, reg_star, False, track_output)
    return res.eg, res.eg_output, res.kl_star


@dataclass
class ReplicationSet:
    """Per-replication checkpoint samples, columns in replication-index order."""

    checkpoints: np.ndarray
    eg: np.ndarray
    eg_output: np.ndarray | None
    kl_star: np.ndarray | None

    @property
    def R(self):
        return self.eg.shape[1]


def replicate(
    game,
    learner_spec,
    horizon,
    R,
    checkpoints,
    master_seed,
    reg_star=None,
    track_output=False,
    workers=1,
):
    """Run ``R`` independent episodes and gather their checkpoint diagnostics.

    Replication ``r`` always uses ``replication_seed(master_seed, r)``, so the
    result does not depend on ``workers``.
    """
    if R < 1:
        raise ValueError("need at least one replication")
    min_spec, max_spec = _as_spec_pair(learner_spec)
    seeds = [replication_seed(master_seed, r) for r in range(R)]
    checkpoints = sorted(set(int(t) for t in checkpoints))
    if workers <= 1:
        parts = [_run_block((game, min_spec, max_spec, horizon, seeds, checkpoints, reg_star, track_output))]
    else:
        blocks = [b for b in np.array_split(np.arange(R), workers) if b.size]
        jobs = [
            (game, min_spec, max_spec, horizon, [seeds[i] for i in b], checkpoints, reg_star, track_output)
            for b in blocks
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    eg = np.concatenate([p[0] for p in parts], axis=1)
    eg_out = np.concatenate([p[1] for p in parts], axis=1) if track_output else None
    kl = np.concatenate([p[2] for p in parts], axis=1) if parts[0][2] is not None else None
    return ReplicationSet(np.array(checkpoints, dtype=np.int64), eg, eg_out, kl)


def monte_carlo_lp(
    game,
    learner_spec,
    horizon,
    R,
    p,
    checkpoints,
    master_seed,
    measure="played",
    workers=1,
):
    """Empirical L^p norm of the exploitability gap at each checkpoint.

    ``measure="played"`` uses the played profile (last iterate);
    ``measure="output"`` uses the learners' recommended outputs.
    """
    if not p > 0:
        raise ValueError("p must be positive")
    if measure not in ("played", "output"):
        raise ValueError("measure must be 'played' or 'output'")
    if max(checkpoints) > horizon:
        raise ValueError("checkpoints exceed the horizon")
    reps = replicate(
        game, learner_spec, horizon, R, checkpoints, master_seed,
        track_output=(measure == "output"), workers=workers,
    )
    samples = reps.eg if measure == "played" else reps.eg_output
    est, se = lp_estimate(samples, p)
    return RateCurve(reps.checkpoints, est, se, R, p)


# ---------------------------------------------------------------------------
# Rate fits
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    slope: float
    intercept: float
    slope_stderr: float
    t_range: tuple


def fit_rate(curve, t_min=0.0):
    """Least-squares fit of log(estimate) against log(t) over checkpoints t >= t_min."""
    keep = curve.t >= t_min
    t, y = curve.t[keep], curve.estimate[keep]
    if t.size < 3:
        raise ValueError("need at least 3 checkpoints above t_min")
    if np.any(y <= 0):
        raise ValueError("cannot fit nonpositive estimates on a log scale")
    res = stats.linregress(np.log(t), np.log(y))
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr), (int(t[0]), int(t[-1])))


# ---------------------------------------------------------------------------
# KL diagnostics
# ---------------------------------------------------------------------------


def kl_to_regularized_star(trace, reg_star):
    """KL(w*, w^{tau,t}) at each checkpoint of ``trace``, equilibrium first.

    Returns a dict mapping checkpoint round to divergence.
    """
    if trace.mirror_mu is None or trace.mirror_nu is None:
        raise ValueError("trace carries no mirror iterates; run it with a regularized EXP3 learner")
    kl = kl_from_log(reg_star[0], trace.mirror_mu) + kl_from_log(reg_star[1], trace.mirror_nu)
    return {int(t): float(k) for t, k in zip(trace.checkpoints, np.atleast_1d(kl))}


def kl_budget(trace, epsilon):
    """Information about sign(epsilon) carried by the min-player's observations.

    Sums KL(Bern(1/2 + d/3), Bern(1/2 + d/3 - 2 d eps)) over rounds where the
    first action was played, with d = delta^t.  Returns (budget, bound) with
    bound = 24 eps^2 sum 1{a=first} d^2, and fails loudly if budget > bound.
    """
    if trace.delta is None:
        raise ValueError("trace has no delta diagnostics (needs a two-action max player)")
    if not -1.0 / 12.0 <= epsilon <= 1.0 / 12.0:
        raise ValueError("epsilon outside [-1/12, 1/12]")
    d = np.asarray(trace.delta, dtype=float)
    first = np.asarray(trace.a) == 0
    p0 = 0.5 + d / 3.0
    p1 = p0 - 2.0 * d * epsilon
    budget = float(np.sum(np.where(first, bernoulli_kl(p0, p1), 0.0)))
    bound = float(24.0 * epsilon**2 * np.sum(np.where(first, d**2, 0.0)))
    if budget > bound * (1.0 + 1e-12):
        raise RuntimeError(f"KL budget {budget} exceeds its bound {bound}")
    return budget, bound


@dataclass
class LowerBoundReport:
    epsilon: float
    p: float
    T: int
    R: int
    lp_plus: float
    lp_minus: float
    mean_kl_budget: float
    mean_kl_bound: float

    @property
    def worst(self):
        return max(self.lp_plus, self.lp_minus)


def lower_bound_epsilon(T, p):
    return T ** (-1.0 / (2.0 + p)) / (24.0 * math.sqrt(6.0))


def lower_bound_experiment(learner_spec, p, T, R, master_seed):
    """Run a learner on the two hard instances +-eps_T and account the KL budget on eps = 0.

    Reports evidence only; the budget-vs-bound inequality is the one asserted check.
    """
    eps = lower_bound_epsilon(T, p)
    min_spec, max_spec = _as_spec_pair(learner_spec)
    seeds = [replication_seed(master_seed, r) for r in range(R)]
    lp = {}
    for sign in (1.0, -1.0):
        res = run_batch(hard_instance(sign * eps), min_spec, max_spec, T, seeds, [T])
        lp[sign] = float(lp_estimate(res.eg[0], p)[0])
    base = run_batch(hard_instance(0.0), min_spec, max_spec, T, seeds, [T], record_rounds=True)
    budgets, bounds = [], []
    for r in range(R):
        b, bd = kl_budget(EpisodeTrace.from_batch(base, r, min_spec, max_spec), eps)
        budgets.append(b)
        bounds.append(bd)
    return LowerBoundReport(eps, p, T, R, lp[1.0], lp[-1.0], float(np.mean(budgets)), float(np.mean(bounds)))
