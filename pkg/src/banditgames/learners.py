"""Uncoupled bandit learners for one side of a zero-sum matrix game.

Every learner carries a batch of ``n`` independent replications so that Monte
Carlo runs can be vectorized; a single episode is simply ``n=1``.  The
contract for a player with ``K`` actions is

* ``act()`` returns the (n, K) array of policies to sample from this round,
* ``observe(actions, losses)`` feeds back the player's own sampled actions
  (ints, shape (n,)) and the realized losses in [0, 1],
* ``output()`` returns the currently recommended policies.

``observe`` never receives the opponent's action.  Max-side learners convert
the loss into their own loss ``1 - loss`` internally.

Simplex iterates are stored as log-probabilities and normalized with
log-sum-exp.
"""

from __future__ import annotations

import math
import re

import numpy as np

from .game_core import log_normalize

MIN, MAX = "min", "max"

# Division guard for the importance weights; never applied to the policies.
PROB_FLOOR = 1e-300

# Returned policies are floored here so that probabilities whose logarithm is
# below the double range (after large early steps) stay strictly positive.
_TINY = np.finfo(float).tiny


def _probs(log_p):
    return np.maximum(np.exp(log_p), _TINY)


def _check_side(side):
    if side not in (MIN, MAX):
        raise ValueError(f"side must be 'min' or 'max', got {side!r}")


def _effective_loss(losses, side):
    losses = np.asarray(losses, dtype=float)
    if losses.size and (losses.min() < 0.0 or losses.max() > 1.0):
        raise ValueError("losses must lie in [0, 1]")
    return losses if side == MIN else 1.0 - losses


# ---------------------------------------------------------------------------
# Parameter schedules
# ---------------------------------------------------------------------------


def exp3ix_rates(t, K):
    """Anytime EXP3-IX rates: eta = sqrt(log K / (K t)) and gamma = eta / 2."""
    t = np.asarray(t)
    if np.any(t < 1) or K < 2:
        raise ValueError("exp3ix_rates needs t >= 1 and K >= 2")
    eta = np.sqrt(math.log(K) / (K * t))
    return eta, eta / 2.0


def eoe_explore_prob(t, p):
    """Exploration probability t^(-p / (2 + p)) for a target L^p rate."""
    if t < 1 or not 0 < p <= 2:
        raise ValueError("eoe_explore_prob needs t >= 1 and p in (0, 2]")
    return t ** (-p / (2.0 + p))


def regexp3_params(A, B, T):
    """Regularization tau and the learning-rate schedule t -> 2 / (tau (t + 1)) for horizon T."""
    if A < 2 or B < 2 or T < 1:
        raise ValueError("regexp3_params needs A, B >= 2 and T >= 1")
    tau = ((A + B) / T) ** 0.25 * math.sqrt(2.0 / (math.log(A) + math.log(B)))

    def eta(t):
        return 2.0 / (tau * (np.asarray(t) + 1.0))

    return tau, eta


def doubling_schedule(i):
    """Loop length T_i = 32 i 2^i and temperature S_i = 8 2^i."""
    if i < 1:
        raise ValueError("loop index starts at 1")
    return 32 * i * 2**i, 8.0 * 2**i


def doubling_prob(i, j):
    """Probability of playing the new instance at round j of loop i: min(1, e^(j/S_i) / T_i)."""
    T_i, S_i = doubling_schedule(i)
    if not 1 <= j <= T_i:
        raise ValueError(f"round {j} outside loop {i} of length {T_i}")
    return min(1.0, math.exp(j / S_i) / T_i)


def eoe_rate(t, p, probs, g):
    """Last-iterate rate 2^(1/p) [(p^t)^(1/p) + g(r^t)] guaranteed by the explore/exploit wrapper.

    ``probs`` maps a round to its exploration probability and ``g`` is the
    output rate of the inner algorithm; r^t = floor(sum_{k<=t} p^k).
    """
    s = math.fsum(probs(k) for k in range(1, t + 1))
    r = math.floor(s)
    return 2.0 ** (1.0 / p) * (probs(t) ** (1.0 / p) + g(r)), r


def shared_seed_bernoulli(u, s_prev, s_new):
    """floor(s_new + u) - floor(s_prev + u); both players compute the same bit from a shared u."""
    inc = np.asarray(s_new) - np.asarray(s_prev)
    # differences of floating cumulative sums may overshoot by an ulp
    if np.any(inc < -1e-12) or np.any(inc > 1 + 1e-12):
        raise ValueError("increment must lie in [0, 1]")
    return (np.floor(np.asarray(s_new) + u) - np.floor(np.asarray(s_prev) + u)).astype(int)


# ---------------------------------------------------------------------------
# Estimators and elementary updates
# ---------------------------------------------------------------------------


def importance_estimate(loss, own_action, policy, side):
    """Unbiased importance-weighted loss vector for one side.

    Min side: loss / mu(a) on the sampled action; max side: (1 - loss) / nu(b).
    """
    _check_side(side)
    policy = np.asarray(policy, dtype=float)
    prob = policy[own_action]
    if prob <= 0:
        raise ValueError("sampled action has zero probability")
    est = np.zeros_like(policy)
    est[own_action] = _effective_loss(loss, side) / prob
    return est


def ix_estimate(loss, own_action, policy, gamma, side):
    """Implicit-exploration estimate: effective loss / (pi(a) + gamma) on the sampled action."""
    _check_side(side)
    policy = np.asarray(policy, dtype=float)
    est = np.zeros_like(policy)
    est[own_action] = _effective_loss(loss, side) / (policy[own_action] + gamma)
    return est


def regexp3_mix(mirror, anchor, tau_eta):
    """Geometric mixture mirror^(1 - c) anchor^c, normalized; the KL-regularization step."""
    c = np.asarray(tau_eta, dtype=float)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("tau * eta must lie in [0, 1]")
    log_mix = (1.0 - c) * np.log(mirror) + c * np.log(anchor)
    return np.exp(log_normalize(log_mix))


def regexp3_descent(played, est_loss, eta):
    """Exponential-weights step played * exp(-eta * est_loss), normalized."""
    return np.exp(log_normalize(np.log(played) - eta * np.asarray(est_loss, dtype=float)))


# ---------------------------------------------------------------------------
# Learners
# ---------------------------------------------------------------------------


_ARANGE_CACHE = {}


def _arange(n):
    r = _ARANGE_CACHE.get(n)
    if r is None:
        r = _ARANGE_CACHE[n] = np.arange(n)
        r.setflags(write=False)
    return r


def _rows(learner, where):
    """Replication indices to update: all of them, or those selected by a boolean mask."""
    if where is None:
        return _arange(learner.n)
    return np.flatnonzero(where)


class StaticLearner:
    """Plays a fixed policy and ignores feedback."""

    def __init__(self, policy, n=1):
        self.policy = np.broadcast_to(np.asarray(policy, dtype=float), (n, len(policy))).copy()
        self.n = n
        self.K = self.policy.shape[1]

    def act(self):
        return self.policy

    def observe(self, actions, losses, where=None):
        pass

    def output(self):
        return self.policy


class Exp3IX:
    """Anytime EXP3-IX with rates eta_t = 2 gamma_t = sqrt(log K / (K t)).

    ``output()`` is the arithmetic mean of the played policy vectors.
    """

    def __init__(self, K, side, n=1):
        _check_side(side)
        self.K, self.side, self.n = K, side, n
        self.t = np.zeros(n, dtype=np.int64)
        self.cum_est_loss = np.zeros((n, K))
        self.policy_sum = np.zeros((n, K))
        self.last_policy = None
        self._gamma = None

    def act(self):
        eta, gamma = exp3ix_rates(self.t + 1, self.K)
        self.last_policy = _probs(log_normalize(-eta[:, None] * self.cum_est_loss))
        self._gamma = gamma
        return self.last_policy

    def observe(self, actions, losses, where=None):
        if self.last_policy is None:
            raise RuntimeError("observe() called before act()")
        rows = _rows(self, where)
        a = np.asarray(actions)[rows]
        eff = _effective_loss(np.asarray(losses)[rows], self.side)
        prob = self.last_policy[rows, a]
        self.cum_est_loss[rows, a] += eff / (prob + self._gamma[rows])
        self.policy_sum[rows] += self.last_policy[rows]
        self.t[rows] += 1

    def output(self):
        out = np.full((self.n, self.K), 1.0 / self.K)
        seen = self.t > 0
        out[seen] = self.policy_sum[seen] / self.t[seen, None]
        return out


class RegularizedExp3:
    """Two-step regularized mirror descent with unbiased importance-weighted losses.

    Each round the mirror iterate is pulled toward the uniform anchor with
    weight tau * eta_t = 2 / (t + 1), the mixture is played, and an
    exponential-weights step on the importance estimate produces the next
    mirror iterate.  ``output()`` is the played policy itself.
    """

    def __init__(self, K, side, tau, n=1):
        _check_side(side)
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.K, self.side, self.tau, self.n = K, side, float(tau), n
        self.log_anchor = np.full(K, -math.log(K))
        self.log_mirror = np.tile(self.log_anchor, (n, 1))
        self.t = np.ones(n, dtype=np.int64)
        self._log_played = None
        self.guard_hits = 0

    def eta(self, t):
        return 2.0 / (self.tau * (np.asarray(t) + 1.0))

    @property
    def mirror(self):
        return _probs(self.log_mirror)

    def _played_log(self):
        c = (2.0 / (self.t + 1.0))[:, None]
        return log_normalize((1.0 - c) * self.log_mirror + c * self.log_anchor)

    def act(self):
        self._log_played = self._played_log()
        self._played = _probs(self._log_played)
        return self._played

    def observe(self, actions, losses, where=None):
        if self._log_played is None:
            raise RuntimeError("observe() called before act()")
        rows = _rows(self, where)
        a = np.asarray(actions)[rows]
        eff = _effective_loss(np.asarray(losses)[rows], self.side)
        prob = self._played[rows, a]
        small = prob < PROB_FLOOR
        if small.any():
            self.guard_hits += int(small.sum())
            prob = np.maximum(prob, PROB_FLOOR)
        new_log = self._log_played[rows]
        new_log[_arange(rows.size), a] -= self.eta(self.t[rows]) * eff / prob
        self.log_mirror[rows] = log_normalize(new_log)
        self.t[rows] += 1

    def output(self):
        return _probs(self._played_log())


class ExploreOrExploit:
    """Synchronized explore/exploit wrapper around a learner with a good ``output()``.

    Round t explores with probability ``probs(t)``.  The explore bit comes from
    the shared-seed scheduler, so two players built with the same ``u`` always
    explore together.  Explore rounds play ``inner.act()`` and forward the
    feedback; exploit rounds play ``inner.output()`` and drop the feedback.
    """

    def __init__(self, inner, probs, u):
        self.inner = inner
        self.n, self.K = inner.n, inner.K
        self.probs = probs
        self.u = np.broadcast_to(np.asarray(u, dtype=float), (self.n,)).copy()
        if np.any((self.u < 0) | (self.u >= 1)):
            raise ValueError("shared seed must lie in [0, 1)")
        self.t = 0
        self.cum_prob = 0.0
        self.floor_prev = np.floor(self.cum_prob + self.u)
        self._explore = None

    def act(self):
        s_new = self.cum_prob + self.probs(self.t + 1)
        self._pending = s_new
        self._explore = np.floor(s_new + self.u) > self.floor_prev
        explore_pol = self.inner.act()
        exploit_pol = self.inner.output()
        return np.where(self._explore[:, None], explore_pol, exploit_pol)

    def observe(self, actions, losses):
        if self._explore is None:
            raise RuntimeError("observe() called before act()")
        if self._explore.any():
            self.inner.observe(actions, losses, where=self._explore)
        self.t += 1
        self.cum_prob = self._pending
        self.floor_prev = np.floor(self.cum_prob + self.u)
        self._explore = None

    def output(self):
        return self.inner.output()

    @property
    def explored(self):
        return self._explore


class DoublingTrick:
    """Anytime meta-procedure over regularized EXP3 instances with growing horizons.

    Loop i lasts T_i rounds.  At round j of the loop, the new instance i is
    played with probability p_i^j, otherwise instance i - 1 is played; the
    choice uses the shared-seed scheduler on per-loop cumulative
    probabilities.  Instance 0 plays uniformly.  Old instances keep learning
    on their own clock when chosen after their nominal horizon.
    """

    def __init__(self, K, side, A, B, u, n=1):
        _check_side(side)
        self.K, self.side, self.A, self.B, self.n = K, side, A, B, n
        self.u = np.broadcast_to(np.asarray(u, dtype=float), (n,)).copy()
        if np.any((self.u < 0) | (self.u >= 1)):
            raise ValueError("shared seed must lie in [0, 1)")
        self.loop = 1
        self.j = 0
        self.loop_cum_prob = 0.0
        self.total_rounds = 0
        self.old = StaticLearner(np.full(K, 1.0 / K), n)
        self.new = self._instance(1)
        self._choose_new = None
        self.choices = None

    def _instance(self, i):
        T_i, _ = doubling_schedule(i)
        tau, _ = regexp3_params(self.A, self.B, T_i)
        return RegularizedExp3(self.K, self.side, tau, self.n)

    def act(self):
        p = doubling_prob(self.loop, self.j + 1)
        s_new = self.loop_cum_prob + p
        self._pending = s_new
        prev = np.floor(self.loop_cum_prob + self.u)
        self._choose_new = np.floor(s_new + self.u) > prev
        self.choices = self._choose_new
        new_pol = self.new.act()
        old_pol = self.old.act()
        return np.where(self._choose_new[:, None], new_pol, old_pol)

    def observe(self, actions, losses):
        if self._choose_new is None:
            raise RuntimeError("observe() called before act()")
        if self._choose_new.any():
            self.new.observe(actions, losses, where=self._choose_new)
        if not self._choose_new.all():
            self.old.observe(actions, losses, where=~self._choose_new)
        self.j += 1
        self.total_rounds += 1
        self.loop_cum_prob = self._pending
        self._choose_new = None
        T_i, _ = doubling_schedule(self.loop)
        if self.j == T_i:
            self.loop += 1
            self.j = 0
            self.loop_cum_prob = 0.0
            self.old, self.new = self.new, self._instance(self.loop)

    def output(self):
        p = doubling_prob(self.loop, self.j + 1)
        prev = np.floor(self.loop_cum_prob + self.u)
        choose = np.floor(self.loop_cum_prob + p + self.u) > prev
        return np.where(choose[:, None], self.new.output(), self.old.output())


# ---------------------------------------------------------------------------
# Construction from specification strings
# ---------------------------------------------------------------------------

_SPEC_RE = re.compile(r"^(?P<name>[a-z0-9]+)(?::(?P<args>.*))?$")


def parse_learner_spec(spec):
    """Split ``name:key=value,...`` into the name and a dict of raw arguments."""
    m = _SPEC_RE.match(spec.strip())
    if not m:
        raise ValueError(f"malformed learner spec {spec!r}")
    name, args = m.group("name"), m.group("args")
    if name == "static":
        if not args:
            raise ValueError("static learner needs probabilities, e.g. static:0.5,0.5")
        return name, {"probs": [float(x) for x in args.split(",")]}
    kwargs = {}
    if args:
        for item in args.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"malformed argument {item!r} in {spec!r}")
            kwargs[key.strip()] = value.strip()
    return name, kwargs


def needs_shared_seed(spec):
    return parse_learner_spec(spec)[0] in ("eoe", "doubling")


def make_learner(spec, side, A, B, n=1, u=None):
    """Build a learner for ``side`` of an A x B game from a specification string.

    Recognized specs: ``exp3ix``, ``eoe:p=<real>``, ``regexp3:T=<int>``,
    ``regexp3:tau=<real>``, ``doubling``, ``uniform``, ``static:<p1>,<p2>,...``.
    ``u`` is the shared seed (array of shape (n,)) required by ``eoe`` and
    ``doubling``.
    """
    _check_side(side)
    K = A if side == MIN else B
    name, kw = parse_learner_spec(spec)
    if name in ("eoe", "doubling") and u is None:
        raise ValueError(f"learner {spec!r} needs a shared seed u")
    if name == "exp3ix":
        return Exp3IX(K, side, n)
    if name == "eoe":
        p = float(kw.get("p", 2.0))
        if not 0 < p <= 2:
            raise ValueError("eoe needs p in (0, 2]")
        return ExploreOrExploit(Exp3IX(K, side, n), lambda t: eoe_explore_prob(t, p), u)
    if name == "regexp3":
        if "tau" in kw:
            tau = float(kw["tau"])
        elif "T" in kw:
            tau, _ = regexp3_params(A, B, int(kw["T"]))
        else:
            raise ValueError("regexp3 needs T=<horizon> or tau=<value>")
        return RegularizedExp3(K, side, tau, n)
    if name == "doubling":
        return DoublingTrick(K, side, A, B, u, n)
    if name == "uniform":
        return StaticLearner(np.full(K, 1.0 / K), n)
    if name == "static":
        probs = np.asarray(kw["probs"], dtype=float)
        if probs.size != K or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"static policy {probs} is not a policy over {K} actions")
        return StaticLearner(probs, n)
    raise ValueError(f"unknown learner {name!r}")
