"""Zero-sum matrix games: policies, exploitability, divergences and equilibrium oracles.

Conventions: the min-player picks rows (``A`` actions), the max-player picks
columns (``B`` actions), and ``mean_loss[a, b]`` is the expected loss of the
min-player.  Policies are plain 1-D float arrays; most helpers also accept a
leading batch axis so that many replications can be evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import NamedTuple

import numpy as np

POLICY_ATOL = 1e-12
HARD_EPS_MAX = 1.0 / 12.0

BERNOULLI = "bernoulli"
DETERMINISTIC = "deterministic"
LOSS_MODES = (BERNOULLI, DETERMINISTIC)


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching ``tol``."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# Policies and profiles
# ---------------------------------------------------------------------------


def as_policy(probs, atol=POLICY_ATOL):
    """Validate ``probs`` as a point of the simplex and return it as a float array."""
    p = np.array(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("a policy must be a non-empty 1-D vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"policy has negative or non-finite entries: {p}")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"policy sums to {p.sum()!r}, not 1")
    return p


def uniform(k):
    return np.full(k, 1.0 / k)


class Profile(NamedTuple):
    """A pair (min-player policy, max-player policy)."""

    mu: np.ndarray
    nu: np.ndarray

    @classmethod
    def of(cls, mu, nu):
        return cls(as_policy(mu), as_policy(nu))

    @classmethod
    def uniform(cls, A, B):
        return cls(uniform(A), uniform(B))

    def l1_distance(self, other):
        return float(np.abs(self.mu - other.mu).sum() + np.abs(self.nu - other.nu).sum())


# ---------------------------------------------------------------------------
# Games
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixGame:
    mean_loss: np.ndarray
    loss_mode: str = BERNOULLI

    def __post_init__(self):
        L = np.array(self.mean_loss, dtype=float)
        if L.ndim != 2 or L.shape[0] < 1 or L.shape[1] < 1:
            raise ValueError(f"mean_loss must be a non-empty matrix, got shape {L.shape}")
        if not np.all((L >= 0.0) & (L <= 1.0)):
            raise ValueError("mean_loss entries must lie in [0, 1]")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        L.setflags(write=False)
        object.__setattr__(self, "mean_loss", L)

    @property
    def A(self):
        return self.mean_loss.shape[0]

    @property
    def B(self):
        return self.mean_loss.shape[1]

    def with_mode(self, loss_mode):
        return MatrixGame(self.mean_loss, loss_mode)

    def sample_loss(self, a, b, v):
        """Realized loss for action indices ``a``, ``b`` given uniforms ``v`` in [0, 1)."""
        mean = self.mean_loss[a, b]
        if self.loss_mode == DETERMINISTIC:
            return np.array(mean, dtype=float)
        return (np.asarray(v) < mean).astype(float)

    def __eq__(self, other):
        return (
            isinstance(other, MatrixGame)
            and self.loss_mode == other.loss_mode
            and np.array_equal(self.mean_loss, other.mean_loss)
        )

    def __hash__(self):
        return hash((self.loss_mode, self.mean_loss.tobytes(), self.mean_loss.shape))


def _check_dims(game, mu, nu):
    if np.shape(mu)[-1] != game.A or np.shape(nu)[-1] != game.B:
        raise ValueError(
            f"profile dimensions ({np.shape(mu)[-1]}, {np.shape(nu)[-1]}) "
            f"do not match game ({game.A}, {game.B})"
        )


def expected_loss(game, profile):
    mu, nu = profile
    _check_dims(game, mu, nu)
    return float(mu @ game.mean_loss @ nu)


def exploitability_gaps(game, mu, nu):
    """Exploitability gap of a batch of profiles, ``mu`` of shape (..., A), ``nu`` (..., B).

    Best responses over a simplex are attained at vertices, so enumerating
    pure actions is exact.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    _check_dims(game, mu, nu)
    L = game.mean_loss
    # broadcast-and-sum rather than matmul: BLAS kernels vary with batch size,
    # which would break bit-identical results across batch layouts
    row_losses = (nu[..., None, :] * L).sum(axis=-1)  # (..., A): L(a, nu)
    col_losses = (mu[..., :, None] * L).sum(axis=-2)  # (..., B): L(mu, b)
    eg = col_losses.max(axis=-1) - row_losses.min(axis=-1)
    # exact ties can come out as -1e-17
    return np.maximum(eg, 0.0)


def exploitability_gap(game, profile):
    return float(exploitability_gaps(game, profile[0], profile[1]))


# ---------------------------------------------------------------------------
# Hard instances used by the lower bound
# ---------------------------------------------------------------------------


def _check_epsilon(epsilon):
    if not -HARD_EPS_MAX <= epsilon <= HARD_EPS_MAX:
        raise ValueError(f"epsilon={epsilon!r} outside [-1/12, 1/12]")


def hard_instance(epsilon):
    """2x2 Bernoulli game [[2/3 - eps, 1/3 + eps], [1/3, 2/3]]."""
    _check_epsilon(epsilon)
    L = np.array([[2.0 / 3.0 - epsilon, 1.0 / 3.0 + epsilon], [1.0 / 3.0, 2.0 / 3.0]])
    return MatrixGame(L, BERNOULLI)


def reward_vector_law(epsilon, delta):
    """Bernoulli means of the two min-player actions when nu = (1/2 + delta, 1/2 - delta)."""
    _check_epsilon(epsilon)
    if not -0.5 <= delta <= 0.5:
        raise ValueError(f"delta={delta!r} outside [-1/2, 1/2]")
    first = 0.5 + delta / 3.0 - 2.0 * delta * epsilon
    second = 0.5 - delta / 3.0
    assert 1.0 / 6.0 <= first <= 5.0 / 6.0 and 1.0 / 6.0 <= second <= 5.0 / 6.0
    return first, second


def matching_pennies():
    return MatrixGame(np.array([[1.0, 0.0], [0.0, 1.0]]), BERNOULLI)


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def kl_divergence(p, q):
    """KL(p, q) along the last axis, with 0 log 0 = 0.

    Returns ``inf`` where ``p`` puts mass on an action that ``q`` excludes.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    violated = np.any((p > 0) & (q <= 0), axis=-1)
    out = np.where(violated, np.inf, np.maximum(out, 0.0))
    return float(out) if out.ndim == 0 else out


def bernoulli_kl(p, q):
    """KL between Bernoulli(p) and Bernoulli(q), elementwise."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return kl_divergence(np.stack([p, 1.0 - p], axis=-1), np.stack([q, 1.0 - q], axis=-1))


def bregman_distance(w, w_prime):
    """Sum of the per-player KL divergences, the Bregman divergence of the joint entropy."""
    return kl_divergence(w[0], w_prime[0]) + kl_divergence(w[1], w_prime[1])


# ---------------------------------------------------------------------------
# Regularized game
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularizedGame:
    base: MatrixGame
    tau: float
    anchor: Profile = field(default=None)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        anchor = self.anchor
        if anchor is None:
            anchor = Profile.uniform(self.base.A, self.base.B)
        anchor = Profile.of(*anchor)
        _check_dims(self.base, anchor.mu, anchor.nu)
        if np.any(anchor.mu <= 0) or np.any(anchor.nu <= 0):
            raise ValueError("anchor must have strictly positive entries")
        object.__setattr__(self, "anchor", anchor)


def regularized_operator(reg, w):
    """Gradient field of the regularized game, concatenated as (min part, max part)."""
    mu, nu = (np.asarray(x, dtype=float) for x in w)
    _check_dims(reg.base, mu, nu)
    if np.any(mu <= 0) or np.any(nu <= 0):
        raise ValueError("regularized operator needs strictly positive policies")
    L = reg.base.mean_loss
    g_mu = L @ nu + reg.tau * (np.log(mu) - np.log(reg.anchor.mu))
    g_nu = (1.0 - mu @ L) + reg.tau * (np.log(nu) - np.log(reg.anchor.nu))
    return np.concatenate([g_mu, g_nu])


_UNROLL_MAX_K = 16


def row_max(x):
    """Max over the last axis; unrolled over columns when there are few of them."""
    if x.ndim == 2 and x.shape[1] <= _UNROLL_MAX_K:
        return reduce(np.maximum, [x[:, k] for k in range(x.shape[1])])
    return x.max(axis=-1)


def row_sum(x):
    """Left-to-right sum over the last axis; unrolled over columns when there are few of them."""
    if x.ndim == 2 and x.shape[1] <= _UNROLL_MAX_K:
        return reduce(np.add, [x[:, k] for k in range(x.shape[1])])
    return x.sum(axis=-1)


def log_normalize(x):
    """Shift log-weights along the last axis so that they exponentiate to a distribution."""
    z = x - row_max(x)[..., None]
    return z - np.log(row_sum(np.exp(z)))[..., None]


def smoothed_best_response(reg, w):
    """Logit responses mu ~ mu0 exp(-L nu / tau), nu ~ nu0 exp(mu^T L / tau)."""
    mu, nu = w
    L = reg.base.mean_loss
    mu_br = np.exp(log_normalize(np.log(reg.anchor.mu) - (L @ nu) / reg.tau))
    nu_br = np.exp(log_normalize(np.log(reg.anchor.nu) + (mu @ L) / reg.tau))
    return Profile(mu_br, nu_br)


def fixed_point_residual(reg, w):
    br = smoothed_best_response(reg, w)
    return float(max(np.abs(br.mu - w[0]).max(), np.abs(br.nu - w[1]).max()))


def _mirror_prox(L, log_mu, log_nu, eta, tau, log_mu0, log_nu0):
    """One entropic extragradient step; the KL-to-anchor term is handled as an exact prox."""
    c = eta * tau

    def prox(g_mu, g_nu):
        lm = log_normalize((log_mu + c * log_mu0 - eta * g_mu) / (1.0 + c))
        ln = log_normalize((log_nu + c * log_nu0 - eta * g_nu) / (1.0 + c))
        return lm, ln

    mu, nu = np.exp(log_mu), np.exp(log_nu)
    h_mu, h_nu = prox(L @ nu, -(mu @ L))
    half_mu, half_nu = np.exp(h_mu), np.exp(h_nu)
    n_mu, n_nu = prox(L @ half_nu, -(half_mu @ L))
    return n_mu, n_nu, half_mu, half_nu


def regularized_equilibrium(reg, tol=1e-10, max_iter=10**6, step=0.25):
    """Unique equilibrium of the regularized game, by deterministic mirror-prox.

    Stops once the smoothed-best-response residual is below ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    L = reg.base.mean_loss
    log_mu0, log_nu0 = np.log(reg.anchor.mu), np.log(reg.anchor.nu)
    log_mu, log_nu = log_mu0.copy(), log_nu0.copy()
    residual = fixed_point_residual(reg, reg.anchor)
    for _ in range(max_iter):
        if residual < tol:
            return Profile(np.exp(log_mu), np.exp(log_nu))
        log_mu, log_nu, _, _ = _mirror_prox(L, log_mu, log_nu, step, reg.tau, log_mu0, log_nu0)
        residual = fixed_point_residual(reg, (np.exp(log_mu), np.exp(log_nu)))
    if residual < tol:
        return Profile(np.exp(log_mu), np.exp(log_nu))
    raise ConvergenceError("regularized equilibrium did not converge", residual)


# ---------------------------------------------------------------------------
# Nash equilibria of the base game
# ---------------------------------------------------------------------------


def solve_2x2(game):
    """Closed-form equilibrium of a 2x2 game: pure saddle point if any, else the interior solution."""
    if game.mean_loss.shape != (2, 2):
        raise ValueError("solve_2x2 needs a 2x2 game")
    L = game.mean_loss
    for a in range(2):
        for b in range(2):
            if L[a, b] <= L[:, b].min() and L[a, b] >= L[a, :].max():
                mu, nu = np.zeros(2), np.zeros(2)
                mu[a], nu[b] = 1.0, 1.0
                return float(L[a, b]), Profile(mu, nu)
    den = L[0, 0] - L[0, 1] - L[1, 0] + L[1, 1]
    p = (L[1, 1] - L[1, 0]) / den
    q = (L[1, 1] - L[0, 1]) / den
    value = (L[0, 0] * L[1, 1] - L[0, 1] * L[1, 0]) / den
    return float(value), Profile(np.array([p, 1.0 - p]), np.array([q, 1.0 - q]))


def nash_value(game, tol=1e-6, max_iter=10**6, step=0.5, check_every=10):
    """Value and an equilibrium profile with exploitability gap at most ``tol``.

    Runs entropic mirror-prox self-play on the exact loss vectors and returns
    whichever of the last iterate and the running average first certifies
    ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    A, B = game.A, game.B
    L = game.mean_loss
    log_mu, log_nu = np.log(uniform(A)), np.log(uniform(B))
    zero_mu, zero_nu = np.zeros(A), np.zeros(B)
    sum_mu, sum_nu = np.zeros(A), np.zeros(B)
    best = np.inf
    for k in range(1, max_iter + 1):
        log_mu, log_nu, half_mu, half_nu = _mirror_prox(L, log_mu, log_nu, step, 0.0, zero_mu, zero_nu)
        sum_mu += half_mu
        sum_nu += half_nu
        if k % check_every and k != 1:
            continue
        candidates = (
            Profile(np.exp(log_mu), np.exp(log_nu)),
            Profile(sum_mu / sum_mu.sum(), sum_nu / sum_nu.sum()),
        )
        for w in candidates:
            eg = exploitability_gap(game, w)
            best = min(best, eg)
            if eg <= tol:
                return expected_loss(game, w), w
    raise ConvergenceError("nash_value did not reach tol", best)


# ---------------------------------------------------------------------------
# Game definition files
# ---------------------------------------------------------------------------


def parse_game(text):
    """Parse ``A B loss_mode`` followed by A rows of B whitespace-separated entries."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty game definition")
    header = lines[0].split()
    if len(header) != 3:
        raise ValueError("header must be 'A B loss_mode'")
    A, B, mode = int(header[0]), int(header[1]), header[2]
    rows = [[float(x) for x in ln.split()] for ln in lines[1:]]
    if len(rows) != A or any(len(r) != B for r in rows):
        raise ValueError(f"expected {A} rows of {B} entries")
    return MatrixGame(np.array(rows), mode)


def format_game(game):
    rows = "\n".join(" ".join(repr(float(x)) for x in row) for row in game.mean_loss)
    return f"{game.A} {game.B} {game.loss_mode}\n{rows}\n"


def load_game(source):
    """Load a game from a file path or a ``hard:<epsilon>`` token."""
    source = str(source)
    if source.startswith("hard:"):
        return hard_instance(float(source[len("hard:"):]))
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"game file not found: {source}")
    return parse_game(path.read_text())
