"""Size-dependent branching dynamics of the two competing populations.

Given U_t = m and V_t = n, each of the m parents of species U produces a full
litter drawn from q with probability p = exp(-K(m + b n)) and nothing
otherwise (similarly for V with exp(-K_tilde(a m + n))). This whole-litter
thinning reproduces the conditional litter law p q_k (k >= 1) and
1 - p (1 - q_0) at k = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from .deterministic import NormedState, map_F
from .errors import DomainError, NonConvergenceError, ResolutionError
from .offspring import TAIL_MASS
from .params import ModelParams
from .rng import as_rng

NEWTON_TOL = 1e-12


class PopulationState(NamedTuple):
    m: int
    n: int


@dataclass
class Trajectory:
    states: np.ndarray  # shape (T + 1, 2), integer counts
    lifetime: int | None  # None when max_steps was reached first
    seed: object = None


def _check_species(species):
    if species not in ("U", "V"):
        raise DomainError(f"species must be 'U' or 'V', got {species!r}")


def litter_survival_prob(state, params: ModelParams, species="U"):
    """Thinning factor exp(-K(m + b n)) for U, exp(-K_tilde(a m + n)) for V."""
    _check_species(species)
    m, n = state
    if species == "U":
        return math.exp(-params.K * (m + params.b * n))
    return math.exp(-params.K_tilde * (params.a * m + n))


def _survival_normed(p, params, species):
    x, y = p
    if species == "U":
        return math.exp(-(x + params.b_eff * y))
    return math.exp(-(params.a_eff * x + y))


def offspring_pmf_conditional(k, state, params: ModelParams, species="U"):
    """P(one litter = k | state)."""
    p = litter_survival_prob(state, params, species)
    q = params.offspring(species)
    if k == 0:
        return 1.0 - p * (1.0 - q.q0)
    return p * q.pmf(k)


def thinned_litter_pmf(state, params: ModelParams, species="U", kmax=None):
    """Single-parent litter pmf on 0..kmax (kmax defaults to the tail cutoff)."""
    p = litter_survival_prob(state, params, species)
    q = params.offspring(species)
    if kmax is None:
        kmax = int(min(q.max_support, _tail_cutoff(q)))
    g = p * q.pmf(np.arange(kmax + 1))
    g[0] = 1.0 - p * (1.0 - q.q0)
    return g


def _tail_cutoff(q, tail=TAIL_MASS):
    k = int(q.mean + 10 * math.sqrt(q.variance) + 10)
    while q.sum_sf([1], k)[0] > tail:
        k *= 2
    return k


# sampling -----------------------------------------------------------------------


def step_many(m, n, params: ModelParams, rng):
    """One generation for arrays of states; zero components stay zero."""
    m = np.asarray(m, dtype=np.int64)
    n = np.asarray(n, dtype=np.int64)
    pu = np.exp(-params.K * (m + params.b * n))
    pv = np.exp(-params.K_tilde * (params.a * m + n))
    ju = rng.binomial(m, pu)
    jv = rng.binomial(n, pv)
    return (
        params.offspring("U").sample_sum(ju, rng),
        params.offspring("V").sample_sum(jv, rng),
    )


def step(state, params: ModelParams, rng) -> PopulationState:
    rng = as_rng(rng)
    u, v = step_many(np.array([state[0]]), np.array([state[1]]), params, rng)
    return PopulationState(int(u[0]), int(v[0]))


def simulate(initial, params: ModelParams, rng, max_steps, stop_on="axes") -> Trajectory:
    """Run the chain until it leaves the open quadrant (``stop_on="axes"``) or
    reaches the origin (``stop_on="origin"``), or until max_steps."""
    if max_steps < 1:
        raise DomainError("max_steps must be >= 1")
    if stop_on not in ("axes", "origin"):
        raise DomainError("stop_on must be 'axes' or 'origin'")
    seed = None if isinstance(rng, np.random.Generator) else rng
    rng = as_rng(rng)

    def absorbed(s):
        return (s[0] == 0 or s[1] == 0) if stop_on == "axes" else (s[0] == 0 and s[1] == 0)

    s = PopulationState(int(initial[0]), int(initial[1]))
    states = [s]
    lifetime = 0 if absorbed(s) else None
    t = 0
    while lifetime is None and t < max_steps:
        s = step(s, params, rng)
        t += 1
        states.append(s)
        if absorbed(s):
            lifetime = t
    return Trajectory(np.array(states, dtype=np.int64), lifetime, seed)


def simulate_lifetimes(m0, n0, params: ModelParams, rng, max_steps):
    """Exit times from the open quadrant for an ensemble, advanced in lockstep.

    Returns an integer array; -1 marks trajectories still alive at max_steps.
    """
    m = np.array(m0, dtype=np.int64)
    n = np.array(n0, dtype=np.int64)
    life = np.full(m.shape, -1, dtype=np.int64)
    alive = (m > 0) & (n > 0)
    life[~alive] = 0
    idx = np.flatnonzero(alive)
    for t in range(1, max_steps + 1):
        if idx.size == 0:
            break
        mu, nv = step_many(m[idx], n[idx], params, rng)
        m[idx], n[idx] = mu, nv
        dead = (mu == 0) | (nv == 0)
        life[idx[dead]] = t
        idx = idx[~dead]
    return life


# moments ------------------------------------------------------------------------


def conditional_mean(p, params: ModelParams) -> NormedState:
    """E[(X_{t+1}, Y_{t+1}) | (X_t, Y_t) = p]; identical to F(p)."""
    return map_F(p, params)


def conditional_variance(p, params: ModelParams):
    """One-step variances (v_x, v_y) of the normed components."""
    x, y = p
    if x < 0 or y < 0:
        raise DomainError("state must lie in the closed first quadrant")
    su = _survival_normed(p, params, "U")
    sv = _survival_normed(p, params, "V")
    qu, qv = params.offspring("U"), params.offspring("V")
    vx = params.K * x * su * (qu.variance + math.exp(2 * params.r) * (1.0 - su))
    vy = params.K_tilde * y * sv * (qv.variance + math.exp(2 * params.r_tilde) * (1.0 - sv))
    return vx, vy


# exact one-step law -----------------------------------------------------------


def exact_transition_pmf(state, params: ModelParams, species="U", tail=TAIL_MASS,
                         max_support=1_000_000):
    """pmf over 0..k_max of the next count of one species.

    Poisson and geometric bases use the binomial mixture over the number of
    surviving litters; finite bases use the m-fold convolution of the thinned
    single-parent pmf. Upper tail mass below ``tail`` is dropped.
    """
    _check_species(species)
    count = state[0] if species == "U" else state[1]
    if count < 1:
        raise DomainError(f"species {species} count must be >= 1")
    p = litter_survival_prob(state, params, species)
    q = params.offspring(species)
    if q.kind == "finite":
        return _convolution_pmf(thinned_litter_pmf(state, params, species), count, tail, max_support)

    j = np.arange(count + 1)
    w = stats.binom.pmf(j, count, p)
    mean = count * p * q.mean
    var = count * (p * q.variance + p * (1 - p) * q.mean**2)
    kmax = int(mean + 10 * math.sqrt(var) + 10)
    while float(w @ q.sum_sf(j, kmax)) > tail:
        kmax *= 2
        if kmax > max_support:
            raise ResolutionError(f"transition pmf needs support beyond {max_support}")
    return w @ q.sum_pmf(j, kmax)


def _convolution_pmf(g, count, tail, max_support):
    out = np.array([1.0])
    base = g
    c = count
    while c:
        if c & 1:
            out = np.convolve(out, base)
        c >>= 1
        if c:
            base = np.convolve(base, base)
        if out.size > max_support or base.size > max_support:
            raise ResolutionError(f"transition pmf needs support beyond {max_support}")
    tail_mass = np.cumsum(out[::-1])[::-1]  # tail_mass[k] = P(sum >= k)
    keep = np.flatnonzero(tail_mass > tail)
    return out[: keep[-1] + 1] if keep.size else out


def joint_transition_pmf(state, params: ModelParams):
    """Outer product of the two conditionally independent component pmfs."""
    return np.outer(exact_transition_pmf(state, params, "U"), exact_transition_pmf(state, params, "V"))


# extinction bounds ------------------------------------------------------------


def delta_constant():
    """min_{x>0} (1 - e^{-x})^x = 2^{-ln 2}, attained at x = ln 2."""
    return 2.0 ** (-math.log(2.0))


def one_step_origin_bound(params: ModelParams):
    """Lower bound delta^{1/K + 1/K_tilde} on the one-step jump to the origin."""
    return delta_constant() ** (1.0 / params.K + 1.0 / params.K_tilde)


def minorization_constant(params: ModelParams):
    """L with L(m+n) <= min(K(m+bn), K_tilde(am+n)); diagnostics only."""
    return min(params.K, params.K_tilde) * min(1.0, params.a, params.b)


# large deviations -------------------------------------------------------------


def _litter_cumulant(s, surv, q):
    """log-mgf of one thinned litter and its first two derivatives at s."""
    ls, l1, l2 = q.log_mgf(s)
    if surv >= 1.0:
        return ls, l1, l2
    c = np.logaddexp(math.log1p(-surv), math.log(surv) + ls)
    w = math.exp(math.log(surv) + ls - c)
    return float(c), w * l1, w * l2 + w * (1 - w) * l1 * l1


def mgf_conditional(s, p, params: ModelParams, species="U"):
    """Log-mgf c(s) = log(1 - p + p S(s)) of one litter given normed state p."""
    _check_species(species)
    q = params.offspring(species)
    if s >= q.mgf_abscissa:
        raise DomainError(f"s={s} outside the convergence region of the offspring mgf")
    return _litter_cumulant(s, _survival_normed(p, params, species), q)[0]


def entropy_function(z, p, params: ModelParams, species="U"):
    """Legendre transform sup_s [z s - c(s)] of the litter log-mgf."""
    _check_species(species)
    if z < 0:
        raise DomainError("entropy function is evaluated at z >= 0")
    q = params.offspring(species)
    surv = _survival_normed(p, params, species)
    mean = surv * q.mean
    p0 = 1.0 - surv * (1.0 - q.q0)
    if z == mean:
        return 0.0
    if z == 0:
        return -math.log(p0) if p0 > 0 else math.inf
    top = q.max_support
    if z > top:
        return math.inf
    if z == top:
        return -math.log(surv * float(q.pmf(top)))

    smax = q.mgf_abscissa

    def deriv(s):
        _, d1, d2 = _litter_cumulant(s, surv, q)
        return d1 - z, d2

    # bracket the root of c'(s) = z; c' is increasing
    if z > mean:
        lo, hi = 0.0, 1.0
        if hi >= smax:
            hi = 0.5 * smax
        while deriv(hi)[0] < 0:
            lo = hi
            hi = 2 * hi if 2 * hi < smax else 0.5 * (hi + smax)
            if hi - lo < 1e-15:
                raise NonConvergenceError(f"cannot bracket entropy maximiser for z={z}")
    else:
        lo, hi = -1.0, 0.0
        while deriv(lo)[0] > 0:
            hi = lo
            lo *= 2
            if lo < -1e6:
                raise NonConvergenceError(f"cannot bracket entropy maximiser for z={z}")

    s = 0.5 * (lo + hi)
    g = math.inf
    for _ in range(200):
        g, d2 = deriv(s)
        if abs(g) <= NEWTON_TOL * max(1.0, z):
            break
        if g > 0:
            hi = s
        else:
            lo = s
        s_new = s - g / d2 if d2 > 0 else math.nan
        if not (lo < s_new < hi):
            s_new = 0.5 * (lo + hi)
        s = s_new
        if hi - lo < 1e-15 * max(1.0, abs(s)):
            break
    else:
        raise NonConvergenceError(
            f"entropy maximisation did not converge at z={z}: |c'(s)-z|={abs(g):.3e}, s={s}",
            residual=abs(g),
        )
    c = _litter_cumulant(s, surv, q)[0]
    return max(z * s - c, 0.0)


def deviation_bound(excess, p, params: ModelParams, species="U"):
    """Chernoff bound on P(X_{t+1} > x f_1(x, y) + excess | (X_t, Y_t) = p).

    exp(-(x/K) c*(excess/x + e^{r - x - b_eff y})) for U; the V analogue uses y/K_tilde.
    """
    if excess <= 0:
        raise DomainError("excess must be positive")
    x, y = p
    if species == "U":
        size, scale, mean = x, params.K, math.exp(params.r) * _survival_normed(p, params, "U")
    else:
        _check_species(species)
        size, scale, mean = y, params.K_tilde, math.exp(params.r_tilde) * _survival_normed(p, params, "V")
    if size <= 0:
        raise DomainError("component must be positive")
    return math.exp(-(size / scale) * entropy_function(excess / size + mean, p, params, species))
