"""Quasi-stationary distributions of the chain killed on the coordinate axes.

The chain restricted to {1..cap}^2 has sub-stochastic transition matrix

    Q[(m, n), (m', n')] = P(U_1 = m' | m, n) P(V_1 = n' | m, n),

so Q is stored in factor form: two dense (S, cap) arrays holding the U and V
destination probabilities of every row. Left products pi Q then cost two
small matrix multiplications and Q itself never has to be materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .branching import one_step_origin_bound, step_many
from .deterministic import fixed_points
from .errors import CapTooSmallError, DomainError, InfeasibleError, NonConvergenceError
from .params import ModelParams

OVERFLOW_BUDGET = 1e-8
MAX_STATES = 400_000
MAX_FACTOR_ENTRIES = 100_000_000  # cap^3 per factor array, ~800 MB
SPARSE_CUTOFF = 1e-14
MAX_GRID_CELLS = 25_000_000  # dense occupation grid of the particle estimator


@dataclass
class TruncatedChain:
    params: ModelParams
    cap: int
    u_dest: np.ndarray  # (S, cap): P(U_1 = m'), m' = 1..cap
    v_dest: np.ndarray  # (S, cap): P(V_1 = n'), n' = 1..cap
    absorption: np.ndarray  # (S,): P(U_1 = 0 or V_1 = 0)
    overflow: np.ndarray  # (S,): P(both positive, some count > cap)

    @property
    def n_states(self):
        return self.cap * self.cap

    @property
    def states(self):
        m, n = np.meshgrid(np.arange(1, self.cap + 1), np.arange(1, self.cap + 1), indexing="ij")
        return np.column_stack([m.ravel(), n.ravel()])

    def index(self, m, n):
        if not (1 <= m <= self.cap and 1 <= n <= self.cap):
            raise DomainError(f"state ({m}, {n}) outside the truncated state space")
        return (m - 1) * self.cap + (n - 1)

    def row_sums(self):
        return self.u_dest.sum(axis=1) * self.v_dest.sum(axis=1)

    def apply_left(self, nu):
        """nu Q for a (S,) row vector."""
        return (self.u_dest.T @ (nu[:, None] * self.v_dest)).ravel()

    def to_sparse(self, cutoff=SPARSE_CUTOFF):
        """Q as CSR, dropping entries below ``cutoff``."""
        rows, cols, vals = [], [], []
        for s in range(self.n_states):
            block = np.outer(self.u_dest[s], self.v_dest[s]).ravel()
            nz = np.flatnonzero(block >= cutoff) if cutoff > 0 else np.flatnonzero(block)
            rows.append(np.full(nz.size, s))
            cols.append(nz)
            vals.append(block[nz])
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_states, self.n_states),
        )

    def positive_pattern(self):
        return bool(np.all(self.u_dest > 0) and np.all(self.v_dest > 0))


def _species_tables(q, jmax, kmax):
    table = q.sum_pmf(np.arange(jmax + 1), kmax)
    sf = q.sum_sf(np.arange(jmax + 1), kmax)
    return table, sf


def build_truncated_chain(params: ModelParams, cap: int, budget=OVERFLOW_BUDGET) -> TruncatedChain:
    """Sub-stochastic chain on {1..cap}^2 with absorption and overflow leaks per row."""
    if cap < 1:
        raise DomainError("cap must be >= 1")
    if cap * cap > MAX_STATES:
        raise InfeasibleError(f"cap {cap} gives {cap * cap} states (> {MAX_STATES})")
    if cap**3 > MAX_FACTOR_ENTRIES:
        raise InfeasibleError(f"cap {cap} needs {cap**3} transition factors (> {MAX_FACTOR_ENTRIES})")
    S = cap * cap
    ks = np.arange(1, cap + 1)
    tu, su = _species_tables(params.offspring("U"), cap, cap)
    tv, sv = _species_tables(params.offspring("V"), cap, cap)

    u_full = np.empty((cap, cap, cap + 1))  # [m-1, n-1, k]
    u_over = np.empty((cap, cap))
    for m in ks:
        surv = np.exp(-params.K * (m + params.b * ks))  # over n
        w = stats.binom.pmf(np.arange(m + 1)[None, :], m, surv[:, None])
        u_full[m - 1] = w @ tu[: m + 1]
        u_over[m - 1] = w @ su[: m + 1]
    v_full = np.empty((cap, cap, cap + 1))
    v_over = np.empty((cap, cap))
    for n in ks:
        surv = np.exp(-params.K_tilde * (params.a * ks + n))  # over m
        w = stats.binom.pmf(np.arange(n + 1)[None, :], n, surv[:, None])
        v_full[:, n - 1] = w @ tv[: n + 1]
        v_over[:, n - 1] = w @ sv[: n + 1]

    u_full = u_full.reshape(S, cap + 1)
    v_full = v_full.reshape(S, cap + 1)
    u_over = u_over.ravel()
    v_over = v_over.ravel()
    u0, v0 = u_full[:, 0], v_full[:, 0]
    u_dest, v_dest = u_full[:, 1:], v_full[:, 1:]
    u_in, v_in = u_dest.sum(axis=1), v_dest.sum(axis=1)
    absorption = u0 + v0 - u0 * v0
    overflow = u_over * (v_in + v_over) + u_in * v_over

    chain = TruncatedChain(params, cap, u_dest, v_dest, absorption, overflow)
    worst = int(np.argmax(overflow))
    if overflow[worst] > budget:
        m, n = chain.states[worst]
        raise CapTooSmallError((int(m), int(n)), float(overflow[worst]), budget)
    return chain


def default_cap(params: ModelParams):
    return max(2, math.ceil(3 * max(params.r / params.K, params.r_tilde / params.K_tilde)))


def build_adaptive_chain(params: ModelParams, budget=OVERFLOW_BUDGET, cap=None, growth=1.5):
    """Start from the 3 x equilibrium heuristic and grow the cap until the budget holds."""
    cap = cap or default_cap(params)
    while True:
        try:
            return build_truncated_chain(params, cap, budget)
        except CapTooSmallError:
            cap = math.ceil(cap * growth)
            if cap * cap > MAX_STATES or cap**3 > MAX_FACTOR_ENTRIES:
                raise InfeasibleError("no feasible cap within the state budget") from None


# dominant eigenpair -----------------------------------------------------------


@dataclass
class QsdEstimate:
    pi: np.ndarray
    lam: float
    residual: float
    iterations: int
    irreducible: bool = True
    cap: int | None = None

    def grid(self):
        """pi as a (cap+1, cap+1) array indexed by (m, n), zero on the axes."""
        if self.cap is None:
            raise DomainError("estimate does not come from a truncated chain")
        g = np.zeros((self.cap + 1, self.cap + 1))
        g[1:, 1:] = self.pi.reshape(self.cap, self.cap)
        return g


def _left_operator(chain):
    if isinstance(chain, TruncatedChain):
        return chain.apply_left, chain.n_states
    Q = sp.csr_matrix(chain) if sp.issparse(chain) else np.asarray(chain, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DomainError("transition matrix must be square")
    if sp.issparse(Q):
        QT = Q.T.tocsr()
        return (lambda v: QT @ v), Q.shape[0]
    return (lambda v: v @ Q), Q.shape[0]


def _factor_irreducible(chain: TruncatedChain):
    # successors of row s form the product set supp(u_s) x supp(v_s), so
    # forward and backward reachability from state 0 never expand Q.
    Bu = (chain.u_dest > 0).astype(np.float64)
    Bv = (chain.v_dest > 0).astype(np.float64)
    S, cap = chain.n_states, chain.cap
    fwd = np.zeros(S, dtype=bool)
    fwd[0] = True
    frontier = fwd.copy()
    while frontier.any():
        hit = (Bu[frontier].T @ Bv[frontier]).ravel() > 0
        frontier = hit & ~fwd
        fwd |= hit
    if not fwd.all():
        return False
    bwd = np.zeros(S, dtype=bool)
    bwd[0] = True
    while True:
        target = bwd.reshape(cap, cap).astype(np.float64)
        hit = ((Bu @ target) * Bv).sum(axis=1) > 0
        if not (hit & ~bwd).any():
            break
        bwd |= hit
    return bool(bwd.all())


def is_irreducible(chain):
    if isinstance(chain, TruncatedChain):
        return chain.positive_pattern() or _factor_irreducible(chain)
    pattern = sp.csr_matrix(chain) if sp.issparse(chain) else sp.csr_matrix(np.asarray(chain) > 0)
    ncomp, _ = connected_components(pattern, directed=True, connection="strong")
    return ncomp == 1


def power_iterate_qsd(chain, tol=1e-10, max_iter=100_000, init=None) -> QsdEstimate:
    """Left power iteration with L1 normalisation.

    Converged when the change in lambda, the L1 change in pi and the eigen
    residual ||pi Q - lambda pi||_1 are all below ``tol``.
    """
    apply, S = _left_operator(chain)
    pi = np.full(S, 1.0 / S) if init is None else np.asarray(init, dtype=float).copy()
    if np.any(pi < 0) or pi.sum() <= 0:
        raise DomainError("initial vector must be nonnegative and nonzero")
    pi /= pi.sum()
    lam = math.nan
    crit = math.inf
    for it in range(1, max_iter + 1):
        v = apply(pi)
        lam_new = float(v.sum())
        if lam_new <= 0:
            raise NonConvergenceError("iterate vanished: no mass survives one step", iterations=it)
        new = v / lam_new
        residual = float(np.abs(apply(new) - lam_new * new).sum())
        crit = max(abs(lam_new - lam) if it > 1 else math.inf, float(np.abs(new - pi).sum()), residual)
        pi, lam = new, lam_new
        if crit < tol:
            break
    else:
        raise NonConvergenceError(
            f"power iteration did not converge in {max_iter} iterations (criterion {crit:.3e})",
            residual=crit,
            iterations=max_iter,
        )
    residual = float(np.abs(apply(pi) - float(apply(pi).sum()) * pi).sum())
    return QsdEstimate(
        pi=pi,
        lam=float(apply(pi).sum()),
        residual=residual,
        iterations=it,
        irreducible=is_irreducible(chain),
        cap=chain.cap if isinstance(chain, TruncatedChain) else None,
    )


def conditioned_step(chain, nu):
    """nu -> nu Q / ||nu Q||_1: one step of the chain conditioned on survival."""
    apply, _ = _left_operator(chain)
    v = apply(np.asarray(nu, dtype=float))
    return v / v.sum()


def lambda_upper_bound(params: ModelParams):
    return 1.0 - one_step_origin_bound(params)


def expected_lifetime(lam):
    """Mean exit time 1/(1 - lambda) from the quasi-stationary start."""
    if not (lam < 1):
        raise DomainError("lambda must be < 1")
    return 1.0 / (1.0 - lam)


# particle estimator -----------------------------------------------------------


@dataclass
class McQsd:
    """Occupation measure of a resampled particle ensemble after burn-in."""

    counts: np.ndarray  # (M, N) visit counts indexed by (m, n)
    lam: float
    lam_se: float
    n_particles: int
    restarts: int = 0
    survival: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def distribution(self):
        return self.counts / self.counts.sum()


def _start_state(params):
    fp = fixed_points(params).coexistence
    if fp is None:
        x, y = max(params.r, params.K), max(params.r_tilde, params.K_tilde)
    else:
        x, y = fp
    return max(1, round(x / params.K)), max(1, round(y / params.K_tilde))


def monte_carlo_qsd(params: ModelParams, n_particles, t_max, rng, burn_in=None, n_batches=20):
    """Resampling particle estimate of the QSD and of lambda.

    Particles that leave the open quadrant are moved onto the state of a
    uniformly chosen survivor. lambda is the mean per-step survival fraction
    after burn-in; its standard error comes from batch means. If every
    particle dies in one step the run restarts with twice as many particles.
    """
    if n_particles < 100:
        raise DomainError("n_particles must be >= 100")
    if burn_in is None:
        burn_in = t_max // 5
    if not 0 <= burn_in < t_max:
        raise DomainError("need 0 <= burn_in < t_max")
    restarts = 0
    while True:
        out = _run_particles(params, n_particles, t_max, rng, burn_in)
        if out is not None:
            break
        restarts += 1
        n_particles *= 2
    counts, surv = out
    kept = surv[burn_in:]
    nb = min(n_batches, kept.size)
    batches = np.array([b.mean() for b in np.array_split(kept, nb)])
    se = float(batches.std(ddof=1) / math.sqrt(nb)) if nb > 1 else math.nan
    return McQsd(counts, float(kept.mean()), se, n_particles, restarts, surv)


def _grid_size(size):
    if size * size > MAX_GRID_CELLS:
        raise InfeasibleError(f"occupation grid {size}x{size} exceeds {MAX_GRID_CELLS} cells")
    return size


def _run_particles(params, N, t_max, rng, burn_in):
    m0, n0 = _start_state(params)
    m = np.full(N, m0, dtype=np.int64)
    n = np.full(N, n0, dtype=np.int64)
    size = _grid_size(max(m0, n0) * 2 + 8)
    counts = np.zeros((size, size))
    surv = np.empty(t_max)
    for t in range(t_max):
        m, n = step_many(m, n, params, rng)
        dead = (m == 0) | (n == 0)
        nd = int(dead.sum())
        if nd == N:
            return None
        surv[t] = 1.0 - nd / N
        if nd:
            alive = np.flatnonzero(~dead)
            src = alive[rng.integers(0, alive.size, size=nd)]
            m[dead] = m[src]
            n[dead] = n[src]
        if t >= burn_in:
            top = int(max(m.max(), n.max()))
            if top >= size:
                new = _grid_size(max(top + 1, min(2 * size, math.isqrt(MAX_GRID_CELLS))))
                grown = np.zeros((new, new))
                grown[:size, :size] = counts
                counts, size = grown, new
            counts += np.bincount(m * size + n, minlength=size * size).reshape(size, size)
    return counts, surv


def total_variation(p, q):
    """Total variation distance between two (m, n)-indexed arrays of probabilities."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    M = max(p.shape[0], q.shape[0])
    N = max(p.shape[1], q.shape[1])
    pp = np.zeros((M, N))
    qq = np.zeros((M, N))
    pp[: p.shape[0], : p.shape[1]] = p
    qq[: q.shape[0], : q.shape[1]] = q
    return 0.5 * float(np.abs(pp / pp.sum() - qq / qq.sum()).sum())
