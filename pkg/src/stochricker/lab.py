"""Small-K experiments: lambda(K) sweeps, QSD concentration, retention, AR(1) picture.

All experiments take K = K_tilde. Randomised experiments derive one stream
per (experiment, K index) from a master seed, so output depends only on the
inputs and the seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .branching import conditional_variance, step_many
from .deterministic import (
    Box,
    classify_coexistence,
    detect_cycle,
    find_invariant_box,
    fixed_points,
    jacobian,
    mutual_invasibility,
)
from .errors import DomainError, InfeasibleError, NonConvergenceError, NotApplicableError, RickerError
from .params import ModelParams
from .qsd import MAX_STATES, build_adaptive_chain, default_cap, monte_carlo_qsd, power_iterate_qsd
from .rng import make_rng

# stream ids for make_rng(seed, EXPERIMENT, k_index)
SWEEP_STREAM = 1
RETENTION_STREAM = 2
CYCLE_STREAM = 3


@dataclass
class SweepRecord:
    K: float
    method: str
    lam: float = math.nan
    lifetime: float = math.nan
    qsd_mean: tuple[float, float] = (math.nan, math.nan)
    qsd_cov: list[list[float]] = field(default_factory=lambda: [[math.nan] * 2] * 2)
    distance_to_fixed_point: float = math.nan
    strip_mass_x: float = math.nan
    strip_mass_y: float = math.nan
    box_mass: float = math.nan
    cap: int | None = None
    residual: float = math.nan
    error: str | None = None

    @property
    def mass_outside(self):
        return 1.0 - self.box_mass

    def to_dict(self):
        return asdict(self)


# distribution summaries ---------------------------------------------------------


def _normed_axes(grid, params):
    M, N = grid.shape
    return np.arange(M) * params.K, np.arange(N) * params.K_tilde


def qsd_moments(grid, params: ModelParams):
    """Mean and covariance in normed coordinates of an (m, n)-indexed pmf array."""
    P = grid / grid.sum()
    xs, ys = _normed_axes(P, params)
    px, py = P.sum(axis=1), P.sum(axis=0)
    mx, my = float(px @ xs), float(py @ ys)
    dx, dy = xs - mx, ys - my
    cxx = float(px @ dx**2)
    cyy = float(py @ dy**2)
    cxy = float(dx @ P @ dy)
    return (mx, my), np.array([[cxx, cxy], [cxy, cyy]])


def tightness_report(grid, params: ModelParams, box: Box, strip_width=0.05):
    """Split the QSD mass into the box, the two axis strips and the rest.

    Raw masses: ``outside_box``, ``strip_x`` = P(x < w), ``strip_y`` = P(y < w).
    The disjoint parts ``box_core``, ``strip_x``, ``strip_y_only`` and
    ``remainder`` (strip_y_only excludes the corner already in strip_x) sum to 1.
    """
    if not (box.x_lo > 0 and box.y_lo > 0):
        raise DomainError("box must lie strictly inside the open first quadrant")
    P = grid / grid.sum()
    xs, ys = _normed_axes(P, params)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    in_sx = X < strip_width
    in_sy = Y < strip_width
    in_box = box.contains(X, Y)
    strip_x = float(P[in_sx].sum())
    strip_y = float(P[in_sy].sum())
    strip_y_only = float(P[in_sy & ~in_sx].sum())
    box_core = float(P[in_box & ~in_sx & ~in_sy].sum())
    return {
        "box_mass": float(P[in_box].sum()),
        "outside_box": float(P[~in_box].sum()),
        "strip_x": strip_x,
        "strip_y": strip_y,
        "box_core": box_core,
        "strip_y_only": strip_y_only,
        "remainder": 1.0 - box_core - strip_x - strip_y_only,
    }


def _default_box(params):
    if not mutual_invasibility(params):
        return None
    found = find_invariant_box(params)
    return found.box if found else None


def _summarize(rec, grid, params, box, strip_width):
    mean, cov = qsd_moments(grid, params)
    rec.qsd_mean = mean
    rec.qsd_cov = cov.tolist()
    fp = fixed_points(params).coexistence
    if fp is not None:
        rec.distance_to_fixed_point = math.hypot(mean[0] - fp.x, mean[1] - fp.y)
    if box is not None:
        t = tightness_report(grid, params, box, strip_width)
        rec.strip_mass_x, rec.strip_mass_y, rec.box_mass = t["strip_x"], t["strip_y"], t["box_mass"]
    return rec


def qsd_for(params, method="matrix", seed=0, stream=(), tol=1e-10, n_particles=10_000,
            t_max=2_000):
    """QSD of one instance as (method used, grid, lambda, cap, residual).

    The matrix method falls back to the particle estimator when the cap
    heuristic exceeds the state budget.
    """
    if method == "matrix" and default_cap(params) ** 2 <= MAX_STATES:
        try:
            chain = build_adaptive_chain(params)
            est = power_iterate_qsd(chain, tol=tol)
            return "matrix", est.grid(), est.lam, chain.cap, est.residual
        except InfeasibleError:
            pass
    elif method not in ("matrix", "monte_carlo"):
        raise DomainError(f"unknown method {method!r}")
    mc = monte_carlo_qsd(params, n_particles, t_max, make_rng(seed, *stream))
    return "monte_carlo", mc.distribution, mc.lam, None, math.nan


def sweep_K(base: ModelParams, K_values, method="matrix", box=None, strip_width=0.05, seed=0,
            tol=1e-10, n_particles=10_000, t_max=2_000):
    """Per-K QSD summaries with K = K_tilde; failures become error records."""
    K_values = [float(k) for k in K_values]
    if any(k <= 0 for k in K_values):
        raise DomainError("K values must be positive")
    if any(b >= a for a, b in zip(K_values, K_values[1:])):
        raise DomainError("K values must be strictly descending")
    if box is None:
        box = _default_box(base)
    records = []
    for i, K in enumerate(K_values):
        params = base.with_K(K)
        rec = SweepRecord(K=K, method=method)
        try:
            used, grid, lam, cap, res = qsd_for(
                params, method, seed, (SWEEP_STREAM, i), tol, n_particles, t_max
            )
            rec.method, rec.lam, rec.cap, rec.residual = used, lam, cap, res
            rec.lifetime = 1.0 / (1.0 - lam)
            _summarize(rec, grid, params, box, strip_width)
        except (RickerError, ArithmeticError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return records


@dataclass
class ScalingFit:
    u_hat: float
    intercept: float
    r_squared: float
    inv_K: np.ndarray
    target: np.ndarray
    residuals: np.ndarray


def fit_lambda_scaling(records) -> ScalingFit:
    """Least-squares line of -log(1 - lambda) against 1/K; the slope is u_hat.

    ``records`` holds SweepRecords or (K, lambda) pairs.
    """
    pairs = []
    for rec in records:
        K, lam = (rec.K, rec.lam) if isinstance(rec, SweepRecord) else rec
        if math.isfinite(lam) and 0 < lam < 1:
            pairs.append((K, lam))
    if len(pairs) < 3:
        raise DomainError("need at least 3 records with 0 < lambda < 1")
    K = np.array([p[0] for p in pairs])
    lam = np.array([p[1] for p in pairs])
    xs = 1.0 / K
    if np.ptp(xs) == 0:
        raise DomainError("degenerate design: all K equal")
    ys = -np.log1p(-lam)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), r2, xs, ys, resid)


# retention --------------------------------------------------------------------


@dataclass
class RetentionResult:
    K: float
    N: int
    n_samples: int
    starts: np.ndarray  # (P, 2) integer start states
    retention: np.ndarray  # (P,) fraction ending in the neighbourhood
    worst: float
    lower_bound: float  # one-sided 95% Clopper-Pearson bound for the worst start


def start_states(params, box: Box, grid_points=5):
    """Integer states nearest to a grid of normed points over the box, kept inside it."""
    xs = np.linspace(box.x_lo, box.x_hi, grid_points)
    ys = np.linspace(box.y_lo, box.y_hi, grid_points)
    ms = np.unique(np.clip(np.round(xs / params.K), 1, None)).astype(np.int64)
    ns = np.unique(np.clip(np.round(ys / params.K_tilde), 1, None)).astype(np.int64)
    pts = [(m, n) for m in ms for n in ns if box.contains(m * params.K, n * params.K_tilde)]
    if not pts:
        raise DomainError(f"no lattice state inside the box at K={params.K}")
    return np.array(pts, dtype=np.int64)


def clopper_pearson_lower(successes, trials, alpha=0.05):
    if successes == 0:
        return 0.0
    return float(stats.beta.ppf(alpha, successes, trials - successes + 1))


def retention_check(params: ModelParams, box: Box, N, n_samples, rng, grid_points=5, inflate=0.05):
    """P(state after N steps lies in U(box) | start on a grid in box), worst start reported.

    U(box) is the box inflated by ``inflate`` times its diagonal.
    """
    if N < 1 or n_samples < 1:
        raise DomainError("N and n_samples must be positive")
    nbhd = box.inflate(inflate * box.diagonal)
    starts = start_states(params, box, grid_points)
    ret = np.empty(len(starts))
    for i, (m0, n0) in enumerate(starts):
        m = np.full(n_samples, m0, dtype=np.int64)
        n = np.full(n_samples, n0, dtype=np.int64)
        for _ in range(N):
            m, n = step_many(m, n, params, rng)
        ret[i] = nbhd.contains(m * params.K, n * params.K_tilde).mean()
    w = int(np.argmin(ret))
    lower = clopper_pearson_lower(int(round(ret[w] * n_samples)), n_samples)
    return RetentionResult(params.K, N, n_samples, starts, ret, float(ret[w]), lower)


@dataclass
class RetentionScaling:
    results: list
    w_hat: float  # largest w with worst retention >= 1 - exp(-w/K) at every K
    slope: float  # least-squares slope of -log(escape) on 1/K
    intercept: float
    w_hat_lower: float = math.nan  # same as w_hat from the Clopper-Pearson retention bounds


def retention_scaling(base: ModelParams, box: Box, N, K_values, n_samples, seed, grid_points=5):
    results = [
        retention_check(base.with_K(K), box, N, n_samples, make_rng(seed, RETENTION_STREAM, i),
                        grid_points)
        for i, K in enumerate(K_values)
    ]
    K = np.array([r.K for r in results])
    # zero observed escapes: use the Clopper-Pearson upper bound on the escape rate
    escape = np.array([1 - r.worst if r.worst < 1 else 1 - r.lower_bound for r in results])
    escape = np.clip(escape, 1e-300, 1.0)
    exponent = -np.log(escape)
    w_hat = float(np.min(K * exponent))
    cp_escape = np.clip(np.array([1 - r.lower_bound for r in results]), 1e-300, 1.0)
    w_hat_lower = float(np.min(K * -np.log(cp_escape)))
    if len(K) >= 2 and np.ptp(1 / K) > 0:
        slope, intercept = np.polyfit(1 / K, exponent, 1)
    else:
        slope, intercept = math.nan, math.nan
    return RetentionScaling(results, w_hat, float(slope), float(intercept), w_hat_lower)


# linear autoregressive approximation --------------------------------------------


@dataclass
class ArModel:
    A: np.ndarray
    noise_cov: np.ndarray
    stationary_cov: np.ndarray
    residual: float
    iterations: int


def solve_lyapunov_iter(A, W, tol=1e-15, max_iter=1_000_000):
    """Sigma = A Sigma A^T + W by the fixed-point iteration Sigma <- A Sigma A^T + W."""
    S = np.array(W, dtype=float)
    for it in range(1, max_iter + 1):
        new = A @ S @ A.T + W
        if np.max(np.abs(new - S)) <= tol * max(1.0, np.max(np.abs(new))):
            S = new
            break
        S = new
    else:
        raise NonConvergenceError("Lyapunov iteration did not converge", iterations=max_iter)
    S = 0.5 * (S + S.T)
    return S, it


def ar_approximation(params: ModelParams) -> ArModel:
    """X_{t+1} - x* ~ A (X_t - x*) + noise near an attracting coexistence point."""
    fp = fixed_points(params).coexistence
    if fp is None:
        raise NotApplicableError("no coexistence fixed point")
    A = jacobian(fp, params)
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    if rho >= 1:
        raise NotApplicableError(f"Jacobian spectral radius {rho:.6f} >= 1")
    W = np.diag(conditional_variance(fp, params))
    S, it = solve_lyapunov_iter(A, W)
    residual = float(np.max(np.abs(S - A @ S @ A.T - W)))
    return ArModel(A, W, S, residual, it)


# repelling-case cycle support -------------------------------------------------------


@dataclass
class CycleSupportReport:
    stability: str | None
    period: int | None
    cycle_points: list
    K_values: list
    masses: list
    methods: list
    kendall_tau: float = math.nan
    p_value: float = math.nan
    conclusive: bool = True
    note: str = ""

    def to_dict(self):
        return asdict(self)


def mass_near(grid, params, points, radius):
    P = grid / grid.sum()
    xs, ys = _normed_axes(P, params)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    near = np.zeros(X.shape, dtype=bool)
    for px, py in points:
        near |= np.hypot(X - px, Y - py) <= radius
    return float(P[near].sum())


def cycle_support_study(params: ModelParams, K_values, seed=0, radius=0.1, p0=None,
                        method="matrix", burn_in=10_000, max_period=64, tol=1e-8):
    """QSD mass within ``radius`` of the attracting cycle of F, per K.

    The trend is summarised by Kendall's tau between K and the mass; a
    negative tau means mass grows as K shrinks.
    """
    stability = None
    if mutual_invasibility(params):
        stability = classify_coexistence(params).kind
    if p0 is None:
        fp = fixed_points(params).coexistence
        p0 = (fp.x + 0.1, fp.y - 0.05) if fp else (0.5 * params.r, 0.3 * params.r_tilde)
    cyc = detect_cycle(params, p0, burn_in, max_period, tol)
    if cyc is None:
        return CycleSupportReport(stability, None, [], list(K_values), [], [], conclusive=False,
                                  note="no attracting cycle detected")
    points = cyc.points.tolist()
    masses, methods = [], []
    for i, K in enumerate(K_values):
        pk = params.with_K(K)
        used, grid, *_ = qsd_for(pk, method, seed, (CYCLE_STREAM, i))
        masses.append(mass_near(grid, pk, points, radius))
        methods.append(used)
    report = CycleSupportReport(stability, cyc.period, points, list(K_values), masses, methods)
    if len(K_values) >= 2:
        tau, pv = stats.kendalltau(K_values, masses)
        report.kendall_tau, report.p_value = float(tau), float(pv)
    return report
