"""Deterministic Ricker competition map in normed coordinates.

F(x, y) = (x exp(r - x - b_eff y), y exp(r_tilde - a_eff x - y)), with
b_eff = b K / K_tilde and a_eff = a K_tilde / K. For K = K_tilde this is the
classical two-species Ricker competition map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InvasibilityError, OrbitDivergenceError
from .params import ModelParams

FIXED_POINT_TOL = 1e-10
NON_HYPERBOLIC_BAND = 1e-6

# Candidate-box shrink fractions, scanned in this order. Moderate boxes first:
# wide ones hug the axes, tight ones fail around spiralling fixed points.
BOX_FRACTIONS = (0.5, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8, 0.1, 0.9, 0.05)


class NormedState(NamedTuple):
    x: float
    y: float


class Box(NamedTuple):
    """Axis-aligned rectangle [x_lo, x_hi] x [y_lo, y_hi]."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    @property
    def diagonal(self):
        return math.hypot(self.x_hi - self.x_lo, self.y_hi - self.y_lo)

    def inflate(self, delta):
        return Box(self.x_lo - delta, self.x_hi + delta, self.y_lo - delta, self.y_hi + delta)

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x_lo) & (x <= self.x_hi) & (y >= self.y_lo) & (y <= self.y_hi)

    def grid(self, n):
        xs = np.linspace(self.x_lo, self.x_hi, n)
        ys = np.linspace(self.y_lo, self.y_hi, n)
        return np.meshgrid(xs, ys, indexing="ij")

    def spacing(self, n):
        return max(self.x_hi - self.x_lo, self.y_hi - self.y_lo) / (n - 1)

    def depth(self, x, y):
        """Distance from each point to the complement (negative outside)."""
        return np.minimum.reduce(
            [np.asarray(x) - self.x_lo, self.x_hi - np.asarray(x),
             np.asarray(y) - self.y_lo, self.y_hi - np.asarray(y)]
        )


@dataclass(frozen=True)
class FixedPointReport:
    origin: NormedState
    axis_x: NormedState
    axis_y: NormedState
    coexistence: NormedState | None
    degenerate: bool = False  # ab == 1, formula undefined

    def points(self):
        pts = [self.origin, self.axis_x, self.axis_y]
        if self.coexistence is not None:
            pts.append(self.coexistence)
        return pts


@dataclass(frozen=True)
class StabilityClass:
    kind: str  # "attracting" | "repelling" | "non_hyperbolic"
    jacobian_spectral_radius: float
    condition_satisfied: bool
    criteria_agree: bool
    eigenvalues: tuple[complex, complex]
    chain: tuple[float, float, float]


@dataclass(frozen=True)
class InvariantSetResult:
    box: Box
    N: int
    margin: float
    lipschitz: float


@dataclass(frozen=True)
class Cycle:
    period: int
    points: np.ndarray  # shape (period, 2)


def _check_finite(*vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite input")


def step_1d(x, r, K):
    """One step of the unnormed 1-D Ricker map x -> x exp(r - K x)."""
    _check_finite(x, r, K)
    if K <= 0:
        raise DomainError("K must be positive")
    return x * math.exp(r - K * x)


def map_F(p, params: ModelParams) -> NormedState:
    x, y = p
    _check_finite(x, y)
    if x < 0 or y < 0:
        raise DomainError("state must lie in the closed first quadrant")
    return NormedState(
        x * math.exp(params.r - x - params.b_eff * y),
        y * math.exp(params.r_tilde - params.a_eff * x - y),
    )


def map_F_array(x, y, params: ModelParams):
    """Vectorised F on arrays of coordinates."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (
        x * np.exp(params.r - x - params.b_eff * y),
        y * np.exp(params.r_tilde - params.a_eff * x - y),
    )


def jacobian(p, params: ModelParams):
    x, y = p
    be, ae = params.b_eff, params.a_eff
    f1 = math.exp(params.r - x - be * y)
    f2 = math.exp(params.r_tilde - ae * x - y)
    return np.array([[f1 * (1.0 - x), -be * x * f1], [-ae * y * f2, f2 * (1.0 - y)]])


def jacobian_array(x, y, params: ModelParams):
    """Jacobian entries on arrays; returns array of shape x.shape + (2, 2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    be, ae = params.b_eff, params.a_eff
    f1 = np.exp(params.r - x - be * y)
    f2 = np.exp(params.r_tilde - ae * x - y)
    J = np.empty(x.shape + (2, 2))
    J[..., 0, 0] = f1 * (1.0 - x)
    J[..., 0, 1] = -be * x * f1
    J[..., 1, 0] = -ae * y * f2
    J[..., 1, 1] = f2 * (1.0 - y)
    return J


def coexistence_formula(params: ModelParams):
    """Raw formula components (x*, y*) or None when ab == 1."""
    det = 1.0 - params.a * params.b
    if det == 0.0:
        return None
    return (
        (params.r - params.b_eff * params.r_tilde) / det,
        (params.r_tilde - params.a_eff * params.r) / det,
    )


def fixed_points(params: ModelParams) -> FixedPointReport:
    raw = coexistence_formula(params)
    coex = None
    if raw is not None and raw[0] > 0 and raw[1] > 0:
        coex = NormedState(*raw)
    report = FixedPointReport(
        origin=NormedState(0.0, 0.0),
        axis_x=NormedState(float(params.r), 0.0),
        axis_y=NormedState(0.0, float(params.r_tilde)),
        coexistence=coex,
        degenerate=raw is None,
    )
    for p in report.points():
        if p.x < 0 or p.y < 0:
            continue  # axis points with negative growth rate lie outside the quadrant
        fx, fy = map_F(p, params)
        res = max(abs(fx - p.x), abs(fy - p.y))
        if res > FIXED_POINT_TOL:
            raise ArithmeticError(f"fixed point {p} has residual {res:.3e}")
    return report


def mutual_invasibility(params: ModelParams) -> bool:
    return (
        params.a * params.b < 1.0
        and params.r > params.b_eff * params.r_tilde
        and params.r_tilde > params.a_eff * params.r
    )


def stability_chain(params: ModelParams):
    """The three expressions of the attractivity inequality chain, in effective coefficients.

    Attracting iff left <= middle < right.
    """
    a, b = params.a_eff, params.b_eff
    r, rt = params.r, params.r_tilde
    left = 2 * (1 - b) * rt + 2 * (1 - a) * r - 4 * (1 - a * b)
    middle = (r - b * rt) * (rt - a * r)
    right = (1 - b) * rt + (1 - a) * r
    return left, middle, right


def classify_coexistence(params: ModelParams) -> StabilityClass:
    if not mutual_invasibility(params):
        raise InvasibilityError("coexistence classification requires mutual invasibility")
    fp = fixed_points(params).coexistence
    eig = np.linalg.eigvals(jacobian(fp, params))
    rho = float(np.max(np.abs(eig)))
    left, middle, right = stability_chain(params)
    holds = left <= middle < right
    if abs(rho - 1.0) < NON_HYPERBOLIC_BAND:
        kind = "non_hyperbolic"
        agree = True
    else:
        kind = "attracting" if holds else "repelling"
        agree = holds == (rho < 1.0)
    return StabilityClass(
        kind=kind,
        jacobian_spectral_radius=rho,
        condition_satisfied=holds,
        criteria_agree=agree,
        eigenvalues=(complex(eig[0]), complex(eig[1])),
        chain=(left, middle, right),
    )


def iterate_orbit(p0, params: ModelParams, T: int) -> np.ndarray:
    """Orbit [p0, F(p0), ..., F^T(p0)] as an array of shape (T + 1, 2)."""
    if T < 1:
        raise DomainError("T must be >= 1")
    out = np.empty((T + 1, 2))
    x, y = map(float, p0)
    out[0] = x, y
    r, rt, be, ae = params.r, params.r_tilde, params.b_eff, params.a_eff
    for t in range(1, T + 1):
        try:
            x, y = x * math.exp(r - x - be * y), y * math.exp(rt - ae * x - y)
        except OverflowError:
            raise OrbitDivergenceError(t) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise OrbitDivergenceError(t)
        out[t] = x, y
    return out


def detect_cycle(params: ModelParams, p0, burn_in=10_000, max_period=64, tol=1e-8):
    """Smallest period <= max_period of the cycle the orbit of p0 settles on, or None."""
    if max_period < 1:
        raise DomainError("max_period must be >= 1")
    if burn_in < 0:
        raise DomainError("burn_in must be >= 0")
    p = np.asarray(p0, dtype=float)
    if burn_in:
        p = iterate_orbit(p, params, burn_in)[-1]
    orbit = iterate_orbit(p, params, max_period)
    for k in range(1, max_period + 1):
        if np.max(np.abs(orbit[k] - orbit[0])) < tol:
            return Cycle(k, orbit[:k].copy())
    return None


# invariant sets ---------------------------------------------------------------


def candidate_boxes(params: ModelParams, fractions=BOX_FRACTIONS):
    """Rectangles around the coexistence point, in deterministic scan order.

    A fraction s gives lower corner s*(x*, y*) and upper corner pulled in from a
    bound on the range of F by the same fraction.
    """
    xs, ys = fixed_points(params).coexistence
    # F_x <= exp(r - 1) on the whole quadrant; pad so the bound is not tight
    ux = 1.25 * max(math.exp(params.r - 1.0), xs)
    uy = 1.25 * max(math.exp(params.r_tilde - 1.0), ys)
    for s in fractions:
        yield Box(s * xs, xs + (1 - s) * (ux - xs), s * ys, ys + (1 - s) * (uy - ys))


def _iterate_grid(box, params, N, n):
    """F^N on an n x n grid over box, plus the largest inf-norm of D(F^N)."""
    X, Y = box.grid(n)
    J = np.broadcast_to(np.eye(2), X.shape + (2, 2)).copy()
    for _ in range(N):
        J = jacobian_array(X, Y, params) @ J
        X, Y = map_F_array(X, Y, params)
    lip = float(np.max(np.abs(J).sum(axis=-1)))
    return X, Y, lip


def verify_box(box: Box, params: ModelParams, N=1, n=201, safety=2.0):
    """Grid check that F^N(box) sits strictly inside box.

    Returns the certified margin: smallest grid depth of F^N minus
    spacing * Lipschitz * safety. Positive means verified.
    """
    X, Y, lip = _iterate_grid(box, params, N, n)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        return -math.inf, lip
    depth = float(np.min(box.depth(X, Y)))
    return depth - box.spacing(n) * lip * safety, lip


def find_invariant_box(params: ModelParams, grid=201, fractions=BOX_FRACTIONS):
    """First candidate rectangle C in the open quadrant with F(C) inside C."""
    if not mutual_invasibility(params):
        raise InvasibilityError("invariant-box search requires mutual invasibility")
    for box in candidate_boxes(params, fractions):
        margin, lip = verify_box(box, params, 1, grid)
        if margin > 0:
            return InvariantSetResult(box, 1, margin, lip)
    return None


def find_contracting_set(params: ModelParams, max_N=8, grid=201, fractions=BOX_FRACTIONS):
    """Smallest N <= max_N and a box C1 with F^N(C1) at positive distance from C1's complement."""
    if max_N < 1:
        raise DomainError("max_N must be >= 1")
    if not mutual_invasibility(params):
        raise InvasibilityError("contracting-set search requires mutual invasibility")
    boxes = list(candidate_boxes(params, fractions))
    for N in range(1, max_N + 1):
        for box in boxes:
            margin, lip = verify_box(box, params, N, grid)
            if margin > 0:
                return InvariantSetResult(box, N, margin, lip)
    return None


def time_average_1d(x0, r, K, T):
    """(1/T) sum_{t<T} x_t along the unnormed 1-D Ricker orbit from x0."""
    if not x0 > 0:
        raise DomainError("x0 must be positive")
    if T < 1:
        raise DomainError("T must be >= 1")
    xs = np.empty(T)
    x = float(x0)
    for t in range(T):
        xs[t] = x
        x = x * math.exp(r - K * x)
    return math.fsum(xs) / T
