"""Optimal transfer-quantity planning.

The generalization-error proxy being minimized is, for ``s`` transferred
samples pooled with ``n0`` target samples,

    dim/2 * ( 1/(n0 + s) + s^2/(n0 + s)^2 * t )

where ``t`` is the Fisher-weighted squared parameter offset per dimension (a
single source's discrepancy, or ``alpha^T M alpha / dim`` for a mix of
sources). The single-source minimizer has a closed form with two regimes split
at ``n0 * t = 0.5``; the multi-source problem is solved by a grid over the
total quantity with a capped-simplex quadratic program at each grid point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Regime",
    "SinglePlan",
    "ProxyCurve",
    "TransferProblem",
    "TransferPlan",
    "FeasibilityError",
    "proxy_value",
    "proxy_derivative",
    "optimal_single",
    "proxy_multi",
    "project_capped_simplex",
    "solve_alpha_qp",
    "plan_transfer",
    "regime_curve",
]

QP_TOL = 1e-12
QP_MAX_ITER = 10_000
_BISECT_ITERS = 64


class FeasibilityError(ValueError):
    """Requested transfer quantities exceed what the sources can supply."""


class Regime(Enum):
    """Shape of the proxy as a function of the transfer quantity."""

    MONOTONE_DECREASING = "monotone_decreasing"
    INTERIOR_MINIMUM = "interior_minimum"


def proxy_value(n0: int, s, t, dim: int = 1):
    """Leading-order expected-KL proxy at transfer quantity ``s``.

    Vectorized over ``s`` and ``t``. The remainder term of the underlying
    expansion is dropped; for Gaussian-mean families the returned value is the
    exact finite-sample expectation.
    """
    s = np.asarray(s, dtype=np.float64)
    total = n0 + s
    return 0.5 * dim * (1.0 / total + (s * s) * np.asarray(t) / (total * total))


def proxy_derivative(n0: int, s, t, dim: int = 1):
    """Analytic d/ds of :func:`proxy_value`; zero at the interior optimum."""
    s = np.asarray(s, dtype=np.float64)
    total = n0 + s
    return 0.5 * dim * (2.0 * n0 * s * np.asarray(t) - total) / total ** 3


@dataclass(frozen=True)
class SinglePlan:
    """Closed-form single-source answer: quantity, regime and stationary point."""

    n_star: int
    regime: Regime
    interior: float | None = None


def optimal_single(n0: int, cap: int, t: float) -> SinglePlan:
    """Optimal single-source transfer quantity.

    When ``n0 * t <= 0.5`` the proxy decreases monotonically, so the source
    cap is taken whole. Otherwise the proxy dips at ``n0 / (2 n0 t - 1)``;
    the returned integer is whichever of its floor/ceiling neighbours scores
    lower (ties to the smaller quantity), clipped by the cap.
    """
    if n0 < 1 or cap < 1:
        raise ValueError("n0 and cap must be positive")
    if t < 0:
        raise ValueError("discrepancy must be nonnegative")
    if n0 * t <= 0.5:
        return SinglePlan(n_star=cap, regime=Regime.MONOTONE_DECREASING)
    interior = n0 / (2.0 * n0 * t - 1.0)
    if interior >= cap:
        return SinglePlan(n_star=cap, regime=Regime.INTERIOR_MINIMUM, interior=interior)
    lo, hi = int(math.floor(interior)), int(math.ceil(interior))
    if lo == hi or proxy_value(n0, lo, t) <= proxy_value(n0, hi, t):
        best = lo
    else:
        best = hi
    return SinglePlan(n_star=min(best, cap), regime=Regime.INTERIOR_MINIMUM, interior=interior)


@dataclass(frozen=True)
class ProxyCurve:
    """Tabulated proxy values over a quantity grid, with the regime label."""

    quantities: np.ndarray
    values: np.ndarray
    regime: Regime
    interior: float | None = None


def regime_curve(n0: int, cap: int, t: float, grid_points: int) -> ProxyCurve:
    """Tabulate the single-source proxy over an even grid on ``[0, cap]``."""
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    grid = np.unique(np.floor(np.linspace(0.0, cap, grid_points) + 0.5).astype(np.int64))
    plan = optimal_single(n0, cap, t)
    return ProxyCurve(
        quantities=grid,
        values=proxy_value(n0, grid, t),
        regime=plan.regime,
        interior=plan.interior,
    )


@dataclass
class TransferProblem:
    """Input to the multi-source planner.

    ``gram`` is the K x K matrix of Fisher-weighted source-offset inner
    products; ``caps`` are the per-source sample budgets.
    """

    n0: int
    dim: int
    caps: np.ndarray
    gram: np.ndarray
    step_number: int = 1000

    def __post_init__(self):
        self.caps = np.asarray(self.caps, dtype=np.int64)
        self.gram = np.asarray(self.gram, dtype=np.float64)
        if self.n0 < 1 or self.dim < 1 or self.step_number < 1:
            raise ValueError("n0, dim and step_number must be positive")
        k = self.caps.shape[0]
        if k < 1 or (self.caps < 1).any():
            raise ValueError("need at least one source with a positive cap")
        if self.gram.shape != (k, k):
            raise ValueError(f"gram must be {k} x {k} to match the caps")
        if not np.allclose(self.gram, self.gram.T, atol=1e-10):
            raise ValueError("gram matrix must be symmetric")
        scale = max(1.0, float(np.abs(self.gram).max()))
        if np.linalg.eigvalsh(self.gram)[0] < -1e-8 * scale:
            raise ValueError("gram matrix must be positive semidefinite")

    @property
    def num_sources(self) -> int:
        return self.caps.shape[0]


def proxy_multi(problem: TransferProblem, s: int, alpha) -> float:
    """Proxy value for a feasible ``(s, alpha)`` split; ``alpha`` is ignored at s=0."""
    if s < 0:
        raise FeasibilityError("total transfer quantity must be nonnegative")
    if s == 0:
        return float(0.5 * problem.dim / problem.n0)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (problem.num_sources,):
        raise ValueError("alpha length must match the number of sources")
    if abs(alpha.sum() - 1.0) > 1e-9 or (alpha < -1e-12).any():
        raise FeasibilityError("alpha must lie on the simplex")
    if (s * alpha > problem.caps + 0.5).any():
        raise FeasibilityError("alpha exceeds a source cap at this total quantity")
    t = float(alpha @ problem.gram @ alpha) / problem.dim
    return float(proxy_value(problem.n0, s, t, problem.dim))


def _project_capped_batch(y: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto {x : 0 <= x <= upper, sum x = 1}.

    The projection is ``clip(y - lam, 0, upper)`` for the row's shift
    multiplier ``lam``; the row sum is nonincreasing in ``lam``, so ``lam`` is
    found by bisection between a bound clamping everything at the caps and one
    zeroing everything out.
    """
    lo = (y - upper).min(axis=1)
    hi = y.max(axis=1)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        total = np.clip(y - mid[:, None], 0.0, upper).sum(axis=1)
        above = total > 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    lam = 0.5 * (lo + hi)
    return np.clip(y - lam[:, None], 0.0, upper)


def project_capped_simplex(y, upper) -> np.ndarray:
    """Project one vector onto the capped simplex {x : 0 <= x <= upper, sum x = 1}."""
    y = np.asarray(y, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if upper.sum() < 1.0 - 1e-9:
        raise FeasibilityError("caps sum to less than one; the set is empty")
    return _project_capped_batch(y[None, :], np.minimum(upper, 1.0)[None, :])[0]


def _qp_descent(m: np.ndarray, alpha: np.ndarray, upper: np.ndarray,
                tol: float, max_iter: int) -> np.ndarray:
    """Projected gradient descent on ``alpha^T m alpha`` over capped simplices.

    Runs all rows of ``alpha`` in lockstep with an exact line search along
    each projected-gradient direction; a row leaves the active set once its
    objective improves by less than ``tol``.
    """
    lam_max = float(np.linalg.eigvalsh(m)[-1])
    if lam_max <= 0.0:
        return alpha  # flat objective: the initial feasible point is optimal
    eta = 1.0 / (2.0 * lam_max)
    obj = np.einsum("gi,ij,gj->g", alpha, m, alpha)
    active = np.arange(alpha.shape[0])
    for _ in range(max_iter):
        a = alpha[active]
        grad = 2.0 * a @ m
        direction = _project_capped_batch(a - eta * grad, upper[active]) - a
        curv = np.einsum("gi,ij,gj->g", direction, m, direction)
        slope = np.einsum("gi,gi->g", grad, direction)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(curv > 0.0, -0.5 * slope / np.maximum(curv, 1e-300), 1.0)
        gamma = np.clip(gamma, 0.0, 1.0)
        a_new = a + gamma[:, None] * direction
        obj_new = np.einsum("gi,ij,gj->g", a_new, m, a_new)
        alpha[active] = a_new
        improved = obj[active] - obj_new
        obj[active] = obj_new
        active = active[improved >= tol]
        if active.size == 0:
            break
    return alpha


def _solve_qp_batch(m: np.ndarray, s_values: np.ndarray, caps: np.ndarray,
                    tol: float = QP_TOL, max_iter: int = QP_MAX_ITER) -> np.ndarray:
    """Solve the proportion QP for every total quantity in ``s_values`` at once.

    Initialization: the cap-free simplex optimum (solved once; it does not
    depend on ``s``), projected onto each row's capped simplex. Rows whose
    caps are slack therefore converge immediately. The matrix is normalized by
    its largest entry first so the improvement threshold, and therefore the
    returned argmin, is invariant under positive rescaling of ``m``.
    """
    k = m.shape[0]
    scale = float(np.abs(m).max())
    if scale > 0.0:
        m = m / scale
    upper = np.minimum(caps[None, :].astype(np.float64) / s_values[:, None], 1.0)
    uniform = np.full((1, k), 1.0 / k)
    base = _qp_descent(m, uniform.copy(), np.ones((1, k)), tol, max_iter)[0]
    alpha = _project_capped_batch(np.broadcast_to(base, upper.shape).copy(), upper)
    return _qp_descent(m, alpha, upper, tol, max_iter)


def solve_alpha_qp(gram, s: int, caps, *, tol: float = QP_TOL,
                   max_iter: int = QP_MAX_ITER) -> np.ndarray:
    """Minimize ``alpha^T gram alpha`` over the capped simplex for total ``s``.

    The feasible set is {alpha >= 0, sum alpha = 1, s * alpha_i <= caps_i};
    it is empty when ``s`` exceeds the summed caps. With a flat objective
    (``gram == 0``) the convention is the uniform vector projected onto the
    caps, i.e. uniform over the sources with remaining capacity.
    """
    gram = np.asarray(gram, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    if s < 1:
        raise FeasibilityError("total transfer quantity must be at least 1")
    if s > caps.sum():
        raise FeasibilityError(
            f"total quantity {s} exceeds the summed source caps {int(caps.sum())}"
        )
    return _solve_qp_batch(gram, np.array([s], dtype=np.int64), caps,
                           tol=tol, max_iter=max_iter)[0]


def _apportion(s: int, alpha: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Integerize ``s * alpha`` by largest fractional part, respecting caps.

    Floors first, then hands the remaining units one at a time to the largest
    fractional parts that still have cap headroom, lower index on ties.
    """
    raw = s * alpha
    n = np.minimum(np.floor(raw).astype(np.int64), caps)
    remaining = s - int(n.sum())
    if remaining > 0:
        frac = raw - n
        order = np.lexsort((np.arange(alpha.shape[0]), -frac))
        while remaining > 0:
            progressed = False
            for i in order:
                if n[i] < caps[i]:
                    n[i] += 1
                    remaining -= 1
                    progressed = True
                    if remaining == 0:
                        break
            if not progressed:
                raise FeasibilityError("caps cannot absorb the planned total quantity")
    return n


@dataclass(frozen=True)
class TransferPlan:
    """Planner output: total, per-source proportions and integer quantities.

    ``alpha_star`` holds the integerized proportions ``n_star / s_star`` (the
    zero vector when nothing is transferred) so that ``predicted_proxy`` is
    exactly the proxy of the integer plan; ``continuous_proxy`` keeps the
    pre-rounding grid optimum for monitoring the integerization gap.
    """

    s_star: int
    alpha_star: np.ndarray
    n_star: np.ndarray
    predicted_proxy: float
    continuous_proxy: float
    grid_step: float
    curve: ProxyCurve | None = None

    @property
    def rounding_gap(self) -> float:
        return self.predicted_proxy - self.continuous_proxy


def plan_transfer(problem: TransferProblem, include_curve: bool = False) -> TransferPlan:
    """Grid over the total quantity, QP per grid point, then integerize.

    The grid is {0} plus ``step_number`` evenly spaced, rounded totals up to
    the summed caps. Ties in the objective go to the smaller total, and the
    leftover units of ``s* . alpha*`` are apportioned by largest fractional
    part (lower source index on ties).
    """
    caps = problem.caps
    total = int(caps.sum())
    k = np.arange(1, problem.step_number + 1, dtype=np.int64)
    grid = np.floor(k * total / problem.step_number + 0.5).astype(np.int64)
    grid = np.unique(np.concatenate(([0], grid)))

    values = np.empty(grid.shape[0])
    values[0] = 0.5 * problem.dim / problem.n0
    positive = grid[1:]
    alphas = _solve_qp_batch(problem.gram, positive, caps)
    quad = np.einsum("gi,ij,gj->g", alphas, problem.gram, alphas)
    tot = problem.n0 + positive.astype(np.float64)
    values[1:] = 0.5 * problem.dim / tot + 0.5 * (positive ** 2) * quad / (tot * tot)

    best = int(np.argmin(values))  # first minimum: ties resolve to smaller s
    s_star = int(grid[best])
    if s_star == 0:
        n_star = np.zeros(problem.num_sources, dtype=np.int64)
        alpha_star = np.zeros(problem.num_sources)
        predicted = values[0]
    else:
        n_star = _apportion(s_star, alphas[best - 1], caps)
        alpha_star = n_star / s_star
        predicted = proxy_multi(problem, s_star, alpha_star)

    curve = None
    if include_curve:
        regime = (
            Regime.MONOTONE_DECREASING if best == grid.shape[0] - 1
            else Regime.INTERIOR_MINIMUM
        )
        interior = None if regime is Regime.MONOTONE_DECREASING else float(s_star)
        curve = ProxyCurve(quantities=grid, values=values, regime=regime, interior=interior)

    return TransferPlan(
        s_star=s_star,
        alpha_star=alpha_star,
        n_star=n_star,
        predicted_proxy=float(predicted),
        continuous_proxy=float(values[best]),
        grid_step=total / problem.step_number,
        curve=curve,
    )
