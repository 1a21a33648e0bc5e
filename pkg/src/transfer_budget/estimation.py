"""Pooled maximum-likelihood estimation and Fisher-information estimates.

The planner only ever needs the K x K Gram matrix of source parameter offsets
under the Fisher metric, so the empirical-Fisher paths expose a quadratic-form
interface that never materializes a ``d x d`` matrix unless explicitly asked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .families import Family

__all__ = [
    "FisherMode",
    "PooledData",
    "MLEFit",
    "FisherEstimate",
    "QuadFormMatrix",
    "InsufficientDataError",
    "pooled_mle",
    "empirical_fisher",
    "offset_gram",
    "discrepancy",
]


class InsufficientDataError(ValueError):
    """Raised when an estimator is asked to fit from an empty dataset."""


class FisherMode(Enum):
    """How the Fisher information entering the planner is obtained."""

    ANALYTIC = "analytic"
    #: average of per-sample score outer products, (1/n) sum g_j g_j^T
    PER_SAMPLE = "per_sample"
    #: outer product of the mean gradient, g-bar g-bar^T (rank one; vanishes
    #: at the fitted optimum, retained for comparison against PER_SAMPLE)
    BATCH = "batch"


@dataclass
class PooledData:
    """Target samples plus the per-source transferred samples.

    ``target`` and each entry of ``sources`` use the owning family's sample
    container. Tags identify the originating task; samples are grouped per
    task by construction, so a sample's tag is its list's tag.
    """

    target: object
    sources: list = field(default_factory=list)
    target_tag: str = "target"
    source_tags: list[str] | None = None

    def counts(self, family: Family) -> tuple[int, list[int]]:
        return family.count(self.target), [family.count(s) for s in self.sources]


@dataclass
class MLEFit:
    """Pooled MLE output with fitting diagnostics."""

    theta: np.ndarray
    smoothed: bool = False
    iterations: int = 0
    grad_inf_norm: float = 0.0
    log_likelihood: float = float("nan")


def _softmax_mle(family, x, *, tol: float = 1e-8, max_iter: int = 10_000,
                 theta0: np.ndarray | None = None) -> MLEFit:
    """Gradient ascent on the average log-likelihood with backtracking halving.

    The initial step comes from the curvature bound of the multinomial
    logistic loss (half the top eigenvalue of the feature second moment), so
    plain ascent is stable; halving only triggers on non-improvement.
    """
    features, _ = x
    n = features.shape[0]
    moment = features.T @ features / n
    lipschitz = 0.5 * float(np.linalg.eigvalsh(moment)[-1])
    step = 1.0 / max(lipschitz, 1e-12)

    theta = np.zeros(family.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    value = family.log_prob(theta, x).mean()
    grad = family.score(theta, x).mean(axis=0)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if float(np.abs(grad).max()) < tol:
            break
        improved = False
        while step >= 1e-16:
            candidate = theta + step * grad
            cand_value = family.log_prob(candidate, x).mean()
            if cand_value >= value:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        theta, value = candidate, cand_value
        grad = family.score(theta, x).mean(axis=0)
    return MLEFit(
        theta=theta,
        smoothed=False,
        iterations=iterations,
        grad_inf_norm=float(np.abs(grad).max()),
        log_likelihood=float(value),
    )


def pooled_mle(family: Family, data: PooledData, *, tol: float = 1e-8,
               max_iter: int = 10_000) -> MLEFit:
    """Maximize the average log-likelihood over target plus transferred samples.

    Families with sufficient statistics use their closed form (frequency cells
    that would map to infinite logits get 0.5 additive smoothing and the fit
    is flagged); softmax regression is fit by gradient ascent with stopping
    rule ``max|grad| < tol`` or ``max_iter`` iterations.
    """
    parts = [data.target] + list(data.sources)
    parts = [p for p in parts if family.count(p) > 0]
    if not parts:
        raise InsufficientDataError("pooled MLE needs at least one sample")
    pooled = family.stack(parts) if len(parts) > 1 else parts[0]

    if family.has_closed_form_mle:
        theta, smoothed = family.closed_form_mle(pooled)
        return MLEFit(
            theta=np.atleast_1d(theta),
            smoothed=smoothed,
            log_likelihood=float(family.log_prob(theta, pooled).mean()),
        )
    return _softmax_mle(family, pooled, tol=tol, max_iter=max_iter)


@dataclass
class FisherEstimate:
    """Fisher information exposed as a quadratic form.

    ``quad_form(U)`` evaluates ``U^T J U`` for a ``(d, K)`` block of vectors;
    the per-sample path works from the ``(n, d)`` score matrix so nothing
    ``d x d`` is ever built unless :meth:`dense` is called.
    """

    mode: FisherMode
    dim: int
    sample_count: int
    _matrix: np.ndarray | None = None
    _scores: np.ndarray | None = None
    _mean_score: np.ndarray | None = None

    def quad_form(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        squeeze = u.ndim == 1
        if squeeze:
            u = u[:, None]
        if u.shape[0] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {u.shape[0]}")
        if self.mode is FisherMode.ANALYTIC:
            out = u.T @ self._matrix @ u
        elif self.mode is FisherMode.PER_SAMPLE:
            v = self._scores @ u
            out = v.T @ v / self._scores.shape[0]
        else:
            w = self._mean_score @ u
            out = np.outer(w, w)
        out = 0.5 * (out + out.T)
        return out[0, 0] if squeeze else out

    def dense(self) -> np.ndarray:
        """Materialize the full ``d x d`` matrix (memory grows quadratically)."""
        if self.mode is FisherMode.ANALYTIC:
            return self._matrix
        if self.mode is FisherMode.PER_SAMPLE:
            m = self._scores.T @ self._scores / self._scores.shape[0]
        else:
            m = np.outer(self._mean_score, self._mean_score)
        return 0.5 * (m + m.T)

    @property
    def matrix(self) -> np.ndarray:
        return self.dense()


def empirical_fisher(family: Family, theta, samples,
                     mode: FisherMode = FisherMode.PER_SAMPLE) -> FisherEstimate:
    """Estimate the Fisher information at ``theta`` from observed samples."""
    if mode is FisherMode.ANALYTIC:
        return FisherEstimate(
            mode=mode, dim=family.dim, sample_count=0, _matrix=family.fisher(theta)
        )
    n = family.count(samples)
    if n == 0:
        raise InsufficientDataError("empirical Fisher needs at least one sample")
    scores = family.score(theta, samples)
    if mode is FisherMode.PER_SAMPLE:
        return FisherEstimate(mode=mode, dim=family.dim, sample_count=n, _scores=scores)
    return FisherEstimate(
        mode=mode, dim=family.dim, sample_count=n, _mean_score=scores.mean(axis=0)
    )


@dataclass
class QuadFormMatrix:
    """K x K Gram matrix of source parameter offsets under the Fisher metric.

    Entry ``(i, j)`` is ``(theta_i - theta_0)^T J (theta_j - theta_0)``; the
    diagonal divided by the dimension gives each source's discrepancy scalar.
    """

    matrix: np.ndarray
    offset_norms: np.ndarray

    @property
    def num_sources(self) -> int:
        return self.matrix.shape[0]


def offset_gram(fisher: FisherEstimate, theta0, source_params) -> QuadFormMatrix:
    """Build the planner's K x K quadratic-form matrix from parameter offsets."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    offsets = [np.asarray(t, dtype=np.float64) - theta0 for t in source_params]
    if not offsets:
        raise ValueError("need at least one source parameter")
    for off in offsets:
        if off.shape != theta0.shape:
            raise ValueError("source parameter dimension mismatch")
    u = np.stack(offsets, axis=1)
    gram = np.atleast_2d(fisher.quad_form(u))
    norms = np.array([float(np.linalg.norm(o)) for o in offsets])
    return QuadFormMatrix(matrix=gram, offset_norms=norms)


def discrepancy(fisher: FisherEstimate, theta0, theta1) -> float:
    """Fisher-weighted squared parameter distance per dimension.

    ``(theta1 - theta0)^T J (theta1 - theta0) / d``; scalar regardless of the
    parameter dimension, and symmetric in its two arguments because J is
    evaluated wherever ``fisher`` was built.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta1 = np.asarray(theta1, dtype=np.float64)
    if theta0.shape != theta1.shape:
        raise ValueError("parameter dimension mismatch")
    return float(fisher.quad_form(theta1 - theta0)) / fisher.dim
