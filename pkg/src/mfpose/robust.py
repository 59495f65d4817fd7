"""Hypothesize-and-verify engine and the depth-based translation-scale vote.

The engine is solver-agnostic: data is any (n, d) array, the minimal solver
maps an (m, d) sample to a list of candidate models, and the residual
function maps (model, data) to per-row non-negative residuals.  Scoring is
MSAC (truncated squared residual); iteration count adapts to the observed
inlier ratio.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DegenerateSampleError, NoConsensusError, ScaleConsensusError


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 10000
    inlier_threshold: float = 0.01
    confidence: float = 0.9999
    min_inliers: int = 5
    rng_seed: int = 0
    # floor for the adaptive count: at 100% inliers the formula alone would
    # stop after one sample, leaving an ill-conditioned hypothesis unbeaten
    min_iterations: int = 10

    def __post_init__(self):
        if self.max_iterations < 1 or self.min_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass
class RobustResult:
    model: Any
    inlier_mask: np.ndarray
    inlier_count: int
    score: float  # MSAC loss of the winning model (lower is better)
    iterations: int


def _adaptive_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0:
        return 1
    if p_good <= 0.0:
        return cap
    needed = math.log(1.0 - confidence) / math.log(1.0 - p_good)
    return int(min(cap, max(1.0, math.ceil(needed))))


def ransac(
    data: np.ndarray,
    minimal_solver: Callable[[np.ndarray], Sequence[Any]],
    residual_fn: Callable[[Any, np.ndarray], np.ndarray],
    sample_size: int,
    config: RansacConfig,
    refit: Callable[[Any, np.ndarray], Any] | None = None,
) -> RobustResult:
    """Best model by MSAC score; raises NoConsensusError when support is too thin.

    Hypotheses are evaluated in a fixed sequential order, so the result is
    bit-identical for a given rng_seed.  Solvers may signal an unusable
    sample either with an empty model list or DegenerateSampleError.

    When `refit(model, inlier_data)` is given it is applied to the winning
    consensus set (up to two rounds); the refitted model is adopted only if
    its MSAC score does not regress, so the result never gets worse.
    """
    data = np.asarray(data)
    n = len(data)
    if n < sample_size:
        raise NoConsensusError(f"need at least {sample_size} items, got {n}")

    rng = np.random.default_rng(config.rng_seed)
    threshold_sq = config.inlier_threshold**2
    best_loss = np.inf
    best_model = None
    best_mask = None
    iteration_cap = config.max_iterations
    iteration = 0
    while iteration < iteration_cap:
        iteration += 1
        sample = data[rng.choice(n, size=sample_size, replace=False)]
        try:
            models = minimal_solver(sample)
        except DegenerateSampleError:
            continue
        for model in models:
            residuals = np.asarray(residual_fn(model, data), dtype=float)
            loss = float(np.minimum(residuals**2, threshold_sq).sum())
            if loss < best_loss:
                best_loss = loss
                best_model = model
                best_mask = residuals <= config.inlier_threshold
                iteration_cap = min(
                    config.max_iterations,
                    max(
                        iteration,
                        config.min_iterations,
                        _adaptive_iterations(
                            best_mask.mean(), sample_size, config.confidence, config.max_iterations
                        ),
                    ),
                )

    if best_model is None:
        raise NoConsensusError("no hypothesis could be scored")

    if refit is not None:
        for _ in range(2):
            if int(best_mask.sum()) < sample_size:
                break
            try:
                candidate = refit(best_model, data[best_mask])
            except DegenerateSampleError:
                break
            residuals = np.asarray(residual_fn(candidate, data), dtype=float)
            loss = float(np.minimum(residuals**2, threshold_sq).sum())
            if loss > best_loss:
                break
            mask = residuals <= config.inlier_threshold
            changed = not np.array_equal(mask, best_mask)
            best_model, best_loss, best_mask = candidate, loss, mask
            if not changed:
                break

    count = int(best_mask.sum())
    if count < config.min_inliers:
        raise NoConsensusError(f"best model has {count} inliers < min_inliers={config.min_inliers}")
    return RobustResult(best_model, best_mask, count, best_loss, iteration)


def sampson_error(e: np.ndarray, matches: np.ndarray) -> np.ndarray:
    """First-order geometric distance to the epipolar constraint, per match.

    matches is (n, 4) [x_ref, y_ref, x_query, y_query] in normalized
    coordinates (a single (4,) match is also accepted).  Zero exactly when
    the constraint holds.
    """
    m = np.asarray(matches, dtype=float)
    single = m.ndim == 1
    m = m.reshape(-1, 4)
    ones = np.ones(len(m))
    q_ref = np.column_stack([m[:, 0], m[:, 1], ones])
    q_query = np.column_stack([m[:, 2], m[:, 3], ones])
    e = np.asarray(e, dtype=float)
    eq = q_ref @ e.T  # rows: E @ q_ref
    etq = q_query @ e  # rows: E^T @ q_query
    numerator = np.abs(np.sum(q_query * eq, axis=1))
    denom_sq = eq[:, 0] ** 2 + eq[:, 1] ** 2 + etq[:, 0] ** 2 + etq[:, 1] ** 2
    out = np.where(denom_sq > 0, numerator / np.sqrt(np.maximum(denom_sq, 1e-300)), np.where(numerator > 0, np.inf, 0.0))
    return float(out[0]) if single else out


@dataclass(frozen=True)
class ScaleConsensusConfig:
    relative_tolerance: float = 0.1
    min_component: float = 1e-4  # meters; guards tiny projections onto t_hat

    def __post_init__(self):
        if self.relative_tolerance <= 0:
            raise ValueError("relative_tolerance must be positive")


def scale_consensus(
    ref_points: np.ndarray,
    query_points: np.ndarray,
    rotation: np.ndarray,
    t_hat: np.ndarray,
    config: ScaleConsensusConfig = ScaleConsensusConfig(),
) -> tuple[float, int]:
    """Metric translation scale by maximum consensus over per-match estimates.

    Each 3D-3D correspondence votes s_i = t_hat . (Xq_i - R @ Xr_i), where
    t_hat must be a unit vector.  Every estimate above min_component is a
    candidate cluster center; the center whose relative_tolerance band holds
    the most estimates wins (ties: smaller mean absolute deviation, then
    smaller scale) and the returned scale is the mean of its supporters.
    Raises ScaleConsensusError when no estimate is positive.
    """
    ref_points = np.asarray(ref_points, dtype=float).reshape(-1, 3)
    query_points = np.asarray(query_points, dtype=float).reshape(-1, 3)
    estimates = (query_points - ref_points @ np.asarray(rotation, dtype=float).T) @ np.asarray(
        t_hat, dtype=float
    )
    candidates = estimates[estimates > config.min_component]
    if len(candidates) == 0:
        raise ScaleConsensusError("all per-correspondence scale estimates are non-positive")

    # O(n^2) support matrix: row i = estimates within the band around candidate i
    support = np.abs(estimates[None, :] - candidates[:, None]) <= config.relative_tolerance * candidates[:, None]
    counts = support.sum(axis=1)
    best_count = counts.max()
    best = None
    seen_masks: set[bytes] = set()  # tied candidates often share one supporter set
    for idx in np.flatnonzero(counts == best_count):
        mask_key = support[idx].tobytes()
        if mask_key in seen_masks:
            continue
        seen_masks.add(mask_key)
        supporters = np.sort(estimates[support[idx]])
        scale = float(np.mean(supporters))
        mad = float(np.mean(np.abs(supporters - scale)))
        key = (mad, scale)
        if best is None or key < best[0]:
            best = (key, scale)
    return best[1], int(best_count)
