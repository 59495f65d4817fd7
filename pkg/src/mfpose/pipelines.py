"""End-to-end metric relative-pose estimators.

Three variants, all consuming pixel correspondences between one reference
and one query image plus monocular depth and intrinsics:

* essmat-dscale: robust five-point essential matrix, cheirality-resolved
  decomposition, then a depth-backed consensus vote for the translation
  scale.
* pnp: reference pixels lifted to 3D with reference depth, robust P3P over
  the resulting 2D(query)-3D pairs, Gauss-Newton refinement on all inliers.
* procrustes: both images lifted to 3D, robust rigid alignment of the
  3D-3D pairs, final re-fit on all inliers.

Estimators never fabricate a pose: when the robust loop or the scale vote
fails they return a non-ok status instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import solvers
from .errors import (
    CheiralityError,
    DegenerateSampleError,
    InvalidParameterError,
    NoConsensusError,
    ScaleConsensusError,
)
from .geometry import CameraIntrinsics, Pose, backproject, normalized_coords
from .robust import RansacConfig, ScaleConsensusConfig, ransac, sampson_error, scale_consensus


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """2D-2D pixel matches between the reference and query image."""

    ref_px: np.ndarray  # (n, 2)
    query_px: np.ndarray  # (n, 2)
    scores: np.ndarray  # (n,), finite, nominally in [0, 1]

    def __post_init__(self):
        ref = np.asarray(self.ref_px, dtype=float).reshape(-1, 2)
        query = np.asarray(self.query_px, dtype=float).reshape(-1, 2)
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if not (len(ref) == len(query) == len(scores)):
            raise InvalidParameterError("correspondence arrays must have equal length")
        if len(scores) and not np.all(np.isfinite(scores)):
            raise InvalidParameterError("match scores must be finite")
        for arr in (ref, query, scores):
            arr.setflags(write=False)
        object.__setattr__(self, "ref_px", ref)
        object.__setattr__(self, "query_px", query)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)

    @staticmethod
    def empty() -> "CorrespondenceSet":
        return CorrespondenceSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))


def pixel_index(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel (column, row) indices for (..., 2) pixel coordinates."""
    px = np.asarray(pixels, dtype=float)
    u = np.floor(px[..., 0] + 0.5).astype(int)
    v = np.floor(px[..., 1] + 0.5).astype(int)
    return u, v


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel metric depth in meters; non-positive or non-finite = invalid."""

    values: np.ndarray  # (height, width), row-major

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidParameterError("depth map must be a 2-D array")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def sample_nearest(self, pixels: np.ndarray) -> np.ndarray:
        """Depth at the nearest pixel of each (n, 2) coordinate (no interpolation).

        Nearest-neighbor lookup avoids mixing foreground and background
        across depth discontinuities.  Out-of-range coordinates clamp to the
        border.
        """
        u, v = pixel_index(pixels)
        u = np.clip(u, 0, self.width - 1)
        v = np.clip(v, 0, self.height - 1)
        return self.values[v, u]

    @staticmethod
    def valid(depths: np.ndarray) -> np.ndarray:
        d = np.asarray(depths, dtype=float)
        return np.isfinite(d) & (d > 0)


class EstimateStatus(str, enum.Enum):
    OK = "ok"
    NO_ESTIMATE = "no_estimate"
    DEGENERATE_SCALE = "degenerate_scale"


@dataclass(frozen=True)
class PoseEstimate:
    """Metric query-relative-to-reference pose, or an explicit failure status."""

    status: EstimateStatus
    pose: Pose | None = None
    confidence: float | None = None

    def __post_init__(self):
        if (self.status is EstimateStatus.OK) != (self.pose is not None):
            raise InvalidParameterError("pose must be present exactly when status is ok")
        if self.confidence is not None and self.confidence < 0:
            raise InvalidParameterError("confidence must be non-negative")


_NO_ESTIMATE = PoseEstimate(EstimateStatus.NO_ESTIMATE)
_DEGENERATE_SCALE = PoseEstimate(EstimateStatus.DEGENERATE_SCALE)


@dataclass(frozen=True)
class EstimatorConfig:
    """Robust-loop and scale-vote parameters shared by the three estimators."""

    max_iterations: int = 10000
    confidence: float = 0.9999
    min_inliers: int = 5
    rng_seed: int = 0
    # None -> 4 / (geometric mean of the four focal lengths), in normalized units
    sampson_threshold: float | None = None
    pnp_threshold_px: float = 3.0
    procrustes_threshold_m: float = 0.15
    scale_relative_tolerance: float = 0.1
    scale_min_component: float = 1e-4
    min_scale_support: int = 5  # valid-depth inliers required before voting

    def ransac_config(self, threshold: float) -> RansacConfig:
        return RansacConfig(
            max_iterations=self.max_iterations,
            inlier_threshold=threshold,
            confidence=self.confidence,
            min_inliers=self.min_inliers,
            rng_seed=self.rng_seed,
        )

    def scale_config(self) -> ScaleConsensusConfig:
        return ScaleConsensusConfig(self.scale_relative_tolerance, self.scale_min_component)


def _normalized_matches(c: CorrespondenceSet, k_ref: CameraIntrinsics, k_query: CameraIntrinsics) -> np.ndarray:
    return np.column_stack(
        [normalized_coords(k_ref, c.ref_px), normalized_coords(k_query, c.query_px)]
    )


def estimate_essmat_dscale(
    c: CorrespondenceSet,
    depth_ref: DepthMap,
    depth_query: DepthMap,
    k_ref: CameraIntrinsics,
    k_query: CameraIntrinsics,
    cfg: EstimatorConfig = EstimatorConfig(),
) -> PoseEstimate:
    """Essential matrix + depth scale (2D-2D matches, both depth maps).

    Depth enters only after the essential-matrix stage: matches with invalid
    depth on either side still vote for the epipolar geometry and the
    confidence, they are just excluded from the scale consensus.  The winning
    hypothesis is polished on its consensus set (Sampson refinement) before
    decomposition; minimal five-point fits alone are too noisy to meet the
    benchmark's accuracy regime.
    """
    if len(c) < 5:
        return _NO_ESTIMATE
    data = _normalized_matches(c, k_ref, k_query)
    if cfg.sampson_threshold is not None:
        threshold = cfg.sampson_threshold
    else:
        threshold = 4.0 / float((k_ref.fx * k_ref.fy * k_query.fx * k_query.fy) ** 0.25)

    def refit(model, inliers):
        try:
            return solvers.refine_essential(model, inliers)
        except CheiralityError:
            return model

    try:
        result = ransac(
            data, solvers.essential_five_point, sampson_error, 5, cfg.ransac_config(threshold), refit=refit
        )
    except NoConsensusError:
        return _NO_ESTIMATE
    try:
        rotation, t_hat = solvers.decompose_essential(result.model, data[result.inlier_mask])
    except CheiralityError:
        return _NO_ESTIMATE

    ref_px = c.ref_px[result.inlier_mask]
    query_px = c.query_px[result.inlier_mask]
    d_ref = depth_ref.sample_nearest(ref_px)
    d_query = depth_query.sample_nearest(query_px)
    valid = DepthMap.valid(d_ref) & DepthMap.valid(d_query)
    if int(valid.sum()) < cfg.min_scale_support:
        return _DEGENERATE_SCALE
    x_ref = backproject(k_ref, ref_px[valid], d_ref[valid])
    x_query = backproject(k_query, query_px[valid], d_query[valid])
    try:
        scale, _ = scale_consensus(x_ref, x_query, rotation, t_hat, cfg.scale_config())
    except ScaleConsensusError:
        return _DEGENERATE_SCALE
    pose = Pose(rotation, scale * t_hat)
    return PoseEstimate(EstimateStatus.OK, pose, float(result.inlier_count))


def estimate_pnp(
    c: CorrespondenceSet,
    depth_ref: DepthMap,
    k_ref: CameraIntrinsics,
    k_query: CameraIntrinsics,
    cfg: EstimatorConfig = EstimatorConfig(),
) -> PoseEstimate:
    """PnP over 2D query features and 3D points lifted from reference depth."""
    if len(c) < 4:
        return _NO_ESTIMATE
    d_ref = depth_ref.sample_nearest(c.ref_px)
    valid = DepthMap.valid(d_ref)
    if int(valid.sum()) < 4:
        return _NO_ESTIMATE
    points3d = backproject(k_ref, c.ref_px[valid], d_ref[valid])
    pixels = c.query_px[valid]
    data = np.column_stack([pixels, points3d])

    def minimal(sample: np.ndarray):
        rays = normalized_coords(k_query, sample[:, :2])
        return solvers.pnp_p3p(sample[:, 2:], rays)

    def residual(pose: Pose, rows: np.ndarray) -> np.ndarray:
        cam = pose.transform(rows[:, 2:])
        z = cam[:, 2]
        out = np.full(len(rows), np.inf)
        front = z > 0
        if np.any(front):
            u = k_query.fx * cam[front, 0] / z[front] + k_query.cx
            v = k_query.fy * cam[front, 1] / z[front] + k_query.cy
            out[front] = np.hypot(u - rows[front, 0], v - rows[front, 1])
        return out

    try:
        result = ransac(data, minimal, residual, 3, cfg.ransac_config(cfg.pnp_threshold_px))
    except NoConsensusError:
        return _NO_ESTIMATE
    refined = solvers.refine_pnp(
        result.model, points3d[result.inlier_mask], pixels[result.inlier_mask], k_query
    )
    return PoseEstimate(EstimateStatus.OK, refined.pose, float(result.inlier_count))


def estimate_procrustes(
    c: CorrespondenceSet,
    depth_ref: DepthMap,
    depth_query: DepthMap,
    k_ref: CameraIntrinsics,
    k_query: CameraIntrinsics,
    cfg: EstimatorConfig = EstimatorConfig(),
) -> PoseEstimate:
    """Rigid alignment of 3D-3D correspondences back-projected from both images."""
    if len(c) < 3:
        return _NO_ESTIMATE
    d_ref = depth_ref.sample_nearest(c.ref_px)
    d_query = depth_query.sample_nearest(c.query_px)
    valid = DepthMap.valid(d_ref) & DepthMap.valid(d_query)
    if int(valid.sum()) < 3:
        return _NO_ESTIMATE
    x_ref = backproject(k_ref, c.ref_px[valid], d_ref[valid])
    x_query = backproject(k_query, c.query_px[valid], d_query[valid])
    data = np.column_stack([x_ref, x_query])

    def minimal(sample: np.ndarray):
        return [solvers.procrustes_align(sample[:, :3], sample[:, 3:])]

    def residual(pose: Pose, rows: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pose.transform(rows[:, :3]) - rows[:, 3:], axis=1)

    try:
        result = ransac(data, minimal, residual, 3, cfg.ransac_config(cfg.procrustes_threshold_m))
    except NoConsensusError:
        return _NO_ESTIMATE
    pose = result.model
    try:
        pose = solvers.procrustes_align(x_ref[result.inlier_mask], x_query[result.inlier_mask])
    except DegenerateSampleError:
        pass  # keep the minimal-sample model when the inlier re-fit degenerates
    return PoseEstimate(EstimateStatus.OK, pose, float(result.inlier_count))


ESTIMATOR_NAMES = ("essmat-dscale", "pnp", "procrustes")


def run_estimator(
    name: str,
    c: CorrespondenceSet,
    depth_ref: DepthMap,
    depth_query: DepthMap,
    k_ref: CameraIntrinsics,
    k_query: CameraIntrinsics,
    cfg: EstimatorConfig = EstimatorConfig(),
) -> PoseEstimate:
    """Dispatch an estimator by CLI name."""
    if name == "essmat-dscale":
        return estimate_essmat_dscale(c, depth_ref, depth_query, k_ref, k_query, cfg)
    if name == "pnp":
        return estimate_pnp(c, depth_ref, k_ref, k_query, cfg)
    if name == "procrustes":
        return estimate_procrustes(c, depth_ref, depth_query, k_ref, k_query, cfg)
    raise InvalidParameterError(f"unknown estimator {name!r}; expected one of {ESTIMATOR_NAMES}")
