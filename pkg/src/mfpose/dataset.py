"""On-disk scene formats and a synthetic-scene generator with ground truth.

Directory layout (one directory per scene under a dataset root):

    root/<scene_id>/
        poses.txt        frame_name qw qx qy qz tx ty tz   (world-to-camera,
                         meters; optional, required only for evaluation; the
                         reference pose must be the identity)
        intrinsics.txt   frame_name fx fy cx cy width height
        depth/<frame>.mfdm
        matches/<query>.txt   u_ref v_ref u_query v_query score

Every frame with a matches file is a query; the single remaining frame in
intrinsics.txt is the reference.  Depth maps use a minimal binary format:
magic 'MFDM', little-endian u32 width and height, then width*height
little-endian float32 values, row-major, in meters (non-positive or
non-finite values mark invalid pixels).

Loaders reject malformed data instead of repairing it; errors carry the
file and line.  The pose file direction (x = R y + t) is stated here
because public pose formats disagree on it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError, InvalidParameterError
from .geometry import (
    CameraIntrinsics,
    Pose,
    backproject,
    project,
    quaternion_from_rotation,
    rotation_from_axis_angle,
    rotation_from_quaternion,
)
from .pipelines import CorrespondenceSet, DepthMap, pixel_index

DEPTH_MAGIC = b"MFDM"
_QUATERNION_NORM_TOL = 1e-3
_IDENTITY_POSE_TOL = 1e-6


# --------------------------------------------------------------------------
# Text formats
# --------------------------------------------------------------------------


def _parse_lines(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield number, line.split()


def load_poses(path) -> dict[str, Pose]:
    """Parse `frame qw qx qy qz tx ty tz` lines into world-to-camera poses."""
    path = Path(path)
    poses: dict[str, Pose] = {}
    for number, fields in _parse_lines(path):
        if len(fields) != 8:
            raise FormatError(path, f"expected 8 fields, got {len(fields)}", number)
        name = fields[0]
        if name in poses:
            raise FormatError(path, f"duplicate frame {name!r}", number)
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise FormatError(path, f"non-numeric field: {exc}", number) from exc
        q = np.array(values[:4])
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > _QUATERNION_NORM_TOL:
            raise FormatError(path, f"quaternion norm {norm:.6g} is not within {_QUATERNION_NORM_TOL} of 1", number)
        poses[name] = Pose(rotation_from_quaternion(q), np.array(values[4:]))
    return poses


def _canonical_quaternion(rotation: np.ndarray) -> np.ndarray:
    """Quaternion that is bit-stable under a parse -> matrix -> format cycle.

    Iterating quaternion_from_rotation(rotation_from_quaternion(q)) settles on
    a fixed point within a few rounds; writing that fixed point makes pose
    files byte-identical across write -> read -> write.
    """
    q = quaternion_from_rotation(rotation)
    seen = []
    for _ in range(8):
        key = q.tobytes()
        if seen and key == seen[-1]:
            return q
        if key in seen:
            break  # tiny cycle: fall through to a deterministic pick
        seen.append(key)
        q = quaternion_from_rotation(rotation_from_quaternion(q))
    return np.frombuffer(min(seen), dtype=np.float64)


def save_poses(path, poses: dict[str, Pose]) -> None:
    lines = []
    for name in sorted(poses):
        pose = poses[name]
        values = [*_canonical_quaternion(pose.rotation), *pose.translation]
        lines.append(name + " " + " ".join(repr(float(v)) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


def load_intrinsics(path) -> dict[str, CameraIntrinsics]:
    """Parse `frame fx fy cx cy width height` lines."""
    path = Path(path)
    intrinsics: dict[str, CameraIntrinsics] = {}
    for number, fields in _parse_lines(path):
        if len(fields) != 7:
            raise FormatError(path, f"expected 7 fields, got {len(fields)}", number)
        name = fields[0]
        if name in intrinsics:
            raise FormatError(path, f"duplicate frame {name!r}", number)
        try:
            fx, fy, cx, cy = (float(v) for v in fields[1:5])
            width, height = int(fields[5]), int(fields[6])
        except ValueError as exc:
            raise FormatError(path, f"non-numeric field: {exc}", number) from exc
        try:
            intrinsics[name] = CameraIntrinsics(fx, fy, cx, cy, width, height)
        except InvalidParameterError as exc:
            raise FormatError(path, str(exc), number) from exc
    return intrinsics


def save_intrinsics(path, intrinsics: dict[str, CameraIntrinsics]) -> None:
    lines = [
        f"{name} {float(k.fx)!r} {float(k.fy)!r} {float(k.cx)!r} {float(k.cy)!r} {k.width} {k.height}"
        for name, k in sorted(intrinsics.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences(path, k_ref: CameraIntrinsics, k_query: CameraIntrinsics) -> CorrespondenceSet:
    """Parse `u_ref v_ref u_query v_query score` lines; empty file = empty set."""
    path = Path(path)
    rows = []
    for number, fields in _parse_lines(path):
        if len(fields) != 5:
            raise FormatError(path, f"expected 5 fields, got {len(fields)}", number)
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise FormatError(path, f"non-numeric field: {exc}", number) from exc
        if not all(np.isfinite(values)):
            raise FormatError(path, "non-finite value", number)
        for k, (u, v), side in ((k_ref, values[0:2], "reference"), (k_query, values[2:4], "query")):
            if not (0 <= u < k.width and 0 <= v < k.height):
                raise FormatError(
                    path, f"{side} pixel ({u:g}, {v:g}) outside {k.width}x{k.height} image", number
                )
        rows.append(values)
    if not rows:
        return CorrespondenceSet.empty()
    arr = np.array(rows)
    return CorrespondenceSet(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


def save_correspondences(path, c: CorrespondenceSet) -> None:
    lines = [
        " ".join(
            repr(float(v))
            for v in (c.ref_px[i, 0], c.ref_px[i, 1], c.query_px[i, 0], c.query_px[i, 1], c.scores[i])
        )
        for i in range(len(c))
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# --------------------------------------------------------------------------
# Depth map binary format
# --------------------------------------------------------------------------


def load_depth_map(path) -> DepthMap:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc}") from exc
    if len(blob) < 12:
        raise FormatError(path, f"truncated header: {len(blob)} bytes, need 12")
    magic, width, height = struct.unpack("<4sII", blob[:12])
    if magic != DEPTH_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}")
    expected = 12 + 4 * width * height
    if len(blob) != expected:
        raise FormatError(path, f"payload is {len(blob)} bytes, expected {expected} for {width}x{height}")
    values = np.frombuffer(blob, dtype="<f4", count=width * height, offset=12)
    return DepthMap(values.astype(np.float64).reshape(height, width))


def save_depth_map(path, depth: DepthMap) -> None:
    header = struct.pack("<4sII", DEPTH_MAGIC, depth.width, depth.height)
    payload = np.ascontiguousarray(depth.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


# --------------------------------------------------------------------------
# Scene loading
# --------------------------------------------------------------------------


@dataclass
class SceneManifest:
    """One scene: a reference frame plus query frames, with parsed metadata."""

    scene_id: str
    root: Path
    reference: str
    queries: list[str]
    intrinsics: dict[str, CameraIntrinsics]
    poses: dict[str, Pose] | None  # None for estimate-only scenes

    @property
    def has_ground_truth(self) -> bool:
        return self.poses is not None

    def depth_path(self, frame: str) -> Path:
        return self.root / "depth" / f"{frame}.mfdm"

    def matches_path(self, query: str) -> Path:
        return self.root / "matches" / f"{query}.txt"

    def load_depth(self, frame: str) -> DepthMap:
        depth = load_depth_map(self.depth_path(frame))
        k = self.intrinsics[frame]
        if (depth.width, depth.height) != (k.width, k.height):
            raise FormatError(
                self.depth_path(frame),
                f"depth is {depth.width}x{depth.height} but intrinsics say {k.width}x{k.height}",
            )
        return depth

    def load_matches(self, query: str) -> CorrespondenceSet:
        return load_correspondences(
            self.matches_path(query), self.intrinsics[self.reference], self.intrinsics[query]
        )


def list_scenes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(root, "dataset root is not a directory")
    return sorted(p.name for p in root.iterdir() if (p / "intrinsics.txt").is_file())


def load_scene(root, scene_id: str) -> SceneManifest:
    """Load and cross-validate one scene directory.

    The reference frame is the unique frame in intrinsics.txt without a
    matches file.  When poses.txt is present it must cover every frame and
    the reference pose must be the identity.
    """
    scene_root = Path(root) / scene_id
    intrinsics_path = scene_root / "intrinsics.txt"
    if not intrinsics_path.is_file():
        raise FormatError(intrinsics_path, "missing intrinsics file")
    intrinsics = load_intrinsics(intrinsics_path)

    matches_dir = scene_root / "matches"
    queries = sorted(p.stem for p in matches_dir.glob("*.txt")) if matches_dir.is_dir() else []
    if not queries:
        raise FormatError(matches_dir, "scene has no matches files")
    unknown = [q for q in queries if q not in intrinsics]
    if unknown:
        raise FormatError(intrinsics_path, f"queries missing intrinsics: {', '.join(unknown)}")
    non_query = sorted(set(intrinsics) - set(queries))
    if len(non_query) != 1:
        raise FormatError(
            intrinsics_path,
            f"expected exactly one non-query (reference) frame, found {len(non_query)}: {', '.join(non_query)}",
        )
    reference = non_query[0]

    poses = None
    poses_path = scene_root / "poses.txt"
    if poses_path.is_file():
        poses = load_poses(poses_path)
        missing = [f for f in [reference, *queries] if f not in poses]
        if missing:
            raise FormatError(poses_path, f"frames missing poses: {', '.join(missing)}")
        ref_pose = poses[reference]
        defect = max(
            float(np.abs(ref_pose.rotation - np.eye(3)).max()),
            float(np.abs(ref_pose.translation).max()),
        )
        if defect > _IDENTITY_POSE_TOL:
            raise FormatError(poses_path, f"reference pose deviates from identity by {defect:.3g}")

    return SceneManifest(scene_id, scene_root, reference, queries, intrinsics, poses)


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Controls for the ground-truth scene generator (the test oracle)."""

    num_points: int = 300
    num_queries: int = 1
    depth_range_m: tuple[float, float] = (3.0, 8.0)
    baseline_range_m: tuple[float, float] = (0.3, 1.2)
    rotation_perturb_deg: float = 5.0
    pixel_noise_px: float = 0.0
    outlier_fraction: float = 0.0
    depth_noise_sigma: float = 0.0
    depth_bias: float = 0.0
    rng_seed: int = 0
    focal_px: float = 500.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.num_points < 8 or self.num_queries < 1:
            raise InvalidParameterError("need at least 8 points and 1 query")
        if not (0 < self.depth_range_m[0] <= self.depth_range_m[1]):
            raise InvalidParameterError("depth range must be positive and ordered")
        if not (0 < self.baseline_range_m[0] <= self.baseline_range_m[1]):
            raise InvalidParameterError("baseline range must be positive and ordered")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise InvalidParameterError("outlier fraction must be in [0, 1)")
        if self.pixel_noise_px < 0 or self.depth_noise_sigma < 0:
            raise InvalidParameterError("noise levels must be non-negative")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal_px, self.focal_px, self.width / 2.0, self.height / 2.0, self.width, self.height
        )


@dataclass
class SyntheticQuery:
    name: str
    pose: Pose  # ground-truth world(=reference)-to-query
    correspondences: CorrespondenceSet
    inlier_mask: np.ndarray  # True where the match is a genuine correspondence
    depth_query: DepthMap


@dataclass
class SyntheticScene:
    """In-memory scene: exact ground truth for every estimator input."""

    config: SyntheticSceneConfig
    intrinsics: CameraIntrinsics
    points_world: np.ndarray
    depth_ref: DepthMap
    queries: list[SyntheticQuery] = field(default_factory=list)


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at `center` looking at `target`."""
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, -1.0, 0.0])  # negative image-v axis
    if abs(forward @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.vstack([right, down, forward])


def synth_scene(config: SyntheticSceneConfig) -> SyntheticScene:
    """Sample a scene whose estimator inputs have exact, known ground truth.

    Depth maps carry a valid value exactly at each kept correspondence's
    nearest pixel (the value is the true camera-frame depth of that match's
    3D point, optionally corrupted by the configured depth noise/bias);
    correspondences whose nearest pixel would collide with a different
    point's are dropped so every kept match reads back its own depth.
    Injected outliers keep their reference pixel but get a uniform random
    query pixel and no query-side depth entry.
    """
    rng = np.random.default_rng(config.rng_seed)
    k = config.intrinsics()
    margin = 12.0

    ref_px = np.column_stack(
        [
            rng.uniform(margin, config.width - margin, config.num_points),
            rng.uniform(margin, config.height - margin, config.num_points),
        ]
    )
    depths = rng.uniform(*config.depth_range_m, config.num_points)
    points = backproject(k, ref_px, depths)  # reference frame == world frame
    centroid = points.mean(axis=0)

    def depth_value(true_depth: float) -> float:
        noisy = true_depth * (1.0 + config.depth_bias)
        if config.depth_noise_sigma > 0:
            noisy *= 1.0 + config.depth_noise_sigma * rng.standard_normal()
        return max(noisy, 0.0)  # a clipped sample becomes an invalid pixel

    ref_depth_values = np.zeros((config.height, config.width))
    ref_claims: dict[tuple[int, int], int] = {}
    scene = SyntheticScene(config, k, points, DepthMap(ref_depth_values))

    for query_index in range(config.num_queries):
        pose = None
        visible = None
        for _ in range(64):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            center = direction * rng.uniform(*config.baseline_range_m)
            rotation = _look_at(center, centroid)
            if config.rotation_perturb_deg > 0:
                axis = rng.standard_normal(3)
                axis /= np.linalg.norm(axis)
                angle = np.radians(rng.uniform(0, config.rotation_perturb_deg))
                rotation = rotation_from_axis_angle(axis * angle) @ rotation
            candidate = Pose(rotation, -(rotation @ center))
            cam = candidate.transform(points)
            in_front = cam[:, 2] > 0.2
            px = np.full((config.num_points, 2), -1.0)
            if np.any(in_front):
                px[in_front] = project(k, cam[in_front])
            in_frame = (
                in_front
                & (px[:, 0] >= margin)
                & (px[:, 0] < config.width - margin)
                & (px[:, 1] >= margin)
                & (px[:, 1] < config.height - margin)
            )
            if int(in_frame.sum()) >= max(12, config.num_points // 4):
                pose = candidate
                visible = in_frame
                query_px_true = px
                cam_points = cam
                break
        if pose is None:
            raise GenerationError("no query pose kept enough points in both frusta")

        indices = np.flatnonzero(visible)
        n = len(indices)
        noisy_ref = ref_px[indices] + (
            rng.normal(0.0, config.pixel_noise_px, (n, 2)) if config.pixel_noise_px > 0 else 0.0
        )
        noisy_query = query_px_true[indices] + (
            rng.normal(0.0, config.pixel_noise_px, (n, 2)) if config.pixel_noise_px > 0 else 0.0
        )
        outliers = rng.random(n) < config.outlier_fraction
        noisy_query[outliers] = np.column_stack(
            [
                rng.uniform(0, config.width - 1.0, int(outliers.sum())),
                rng.uniform(0, config.height - 1.0, int(outliers.sum())),
            ]
        )
        scores = rng.uniform(0.2, 1.0, n)

        in_bounds = k.contains(noisy_ref) & k.contains(noisy_query)
        query_depth_values = np.zeros((config.height, config.width))
        query_claims: dict[tuple[int, int], int] = {}
        keep_rows = []
        for row in np.flatnonzero(in_bounds):
            point_id = int(indices[row])
            ru, rv = pixel_index(noisy_ref[row])
            ref_key = (int(ru), int(rv))
            if ref_claims.get(ref_key, point_id) != point_id:
                continue  # another point already owns this reference depth pixel
            if not outliers[row]:
                qu, qv = pixel_index(noisy_query[row])
                query_key = (int(qu), int(qv))
                if query_claims.get(query_key, point_id) != point_id:
                    continue
                query_claims[query_key] = point_id
                if query_depth_values[qv, qu] == 0.0:
                    query_depth_values[qv, qu] = depth_value(float(cam_points[point_id, 2]))
            ref_claims[ref_key] = point_id
            if ref_depth_values[rv, ru] == 0.0:
                ref_depth_values[rv, ru] = depth_value(float(points[point_id, 2]))
            keep_rows.append(row)

        keep = np.array(keep_rows, dtype=int)
        correspondences = CorrespondenceSet(noisy_ref[keep], noisy_query[keep], scores[keep])
        scene.queries.append(
            SyntheticQuery(
                name=f"query{query_index:04d}",
                pose=pose,
                correspondences=correspondences,
                inlier_mask=~outliers[keep],
                depth_query=DepthMap(query_depth_values),
            )
        )

    # reference depth entries accumulate across queries; rebuild the frozen map
    scene.depth_ref = DepthMap(ref_depth_values)
    return scene


def synth_write(scene: SyntheticScene, root, scene_id: str) -> None:
    """Write an in-memory synthetic scene in the standard layout."""
    scene_root = Path(root) / scene_id
    (scene_root / "depth").mkdir(parents=True, exist_ok=True)
    (scene_root / "matches").mkdir(parents=True, exist_ok=True)

    reference = "reference"
    intrinsics = {reference: scene.intrinsics}
    poses = {reference: Pose.identity()}
    save_depth_map(scene_root / "depth" / f"{reference}.mfdm", scene.depth_ref)
    for query in scene.queries:
        intrinsics[query.name] = scene.intrinsics
        poses[query.name] = query.pose
        save_depth_map(scene_root / "depth" / f"{query.name}.mfdm", query.depth_query)
        save_correspondences(scene_root / "matches" / f"{query.name}.txt", query.correspondences)
    save_intrinsics(scene_root / "intrinsics.txt", intrinsics)
    save_poses(scene_root / "poses.txt", poses)


def synth_generate(config: SyntheticSceneConfig, root, scene_id: str) -> SceneManifest:
    """Generate a synthetic scene on disk and return its loaded manifest."""
    synth_write(synth_scene(config), root, scene_id)
    return load_scene(root, scene_id)
