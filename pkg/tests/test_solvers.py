import numpy as np
import pytest

from mfpose.errors import CheiralityError, DegenerateSampleError, InvalidParameterError
from mfpose.geometry import CameraIntrinsics, Pose, rotation_error_deg, rot_y, rot_z
from mfpose.robust import sampson_error
from mfpose.solvers import (
    decompose_essential,
    essential_eight_point,
    essential_five_point,
    essential_from_pose,
    essential_matrix_defect,
    essential_pose_candidates,
    pnp_p3p,
    procrustes_align,
    refine_pnp,
    triangulate_midpoint,
)

from conftest import random_pose, random_rotation, small_angle_deg

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def make_two_view(rng, n=20, max_angle=30.0, translation=None, depth=(3.0, 8.0)):
    """Synthetic calibrated pair: true (R, t) and exact normalized matches."""
    rotation = random_rotation(rng, max_angle)
    if translation is None:
        translation = rng.standard_normal(3)
        translation /= np.linalg.norm(translation)
    translation = np.asarray(translation, dtype=float)
    points = np.column_stack(
        [rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, n), rng.uniform(*depth, n)]
    )
    in_query = points @ rotation.T + translation
    keep = in_query[:, 2] > 0.1
    points, in_query = points[keep], in_query[keep]
    matches = np.column_stack(
        [
            points[:, 0] / points[:, 2],
            points[:, 1] / points[:, 2],
            in_query[:, 0] / in_query[:, 2],
            in_query[:, 1] / in_query[:, 2],
        ]
    )
    return rotation, translation, points, matches


# ---------------------------------------------------------------------------
# five-point solver
# ---------------------------------------------------------------------------


def test_five_point_recovers_synthetic_pose(rng):
    for _ in range(20):
        rotation, translation, _, matches = make_two_view(rng)
        if len(matches) < 5:
            continue
        solutions = essential_five_point(matches[:5])
        assert solutions, "no solution on a clean sample"
        truth = essential_from_pose(rotation, translation)
        residuals = [sampson_error(e, matches[:5]).max() for e in solutions]
        assert min(residuals) < 1e-10
        gap = min(min(np.abs(e - truth).max(), np.abs(e + truth).max()) for e in solutions)
        assert gap < 1e-6


def test_five_point_solutions_satisfy_invariants(rng):
    rotation, translation, _, matches = make_two_view(rng)
    for e in essential_five_point(matches[:5]):
        s = np.linalg.svd(e, compute_uv=False)
        assert s[2] < 1e-6 * s[0]
        assert (s[0] - s[1]) / s[0] < 1e-6
        assert essential_matrix_defect(e) < 1e-6
        # epipolar constraint on the sample
        q_ref = np.column_stack([matches[:5, :2], np.ones(5)])
        q_query = np.column_stack([matches[:5, 2:], np.ones(5)])
        assert np.abs(np.einsum("ni,ij,nj->n", q_query, e, q_ref)).max() < 1e-8


def test_five_point_repeated_match(rng):
    _, _, _, matches = make_two_view(rng)
    sample = matches[:5].copy()
    sample[4] = sample[0]
    solutions = essential_five_point(sample)
    # degenerate sample: either nothing, or matrices still on the constraint
    for e in solutions:
        q_ref = np.column_stack([sample[:, :2], np.ones(5)])
        q_query = np.column_stack([sample[:, 2:], np.ones(5)])
        assert np.abs(np.einsum("ni,ij,nj->n", q_query, e, q_ref)).max() < 1e-8


def test_five_point_pure_rotation_sample(rng):
    # t = 0: epipolar geometry is undefined, but the solver may still return
    # interpolating matrices; degeneracy is flagged downstream (cheirality).
    rotation = random_rotation(rng, 20.0)
    points = np.column_stack([rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 5), rng.uniform(3, 8, 5)])
    in_query = points @ rotation.T
    matches = np.column_stack(
        [points[:, :2] / points[:, 2:3], in_query[:, :2] / in_query[:, 2:3]]
    )
    solutions = essential_five_point(matches)
    for e in solutions:
        q_ref = np.column_stack([matches[:, :2], np.ones(5)])
        q_query = np.column_stack([matches[:, 2:], np.ones(5)])
        assert np.abs(np.einsum("ni,ij,nj->n", q_query, e, q_ref)).max() < 1e-8


def test_five_point_input_shape():
    with pytest.raises(InvalidParameterError):
        essential_five_point(np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# eight-point solver
# ---------------------------------------------------------------------------


def test_eight_point_noiseless(rng):
    for _ in range(10):
        rotation, translation, _, matches = make_two_view(rng, n=25)
        e = essential_eight_point(matches)
        assert sampson_error(e, matches).max() < 1e-9
        assert essential_matrix_defect(e) < 1e-6
        truth = essential_from_pose(rotation, translation)
        assert min(np.abs(e - truth).max(), np.abs(e + truth).max()) < 1e-7


def test_eight_point_coplanar_scene_flagged(rng):
    # points on a plane make the linear system rank deficient
    rotation = random_rotation(rng, 20.0)
    translation = np.array([0.5, 0.1, 0.05])
    uv = rng.uniform(-1.0, 1.0, (30, 2))
    points = np.column_stack([uv[:, 0], uv[:, 1], 5.0 + 0.3 * uv[:, 0] + 0.2 * uv[:, 1]])
    in_query = points @ rotation.T + translation
    matches = np.column_stack(
        [points[:, :2] / points[:, 2:3], in_query[:, :2] / in_query[:, 2:3]]
    )
    with pytest.raises(DegenerateSampleError):
        essential_eight_point(matches)


def test_eight_point_noise_rms(rng):
    # Monte-Carlo: query-side observation noise of 1 px at f=500; the Sampson
    # RMS of the fit must stay below 2 sigma / f in aggregate.
    sigma = 1.0 / 500.0
    rms_values = []
    for _ in range(40):
        _, _, _, matches = make_two_view(rng, n=100, max_angle=20.0)
        noisy = matches.copy()
        noisy[:, 2:] += rng.normal(0.0, sigma, (len(matches), 2))
        e = essential_eight_point(noisy)
        r = sampson_error(e, noisy)
        rms_values.append(np.sqrt(np.mean(r**2)))
    assert np.mean(rms_values) < 2.0 * sigma
    assert np.median(rms_values) < 1.5 * sigma


def test_eight_point_input_validation():
    with pytest.raises(InvalidParameterError):
        essential_eight_point(np.zeros((7, 4)))


# ---------------------------------------------------------------------------
# decomposition + cheirality
# ---------------------------------------------------------------------------


def test_decompose_recovers_exact_pose(rng):
    for _ in range(50):
        rotation, translation, _, matches = make_two_view(rng, n=12)
        if len(matches) < 10:
            continue
        e = essential_from_pose(rotation, translation)
        r, t = decompose_essential(e, matches)
        # small_angle_deg: the arccos-of-trace formula cannot resolve 1e-6 deg
        assert small_angle_deg(r, rotation) < 1e-6
        assert np.degrees(np.arcsin(np.clip(np.linalg.norm(np.cross(t, translation)), 0, 1))) < 1e-6
        assert t @ translation > 0


def test_decompose_unique_candidate_on_generic_scenes(rng):
    # count candidates with full in-front support: generic scenes give exactly one
    rotation, translation, _, matches = make_two_view(rng, n=15)
    e = essential_from_pose(rotation, translation)
    candidates = essential_pose_candidates(e)
    assert len(candidates) <= 4
    for cand_r, cand_t in candidates:
        assert abs(np.linalg.norm(cand_t) - 1.0) < 1e-9
        assert abs(np.linalg.det(cand_r) - 1.0) < 1e-9
    full_support = 0
    for cand_r, cand_t in candidates:
        front = 0
        for match in matches:
            point, ok = triangulate_midpoint(cand_r, cand_t, match)
            z_query = (cand_r @ point + cand_t)[2]
            if ok and point[2] > 0 and z_query > 0:
                front += 1
        if front == len(matches):
            full_support += 1
    assert full_support == 1


def test_decompose_single_match(rng):
    rotation, translation, _, matches = make_two_view(rng, n=6)
    e = essential_from_pose(rotation, translation)
    r, t = decompose_essential(e, matches[:1])
    point, ok = triangulate_midpoint(r, t, matches[0])
    assert ok
    assert point[2] > 0 and (r @ point + t)[2] > 0


def test_decompose_cheirality_failure():
    # a single match pointing away from every candidate camera is impossible,
    # so force failure with a zero-baseline (ill-conditioned) configuration
    e = essential_from_pose(np.eye(3), [1.0, 0.0, 0.0])
    pure_rotation_match = np.array([[0.3, 0.2, 0.3, 0.2]])  # identical rays
    with pytest.raises(CheiralityError):
        decompose_essential(e, pure_rotation_match)


# ---------------------------------------------------------------------------
# midpoint triangulation
# ---------------------------------------------------------------------------


def test_triangulate_rays_crossing_at_point():
    rotation = rot_y(10.0)
    translation = np.array([1.0, 0.0, 0.0])
    target = np.array([0.0, 0.0, 5.0])
    in_query = rotation @ target + translation
    match = [0.0, 0.0, in_query[0] / in_query[2], in_query[1] / in_query[2]]
    point, ok = triangulate_midpoint(rotation, translation, match)
    assert ok
    assert np.allclose(point, target, atol=1e-9)


def test_triangulate_zero_baseline_flagged():
    point, ok = triangulate_midpoint(rot_y(5.0), np.zeros(3), [0.1, 0.2, 0.1, 0.2])
    assert not ok
    assert np.all(np.isfinite(point))


def test_triangulate_symmetric_geometry_equidistant():
    # symmetric configuration: midpoint is equidistant from both rays
    rotation = np.eye(3)
    translation = np.array([-1.0, 0.0, 0.0])  # query center at +x
    match = [0.1, 0.0, -0.1, 0.0]
    point, ok = triangulate_midpoint(rotation, translation, match)
    assert ok

    def dist_to_ray(p, origin, direction):
        direction = direction / np.linalg.norm(direction)
        v = p - origin
        return np.linalg.norm(v - (v @ direction) * direction)

    d_ref = dist_to_ray(point, np.zeros(3), np.array([0.1, 0.0, 1.0]))
    d_query = dist_to_ray(point, np.array([1.0, 0.0, 0.0]), np.array([-0.1, 0.0, 1.0]))
    assert abs(d_ref - d_query) < 1e-12


# ---------------------------------------------------------------------------
# P3P
# ---------------------------------------------------------------------------


def test_p3p_synthetic_pose_among_solutions(rng):
    for _ in range(30):
        pose = random_pose(rng, max_angle_deg=40.0)
        cam_points = np.column_stack(
            [rng.uniform(-2, 2, 3), rng.uniform(-1.5, 1.5, 3), rng.uniform(3, 9, 3)]
        )
        world = (cam_points - pose.translation) @ pose.rotation
        rays = cam_points[:, :2] / cam_points[:, 2:3]
        solutions = pnp_p3p(world, rays)
        assert solutions
        best_rot = min(small_angle_deg(s.rotation, pose.rotation) for s in solutions)
        best_t = min(np.linalg.norm(s.translation - pose.translation) for s in solutions)
        assert best_rot < 1e-6
        assert best_t < 1e-8


def test_p3p_identity_case(rng):
    points = np.array([[0.5, 0.1, 4.0], [-0.4, 0.3, 5.0], [0.1, -0.5, 6.0]])
    rays = points[:, :2] / points[:, 2:3]
    solutions = pnp_p3p(points, rays)
    best = min(
        rotation_error_deg(s.rotation, np.eye(3)) + np.linalg.norm(s.translation)
        for s in solutions
    )
    assert best < 1e-6


def test_p3p_reprojects_sample_exactly(rng):
    pose = random_pose(rng, max_angle_deg=30.0)
    cam_points = np.column_stack(
        [rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3), rng.uniform(3, 7, 3)]
    )
    world = (cam_points - pose.translation) @ pose.rotation
    rays = cam_points[:, :2] / cam_points[:, 2:3]
    for solution in pnp_p3p(world, rays):
        projected = solution.transform(world)
        assert np.all(projected[:, 2] > 0)
        assert np.abs(projected[:, :2] / projected[:, 2:3] - rays).max() < 1e-6


def test_p3p_collinear_points_rejected():
    points = np.array([[0.0, 0.0, 5.0], [0.5, 0.5, 5.0], [1.0, 1.0, 5.0]])
    with pytest.raises(DegenerateSampleError):
        pnp_p3p(points, points[:, :2] / points[:, 2:3])


def test_p3p_fourth_point_disambiguates(rng):
    # robust-loop style selection: the true pose wins on a 4th observation
    pose = random_pose(rng, max_angle_deg=30.0)
    cam_points = np.column_stack(
        [rng.uniform(-2, 2, 4), rng.uniform(-1.5, 1.5, 4), rng.uniform(3, 9, 4)]
    )
    world = (cam_points - pose.translation) @ pose.rotation
    rays = cam_points[:, :2] / cam_points[:, 2:3]
    solutions = pnp_p3p(world[:3], rays[:3])
    assert solutions

    def fourth_point_error(candidate):
        p = candidate.transform(world[3])
        if p[2] <= 0:
            return np.inf
        return np.linalg.norm(p[:2] / p[2] - rays[3])

    winner = min(solutions, key=fourth_point_error)
    assert small_angle_deg(winner.rotation, pose.rotation) < 1e-6
    assert np.linalg.norm(winner.translation - pose.translation) < 1e-8


# ---------------------------------------------------------------------------
# PnP refinement
# ---------------------------------------------------------------------------


def _pnp_scene(rng, n=30):
    pose = random_pose(rng, max_angle_deg=25.0, translation_scale=0.5)
    cam_points = np.column_stack(
        [rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 9, n)]
    )
    world = (cam_points - pose.translation) @ pose.rotation
    pixels = np.column_stack(
        [
            K.fx * cam_points[:, 0] / cam_points[:, 2] + K.cx,
            K.fy * cam_points[:, 1] / cam_points[:, 2] + K.cy,
        ]
    )
    return pose, world, pixels


def test_refine_at_optimum_is_noop(rng):
    pose, world, pixels = _pnp_scene(rng)
    result = refine_pnp(pose, world, pixels, K)
    assert not result.diverged
    assert np.abs(result.pose.rotation - pose.rotation).max() < 1e-9
    assert np.abs(result.pose.translation - pose.translation).max() < 1e-9


def test_refine_recovers_from_perturbation(rng):
    for _ in range(10):
        pose, world, pixels = _pnp_scene(rng)
        start = Pose(rot_z(1.0) @ pose.rotation, pose.translation + [0.05, 0.0, 0.0])
        result = refine_pnp(start, world, pixels, K)
        assert result.final_cost <= result.initial_cost
        assert small_angle_deg(result.pose.rotation, pose.rotation) < 1e-6
        assert np.linalg.norm(result.pose.translation - pose.translation) < 1e-6


def test_refine_never_increases_cost_on_noise(rng):
    pose, world, pixels = _pnp_scene(rng)
    noisy = pixels + rng.normal(0.0, 2.0, pixels.shape)
    start = Pose(rot_y(0.5) @ pose.rotation, pose.translation + [0.02, -0.01, 0.03])
    result = refine_pnp(start, world, noisy, K)
    assert result.final_cost <= result.initial_cost


def test_refine_needs_four_points(rng):
    pose, world, pixels = _pnp_scene(rng, n=3)
    with pytest.raises(InvalidParameterError):
        refine_pnp(pose, world, pixels, K)


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------


def test_procrustes_identity():
    points = np.random.default_rng(3).normal(size=(12, 3))
    pose = procrustes_align(points, points)
    assert np.allclose(pose.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(pose.translation, 0.0, atol=1e-12)


def test_procrustes_recovers_known_transform(rng):
    for _ in range(20):
        truth = random_pose(rng)
        points = rng.normal(size=(15, 3))
        moved = truth.transform(points)
        pose = procrustes_align(points, moved)
        assert np.abs(pose.rotation - truth.rotation).max() < 1e-9
        assert np.abs(pose.translation - truth.translation).max() < 1e-9


def test_procrustes_near_reflection_stays_proper(rng):
    # nearly planar sets with a flipped pairing push det(V U^T) negative
    points = rng.normal(size=(10, 3))
    points[:, 2] *= 1e-9
    mirrored = points.copy()
    mirrored[:, 0] = -mirrored[:, 0]
    pose = procrustes_align(points, mirrored)
    assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9


def test_procrustes_equivariance(rng):
    # conjugating both point sets by a rigid transform conjugates the output
    truth = random_pose(rng)
    points = rng.normal(size=(12, 3))
    moved = truth.transform(points)
    g = random_pose(rng)
    pose_direct = procrustes_align(points, moved)
    pose_conj = procrustes_align(g.transform(points), g.transform(moved))
    # conjugated alignment = g . pose . g^-1
    expected_rot = g.rotation @ pose_direct.rotation @ g.rotation.T
    expected_t = (
        g.rotation @ pose_direct.translation
        + g.translation
        - expected_rot @ g.translation
    )
    assert np.abs(pose_conj.rotation - expected_rot).max() < 1e-9
    assert np.abs(pose_conj.translation - expected_t).max() < 1e-9


def test_procrustes_degenerate_inputs():
    line = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
    with pytest.raises(DegenerateSampleError):
        procrustes_align(line, line + 1.0)
    coincident = np.ones((4, 3))
    with pytest.raises(DegenerateSampleError):
        procrustes_align(coincident, coincident)
    with pytest.raises(InvalidParameterError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))
