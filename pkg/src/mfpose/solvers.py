"""Minimal and refinement solvers for two-view and 2D/3D pose estimation.

All image measurements here are in normalized camera coordinates (pixel
minus principal point over focal) unless a function explicitly takes
intrinsics.  2D-2D matches are packed as (n, 4) arrays
[x_ref, y_ref, x_query, y_query]; the essential matrix satisfies
q_query^T E q_ref = 0 on homogeneous rays (x, y, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityError,
    DegenerateSampleError,
    InvalidParameterError,
)
from .geometry import CameraIntrinsics, Pose, rotation_from_axis_angle, skew

# --------------------------------------------------------------------------
# Essential matrix
# --------------------------------------------------------------------------

# Monomial bookkeeping for the five-point polynomial system.  Degree <= 3
# monomials in (x, y, z) ordered so that the ten leading ones (up to xy)
# come first; the ten trailing columns factor as x*(z^2,z,1), y*(z^2,z,1),
# (z^3,z^2,z,1), which is what the z-polynomial elimination below relies on.
_MONOMIALS = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1),
    (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1),
    (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]
_MON_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}
# Exponents contributed by each of the four linear-combination variables
# (x, y, z, and the constant term).
_VAR_EXP = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0))


def _monomial_table() -> np.ndarray:
    table = np.empty((4, 4, 4), dtype=np.intp)
    for a in range(4):
        for b in range(4):
            for c in range(4):
                exp = tuple(
                    _VAR_EXP[a][i] + _VAR_EXP[b][i] + _VAR_EXP[c][i] for i in range(3)
                )
                table[a, b, c] = _MON_INDEX[exp]
    return table


_MON3 = _monomial_table()
_LEVI = np.zeros((3, 3, 3))
for _i, _j, _k, _s in ((0, 1, 2, 1), (1, 2, 0, 1), (2, 0, 1, 1), (0, 2, 1, -1), (2, 1, 0, -1), (1, 0, 2, -1)):
    _LEVI[_i, _j, _k] = _s


def _hom(xy: np.ndarray) -> np.ndarray:
    return np.column_stack([xy, np.ones(len(xy))])


def _constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """10x20 coefficient matrix of det(E) = 0 and 2*E*E^T*E - tr(E*E^T)*E = 0.

    basis is the (4, 3, 3) stack of null-space matrices; E = x*B0 + y*B1 +
    z*B2 + B3.  Rows are polynomials over the _MONOMIALS columns.
    """
    coef = np.zeros((10, 20))
    det = np.einsum("ijk,ai,bj,ck->abc", _LEVI, basis[:, 0, :], basis[:, 1, :], basis[:, 2, :])
    np.add.at(coef[0], _MON3.ravel(), det.ravel())
    eet_e = np.einsum("aip,bqp,cqj->abcij", basis, basis, basis)
    tr_e = np.einsum("apq,bpq,cij->abcij", basis, basis, basis)
    cubic = 2.0 * eet_e - tr_e
    flat = _MON3.ravel()
    row = 1
    for i in range(3):
        for j in range(3):
            np.add.at(coef[row], flat, cubic[:, :, :, i, j].ravel())
            row += 1
    return coef


def _z_rows(row_i: np.ndarray, row_j: np.ndarray):
    """Combine reduced rows i - z*j into three z-polynomials (x, y, 1 parts).

    Rows hold coefficients over the trailing 10 columns grouped as
    x*(z^2, z, 1) | y*(z^2, z, 1) | (z^3, z^2, z, 1); the leading monomials
    of the two rows cancel by construction.  Coefficient arrays are
    highest-degree first (numpy poly convention).
    """
    px = np.concatenate([[0.0], row_i[0:3]]) - np.concatenate([row_j[0:3], [0.0]])
    py = np.concatenate([[0.0], row_i[3:6]]) - np.concatenate([row_j[3:6], [0.0]])
    p1 = np.concatenate([[0.0], row_i[6:10]]) - np.concatenate([row_j[6:10], [0.0]])
    return px, py, p1


def _horner(coeffs, x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def essential_matrix_defect(e: np.ndarray) -> float:
    """Deviation from the essential manifold: rank-2 and equal singular values."""
    s = np.linalg.svd(np.asarray(e, dtype=float), compute_uv=False)
    if s[0] == 0:
        return 1.0
    return max(float(s[2] / s[0]), float((s[0] - s[1]) / s[0]))


def _project_to_essential(e: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(e)
    sigma = 0.5 * (s[0] + s[1])
    e = u @ np.diag([sigma, sigma, 0.0]) @ vt
    return e / np.linalg.norm(e)


def essential_from_pose(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """E = [t]x R for the relative pose mapping reference to query frame."""
    t = np.asarray(translation, dtype=float)
    if np.linalg.norm(t) == 0:
        raise InvalidParameterError("essential matrix undefined for zero translation")
    e = skew(t) @ np.asarray(rotation, dtype=float)
    return e / np.linalg.norm(e)


def _epipolar_residual(e: np.ndarray, matches: np.ndarray) -> float:
    qr = _hom(matches[:, :2])
    qq = _hom(matches[:, 2:])
    return float(np.abs(np.einsum("ni,ij,nj->n", qq, e, qr)).max())


def essential_five_point(matches: np.ndarray) -> list[np.ndarray]:
    """Minimal five-point relative pose solver.

    Returns every real essential matrix consistent with the five normalized
    matches (up to ten).  The constraint system is Gauss-Jordan reduced and
    collapsed to a degree-10 polynomial in z whose roots come from the
    companion-matrix eigenvalues (np.roots); roots with |imag| > 1e-10 are
    discarded.  A numerically degenerate sample yields an empty list.
    """
    matches = np.asarray(matches, dtype=float)
    if matches.shape != (5, 4):
        raise InvalidParameterError(f"five-point solver needs a (5, 4) sample, got {matches.shape}")
    qr = _hom(matches[:, :2])
    qq = _hom(matches[:, 2:])
    design = (qq[:, :, None] * qr[:, None, :]).reshape(5, 9)
    _, _, vt = np.linalg.svd(design)
    basis = vt[-4:].reshape(4, 3, 3)

    coef = _constraint_matrix(basis)
    try:
        reduced = np.linalg.solve(coef[:, :10], coef[:, 10:])
    except np.linalg.LinAlgError:
        return []
    if not np.all(np.isfinite(reduced)):
        return []

    k1, k2, k3 = _z_rows(reduced[4], reduced[5])
    l1, l2, l3 = _z_rows(reduced[6], reduced[7])
    m1, m2, m3 = _z_rows(reduced[8], reduced[9])

    # det of the 3x3 polynomial system; all three cofactor products are degree 10
    poly = (
        np.convolve(k1, np.convolve(l2, m3) - np.convolve(l3, m2))
        + np.convolve(k2, np.convolve(l3, m1) - np.convolve(l1, m3))
        + np.convolve(k3, np.convolve(l1, m2) - np.convolve(l2, m1))
    )
    if not np.any(np.abs(poly) > 0):
        return []
    roots = np.roots(poly)
    deriv = np.polyder(poly)

    solutions: list[np.ndarray] = []
    for root in roots:
        if abs(root.imag) > 1e-10:
            continue
        z = float(root.real)
        for _ in range(2):  # polish: companion-matrix roots are not always at 1e-12
            dz = _horner(deriv, z)
            if abs(dz) < 1e-30:
                break
            z -= _horner(poly, z) / dz
        lhs = np.array(
            [
                [_horner(k1, z), _horner(k2, z)],
                [_horner(l1, z), _horner(l2, z)],
                [_horner(m1, z), _horner(m2, z)],
            ]
        )
        rhs = -np.array([_horner(k3, z), _horner(l3, z), _horner(m3, z)])
        (x, y), *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        e = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        norm = np.linalg.norm(e)
        if norm == 0 or not np.isfinite(norm):
            continue
        e = _project_to_essential(e / norm)
        if _epipolar_residual(e, matches) > 1e-8:
            continue
        if any(abs(float(np.sum(e * prev))) > 1.0 - 1e-9 for prev in solutions):
            continue
        solutions.append(e)
    return solutions


def essential_eight_point(matches: np.ndarray) -> np.ndarray:
    """Linear essential-matrix estimate from >= 8 normalized matches.

    Applies Hartley normalization, minimizes the algebraic residual, and
    projects onto the essential manifold (rank 2, equal singular values).
    Rank-deficient designs (e.g. an all-coplanar scene) raise
    DegenerateSampleError.
    """
    matches = np.asarray(matches, dtype=float)
    if matches.ndim != 2 or matches.shape[1] != 4 or matches.shape[0] < 8:
        raise InvalidParameterError("eight-point solver needs an (n >= 8, 4) array")

    def conditioning(xy: np.ndarray) -> np.ndarray:
        centroid = xy.mean(axis=0)
        rms = np.sqrt(np.mean(np.sum((xy - centroid) ** 2, axis=1)))
        scale = np.sqrt(2.0) / rms if rms > 0 else 1.0
        return np.array(
            [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
        )

    t_ref = conditioning(matches[:, :2])
    t_query = conditioning(matches[:, 2:])
    qr = _hom(matches[:, :2]) @ t_ref.T
    qq = _hom(matches[:, 2:]) @ t_query.T
    design = (qq[:, :, None] * qr[:, None, :]).reshape(len(matches), 9)
    _, s, vt = np.linalg.svd(design)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateSampleError("design matrix is rank deficient (degenerate scene)")
    e = t_query.T @ vt[-1].reshape(3, 3) @ t_ref
    return _project_to_essential(e)


def _midpoints(rotation: np.ndarray, translation: np.ndarray, matches: np.ndarray):
    """Midpoint triangulation of (n, 4) normalized matches, reference frame.

    Returns (points, well_conditioned).  Ill-conditioned rows (near-parallel
    rays or near-zero baseline) fall back to a point along the reference ray
    and are flagged False.
    """
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float)
    matches = np.asarray(matches, dtype=float).reshape(-1, 4)
    d_ref = _hom(matches[:, :2])
    d_query = _hom(matches[:, 2:]) @ rotation  # rows: R.T @ ray_query
    center = -(rotation.T @ translation)

    a11 = np.sum(d_ref * d_ref, axis=1)
    a12 = np.sum(d_ref * d_query, axis=1)
    a22 = np.sum(d_query * d_query, axis=1)
    det = a11 * a22 - a12 * a12
    baseline = float(np.linalg.norm(center))
    well = (det > 1e-12 * a11 * a22) & (baseline > 1e-12)
    b1 = d_ref @ center
    b2 = d_query @ center
    safe_det = np.where(well, det, 1.0)
    s = np.where(well, (b1 * a22 - b2 * a12) / safe_det, b1 / a11)
    u = np.where(well, (a12 * b1 - a11 * b2) / safe_det, 0.0)
    points = 0.5 * (s[:, None] * d_ref + center + u[:, None] * d_query)
    return points, well


def triangulate_midpoint(rotation: np.ndarray, translation: np.ndarray, match: np.ndarray):
    """Midpoint triangulation of one normalized match, in the reference frame.

    Returns (point, well_conditioned).  The flag is False for near-parallel
    rays or a near-zero baseline; a point is still returned and is only
    meant for cheirality sign checks.
    """
    points, well = _midpoints(rotation, translation, np.asarray(match, dtype=float).reshape(1, 4))
    return points[0], bool(well[0])


def essential_pose_candidates(e: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (rotation, unit translation) decompositions of an essential matrix."""
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=float))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    return [(u @ w @ vt, t), (u @ w @ vt, -t), (u @ w.T @ vt, t), (u @ w.T @ vt, -t)]


def decompose_essential(e: np.ndarray, matches: np.ndarray):
    """Resolve an essential matrix into (rotation, unit translation).

    Of the four algebraic decompositions, returns the one that places the
    most matches in front of both cameras (midpoint triangulation); ties go
    to the candidate with the larger mean depth margin.  If no candidate
    puts any well-conditioned match in front of both cameras, raises
    CheiralityError.
    """
    matches = np.asarray(matches, dtype=float).reshape(-1, 4)
    if len(matches) == 0:
        raise InvalidParameterError("cheirality needs at least one match")
    candidates = essential_pose_candidates(e)

    best = None
    for rotation, translation in candidates:
        points, well = _midpoints(rotation, translation, matches)
        z_ref = points[:, 2]
        z_query = points @ rotation[2] + translation[2]
        front = well & (z_ref > 0) & (z_query > 0)
        count = int(front.sum())
        margin = float(np.minimum(z_ref[front], z_query[front]).mean()) if count else 0.0
        key = (count, margin)
        if best is None or key > best[0]:
            best = (key, rotation, translation)

    if best[0][0] == 0:
        raise CheiralityError("no decomposition places a match in front of both cameras")
    _, rotation, translation = best
    return rotation, translation / np.linalg.norm(translation)


def refine_essential(e: np.ndarray, matches: np.ndarray, max_iterations: int = 20) -> np.ndarray:
    """Levenberg-Marquardt on the Sampson error over the essential manifold.

    Minimal-sample hypotheses fit five noisy points exactly but generalize
    poorly; this polishes the 5 pose degrees of freedom (rotation plus
    translation direction) against all supplied matches.  The result is an
    exact essential matrix by construction.  Raises CheiralityError when the
    initial matrix cannot be decomposed against the matches.
    """
    matches = np.asarray(matches, dtype=float).reshape(-1, 4)
    rotation, t_dir = decompose_essential(e, matches)
    axis = np.array([1.0, 0.0, 0.0]) if abs(t_dir[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t_dir, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t_dir, b1)
    q_ref = _hom(matches[:, :2])
    q_query = _hom(matches[:, 2:])

    def build(p: np.ndarray) -> np.ndarray:
        rot = rotation_from_axis_angle(p[:3]) @ rotation
        direction = rotation_from_axis_angle(b1 * p[3] + b2 * p[4]) @ t_dir
        return essential_from_pose(rot, direction)

    def residuals(essential: np.ndarray) -> np.ndarray:
        eq = q_ref @ essential.T
        etq = q_query @ essential
        numerator = np.abs(np.sum(q_query * eq, axis=1))
        denom_sq = eq[:, 0] ** 2 + eq[:, 1] ** 2 + etq[:, 0] ** 2 + etq[:, 1] ** 2
        return numerator / np.sqrt(np.maximum(denom_sq, 1e-300))

    params = np.zeros(5)
    cost = float(np.sum(residuals(build(params)) ** 2))
    damping = 1e-6
    step_h = 1e-6
    for _ in range(max_iterations):
        base = residuals(build(params))
        jacobian = np.empty((len(matches), 5))
        for j in range(5):
            forward = params.copy()
            forward[j] += step_h
            backward = params.copy()
            backward[j] -= step_h
            # central differences: the O(h^2) error keeps the convergence
            # floor near 1e-12, which the noiseless exactness regime needs
            jacobian[:, j] = (residuals(build(forward)) - residuals(build(backward))) / (2.0 * step_h)
        gradient = jacobian.T @ base
        hessian = jacobian.T @ jacobian
        improved = False
        while damping < 1e8:
            try:
                step = np.linalg.solve(hessian + damping * np.eye(5), -gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            candidate = params + step
            new_cost = float(np.sum(residuals(build(candidate)) ** 2))
            if new_cost <= cost:
                relative_drop = (cost - new_cost) / max(cost, 1e-300)
                params, cost = candidate, new_cost
                damping = max(damping / 10.0, 1e-12)
                improved = True
                if relative_drop < 1e-10:
                    return build(params)
                break
            damping *= 10.0
        if not improved:
            break
    return build(params)


# --------------------------------------------------------------------------
# Perspective-n-point
# --------------------------------------------------------------------------


def _collinear(points: np.ndarray) -> bool:
    spread = float(np.abs(points - points.mean(axis=0)).max())
    area = np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0]))
    return area <= 1e-12 * max(spread * spread, 1e-30)


def pnp_p3p(points3d: np.ndarray, rays: np.ndarray) -> list[Pose]:
    """Three-point pose: world points + normalized image rays -> candidate poses.

    Solves the classic law-of-cosines distance system.  The ratio
    substitution reduces it to a quartic assembled with numpy polynomial
    arithmetic; each admissible root gives camera-frame points that are
    rigidly aligned to the world points.  Candidates that fail to reproject
    the sample to 1e-6 (normalized units) are dropped.
    """
    points3d = np.asarray(points3d, dtype=float).reshape(3, 3)
    rays = np.asarray(rays, dtype=float).reshape(3, 2)
    if _collinear(points3d):
        raise DegenerateSampleError("3D points are collinear")

    f = _hom(rays)
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    d01 = np.linalg.norm(points3d[0] - points3d[1])
    d02 = np.linalg.norm(points3d[0] - points3d[2])
    d12 = np.linalg.norm(points3d[1] - points3d[2])
    if min(d01, d02, d12) <= 0:
        raise DegenerateSampleError("3D points are coincident")
    cos01 = float(f[0] @ f[1])
    cos02 = float(f[0] @ f[2])
    cos12 = float(f[1] @ f[2])

    r01 = (d01 / d02) ** 2
    r12 = (d12 / d02) ** 2
    # q(v) = 1 + v^2 - 2 v cos02; u = N(v)/D(v) after eliminating u^2.
    q = np.array([1.0, -2.0 * cos02, 1.0])
    n_poly = np.array([-1.0, 0.0, 1.0]) - (r01 - r12) * q
    d_poly = np.array([-2.0 * cos12, 2.0 * cos01])
    nd = np.convolve(n_poly, d_poly)  # degree 3, pad to the quartic's length
    quartic = (
        np.convolve(n_poly, n_poly)
        - 2.0 * cos01 * np.concatenate([[0.0], nd])
        + np.convolve(np.array([-r01, 2.0 * r01 * cos02, 1.0 - r01]), np.convolve(d_poly, d_poly))
    )
    if not np.any(np.abs(quartic) > 0):
        return []

    deriv = np.polyder(quartic)
    poses: list[Pose] = []
    for root in np.roots(quartic):
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        for _ in range(2):  # polish: np.roots alone is not always at 1e-12
            dv = _horner(deriv, v)
            if abs(dv) < 1e-30:
                break
            v -= _horner(quartic, v) / dv
        qv = _horner(q, v)
        dd = _horner(d_poly, v)
        if qv <= 0 or abs(dd) < 1e-12:
            continue
        u = _horner(n_poly, v) / dd
        k0 = d02 / np.sqrt(qv)
        dists = np.array([k0, u * k0, v * k0])
        if np.any(dists <= 0):
            continue
        # Newton on the three distance equations: the quartic root alone can
        # lose precision near double roots, the distance system does not.
        for _ in range(3):
            k0, k1, k2 = dists
            g = np.array(
                [
                    k0 * k0 + k1 * k1 - 2 * k0 * k1 * cos01 - d01 * d01,
                    k0 * k0 + k2 * k2 - 2 * k0 * k2 * cos02 - d02 * d02,
                    k1 * k1 + k2 * k2 - 2 * k1 * k2 * cos12 - d12 * d12,
                ]
            )
            jac = 2.0 * np.array(
                [
                    [k0 - k1 * cos01, k1 - k0 * cos01, 0.0],
                    [k0 - k2 * cos02, 0.0, k2 - k0 * cos02],
                    [0.0, k1 - k2 * cos12, k2 - k1 * cos12],
                ]
            )
            try:
                step = np.linalg.solve(jac, g)
            except np.linalg.LinAlgError:
                break
            dists = dists - step
        if np.any(dists <= 0) or not np.all(np.isfinite(dists)):
            continue
        camera_points = dists[:, None] * f
        try:
            pose = procrustes_align(points3d, camera_points)
        except DegenerateSampleError:
            continue
        projected = pose.transform(points3d)
        if np.any(projected[:, 2] <= 0):
            continue
        reproj = projected[:, :2] / projected[:, 2:3]
        if np.abs(reproj - rays).max() > 1e-6:
            continue
        if any(
            np.abs(pose.rotation - prev.rotation).max() < 1e-9
            and np.abs(pose.translation - prev.translation).max() < 1e-9 * (1.0 + np.abs(prev.translation).max())
            for prev in poses
        ):
            continue
        poses.append(pose)
    return poses


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    initial_cost: float
    final_cost: float
    diverged: bool


def refine_pnp(
    initial: Pose,
    points3d: np.ndarray,
    pixels: np.ndarray,
    k: CameraIntrinsics,
    max_iterations: int = 100,
) -> RefineResult:
    """Damped Gauss-Newton on pixel reprojection error.

    Damping is multiplied by 10 on a rejected step and divided by 10 on an
    accepted one; convergence is a relative cost change below 1e-12.  The
    returned cost never exceeds the initial cost; if no step is ever
    accepted the initial pose comes back with diverged=True.
    """
    points3d = np.asarray(points3d, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(points3d) < 4:
        raise InvalidParameterError("refinement needs at least 4 correspondences")

    def cost_and_residuals(pose: Pose):
        cam = pose.transform(points3d)
        if np.any(cam[:, 2] <= 0):
            return np.inf, None, None
        z = cam[:, 2]
        proj = np.column_stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy])
        res = (proj - pixels).ravel()
        return float(res @ res), res, cam

    pose = initial
    cost, res, cam = cost_and_residuals(pose)
    initial_cost = cost
    if not np.isfinite(cost):
        return RefineResult(initial, initial_cost, initial_cost, True)

    damping = 1e-3
    accepted_any = False
    for _ in range(max_iterations):
        if cost == 0.0:
            break
        z = cam[:, 2]
        n = len(points3d)
        d_proj = np.zeros((n, 2, 3))
        d_proj[:, 0, 0] = k.fx / z
        d_proj[:, 0, 2] = -k.fx * cam[:, 0] / z**2
        d_proj[:, 1, 1] = k.fy / z
        d_proj[:, 1, 2] = -k.fy * cam[:, 1] / z**2
        # camera point under left perturbation: d(cam)/dw = -[cam]x, d(cam)/dt = I
        cross = np.zeros((n, 3, 3))
        cross[:, 0, 1] = cam[:, 2]
        cross[:, 0, 2] = -cam[:, 1]
        cross[:, 1, 0] = -cam[:, 2]
        cross[:, 1, 2] = cam[:, 0]
        cross[:, 2, 0] = cam[:, 1]
        cross[:, 2, 1] = -cam[:, 0]
        jacobian = np.concatenate([np.einsum("nij,njk->nik", d_proj, cross), d_proj], axis=2)
        jacobian = jacobian.reshape(2 * n, 6)
        gradient = jacobian.T @ res
        hessian = jacobian.T @ jacobian

        improved = False
        while damping < 1e12:
            try:
                step = np.linalg.solve(hessian + damping * np.eye(6), -gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            dr = rotation_from_axis_angle(step[:3])
            candidate = Pose(dr @ pose.rotation, dr @ pose.translation + step[3:])
            new_cost, new_res, new_cam = cost_and_residuals(candidate)
            if new_cost <= cost:
                relative_drop = (cost - new_cost) / max(cost, 1e-300)
                pose, cost, res, cam = candidate, new_cost, new_res, new_cam
                damping = max(damping / 10.0, 1e-12)
                improved = True
                accepted_any = True
                if relative_drop < 1e-12:
                    return RefineResult(pose, initial_cost, cost, False)
                break
            damping *= 10.0
        if not improved:
            break

    if not accepted_any and cost > 0.0:
        return RefineResult(initial, initial_cost, initial_cost, True)
    return RefineResult(pose, initial_cost, cost, False)


# --------------------------------------------------------------------------
# Rigid 3D-3D alignment
# --------------------------------------------------------------------------


def procrustes_align(ref_points: np.ndarray, query_points: np.ndarray) -> Pose:
    """Least-squares rigid transform (no scale) with R @ ref + t = query.

    Centroid subtraction + SVD; the sign of the last singular vector is
    flipped when needed so the rotation is always proper.  Collinear or
    coincident point sets raise DegenerateSampleError.
    """
    ref_points = np.asarray(ref_points, dtype=float).reshape(-1, 3)
    query_points = np.asarray(query_points, dtype=float).reshape(-1, 3)
    if ref_points.shape != query_points.shape or len(ref_points) < 3:
        raise InvalidParameterError("alignment needs matching point sets of size >= 3")
    centroid_ref = ref_points.mean(axis=0)
    centroid_query = query_points.mean(axis=0)
    h = (ref_points - centroid_ref).T @ (query_points - centroid_query)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateSampleError("point sets are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_query - rotation @ centroid_ref
    return Pose(rotation, translation)
