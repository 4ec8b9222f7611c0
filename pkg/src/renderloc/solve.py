"""Camera pose from 2D-3D correspondences: P3P inside LO-RANSAC with
Levenberg-Marquardt refinement.

The minimal solver follows the classical three-point resection: law of
cosines along the three viewing rays gives two conics in the distance
ratios, whose resultant is a quartic. The quartic coefficients are built
per instance by polynomial elimination (numpy poly arithmetic) rather
than transcribed closed forms, the roots come from the companion matrix
(np.roots) and get two Newton polish steps, and the camera-frame points
are registered to the world points with Horn's quaternion absolute
orientation.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CollinearPoints,
    InsufficientInliers,
    NoModelFound,
    NoRealSolution,
    TooFewCorrespondences,
)
from .geom import Intrinsics, Pose, backproject_pixels, rotation_angle_deg, so3_exp
from .match import MatchSet
from .render import RenderedView, depth_edge_mask

P3P_REPROJ_TOL = 1e-6  # px; exact resections sit far below this
LIFT_DEPTH_JUMP = 0.5  # m; discontinuity size that poisons lifted depths


@dataclass
class Correspondence2D3D:
    pixel: np.ndarray  # (2,) query pixel
    point: np.ndarray  # (3,) world meters

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)


@dataclass
class RansacConfig:
    inlier_threshold_px: float = 5.0
    max_iterations: int = 2000
    confidence: float = 0.9999
    lo_refit_rounds: int = 3
    min_inliers: int = 12
    rng_seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold_px <= 0.0:
            raise ValueError("inlier_threshold_px must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")


@dataclass
class PnpResult:
    pose: Pose
    inlier_mask: np.ndarray
    iterations_used: int


def _corr_arrays(corrs):
    px = np.array([c.pixel for c in corrs], dtype=np.float64).reshape(-1, 2)
    pts = np.array([c.point for c in corrs], dtype=np.float64).reshape(-1, 3)
    return px, pts


def _reproj_errors(pose: Pose, pixels, points, K: Intrinsics):
    """Per-point reprojection error in pixels; +inf behind the camera."""
    cam = points @ pose.R.T + pose.t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
        err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(z > 1e-9, err, np.inf)


# -- minimal solver ----------------------------------------------------------


def _quat_to_rot(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _horn(world, cam):
    """Rotation/translation with cam ~= R @ world + t (Horn 1987)."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    s = (world - wc).T @ (cam - cc)
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, syy - sxx - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, szz - sxx - syy],
    ])
    _, vecs = np.linalg.eigh(n)
    R = _quat_to_rot(vecs[:, -1])
    return R, cc - R @ wc


def _polish_root(coeffs, x, steps=3):
    """Newton steps on the quartic; robust near repeated roots where the
    companion-matrix eigenvalues lose accuracy."""
    deriv = np.polyder(coeffs)
    for _ in range(steps):
        f = np.polyval(coeffs, x)
        df = np.polyval(deriv, x)
        if abs(df) < 1e-300:
            break
        x = x - f / df
    return x


def _refine_uv(u, v, cos_g, cos_a, k1, k2, steps=3):
    """Joint Newton on the two distance-ratio conics.

    Near-double quartic roots leave u = num/den as an ill-conditioned
    0/0 ratio; refining (u, v) together restores full precision.
    """
    dk1 = np.polyder(k1)
    dk2 = np.polyder(k2)
    for _ in range(steps):
        f1 = u * u - 2.0 * u * cos_g + float(np.polyval(k1, v))
        f2 = u * u - 2.0 * u * v * cos_a + float(np.polyval(k2, v))
        j11 = 2.0 * u - 2.0 * cos_g
        j12 = float(np.polyval(dk1, v))
        j21 = 2.0 * u - 2.0 * v * cos_a
        j22 = -2.0 * u * cos_a + float(np.polyval(dk2, v))
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-14:
            break
        du = (-f1 * j22 + f2 * j12) / det
        dv = (-j11 * f2 + j21 * f1) / det
        u += du
        v += dv
        if abs(du) + abs(dv) < 1e-15:
            break
    return u, v


def _polish_pose(pose: Pose, px, pts, K: Intrinsics, steps=3) -> Pose:
    """Newton iterations on the exactly-determined 3-point resection.

    Three points give six residuals for six degrees of freedom, so the
    reprojection vanishes at the true solution and Newton converges
    quadratically from the algebraic estimate.
    """
    for _ in range(steps):
        if (pts @ pose.R.T + pose.t)[:, 2].min() <= 1e-9:
            return pose
        res, jac = reprojection_residuals_jacobian(pose, px, pts, K)
        try:
            delta = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            return pose
        if not np.isfinite(delta).all():
            return pose
        pose = Pose(so3_exp(delta[:3]) @ pose.R, pose.t + delta[3:])
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


def p3p(corrs, K: Intrinsics) -> list[Pose]:
    """Up to four camera poses placing three world points on three rays.

    Raises CollinearPoints for degenerate geometry and NoRealSolution
    when no root yields a valid pose. Every returned pose reprojects its
    three inputs to better than 1e-6 px (numerically failed roots are
    dropped).
    """
    if len(corrs) != 3:
        raise ValueError(f"p3p needs exactly 3 correspondences, got {len(corrs)}")
    px, pts = _corr_arrays(corrs)
    area2 = np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
    if area2 * 0.5 <= 1e-9:
        raise CollinearPoints(f"triangle area {area2 * 0.5:.3g} m^2")

    rays = np.column_stack([
        (px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(3)
    ])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    # side lengths opposite the usual naming: c between P0P1, b between
    # P0P2, a between P1P2; cos angles between the matching ray pairs
    c2 = float(np.sum((pts[0] - pts[1]) ** 2))
    b2 = float(np.sum((pts[0] - pts[2]) ** 2))
    a2 = float(np.sum((pts[1] - pts[2]) ** 2))
    cos_g = float(rays[0] @ rays[1])  # opposite c
    cos_b = float(rays[0] @ rays[2])  # opposite b
    cos_a = float(rays[1] @ rays[2])  # opposite a

    # distances s1, s2 = u s1, s3 = v s1 from the camera center:
    #   u^2 - 2 u cos_g + K1(v) = 0,   K1 = 1 - (c2/b2)(1 + v^2 - 2 v cos_b)
    #   u^2 - 2 u v cos_a + K2(v) = 0, K2 = v^2 - (a2/b2)(1 + v^2 - 2 v cos_b)
    # subtracting gives u = (K2 - K1) / (2 (v cos_a - cos_g)); substitute
    # into the first and clear denominators -> quartic in v.
    base = np.array([1.0, -2.0 * cos_b, 1.0])  # v^2 - 2 v cos_b + 1
    k1 = np.polyadd(np.array([1.0]), -(c2 / b2) * base)
    k2 = np.polyadd(np.array([1.0, 0.0, 0.0]), -(a2 / b2) * base)
    num = np.polysub(k2, k1)
    den = np.array([2.0 * cos_a, -2.0 * cos_g])
    quartic = np.polyadd(
        np.polysub(np.polymul(num, num),
                   2.0 * cos_g * np.polymul(num, den)),
        np.polymul(k1, np.polymul(den, den)),
    )

    if not np.any(np.abs(quartic) > 1e-14):
        raise NoRealSolution("resection polynomial vanished")
    roots = np.roots(quartic)

    candidates = []
    for root in roots:
        # loose filter: near-real roots pushed complex by conditioning are
        # polished back; junk dies at the reprojection gate below
        if abs(root.imag) > 1e-4 * max(1.0, abs(root.real)):
            continue
        v = _polish_root(quartic, float(root.real))
        den_v = float(np.polyval(den, v))
        if abs(den_v) > 1e-12:
            candidates.append((float(np.polyval(num, v)) / den_v, v))
        else:
            # degenerate elimination: fall back to the first conic in u
            disc = cos_g * cos_g - float(np.polyval(k1, v))
            if disc >= 0.0:
                sq = math.sqrt(disc)
                candidates.append((cos_g + sq, v))
                candidates.append((cos_g - sq, v))

    poses = []
    for u, v in candidates:
        u, v = _refine_uv(u, v, cos_g, cos_a, k1, k2)
        if u <= 0.0 or v <= 0.0:
            continue
        denom1 = 1.0 + u * u - 2.0 * u * cos_g
        if denom1 <= 0.0:
            continue
        s1 = math.sqrt(c2 / denom1)
        s2, s3 = u * s1, v * s1
        cam_pts = np.array([s1 * rays[0], s2 * rays[1], s3 * rays[2]])
        R, t = _horn(pts, cam_pts)
        pose = _polish_pose(Pose(R, t), px, pts, K)
        if (pts @ pose.R.T + pose.t)[:, 2].min() <= 0.0:
            continue
        if _reproj_errors(pose, px, pts, K).max() > P3P_REPROJ_TOL:
            continue
        duplicate = any(
            rotation_angle_deg(pose.R, p.R) < 1e-7
            and np.linalg.norm(pose.center - p.center) < 1e-9
            for p in poses
        )
        if duplicate:
            continue
        poses.append(pose)
        if len(poses) == 4:
            break

    if not poses:
        raise NoRealSolution("no real root produced a valid pose")
    return poses


# -- nonlinear refinement ------------------------------------------------------


def reprojection_residuals_jacobian(pose: Pose, pixels, points, K: Intrinsics):
    """Stacked residuals (2N,) and Jacobian (2N, 6) at the given pose.

    Parametrization is the left increment [omega, dt]: the updated pose
    applies exp(skew(omega)) to the rotated point and adds dt. Columns
    0-2 are rotation, 3-5 translation.
    """
    n = len(points)
    cam = points @ pose.R.T + pose.t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    res = np.empty(2 * n)
    res[0::2] = u - pixels[:, 0]
    res[1::2] = v - pixels[:, 1]

    inv_z = 1.0 / z
    a = np.zeros((n, 2, 3))
    a[:, 0, 0] = K.fx * inv_z
    a[:, 0, 2] = -K.fx * x * inv_z * inv_z
    a[:, 1, 1] = K.fy * inv_z
    a[:, 1, 2] = -K.fy * y * inv_z * inv_z

    q = cam - pose.t  # R @ X
    neg_skew = np.zeros((n, 3, 3))
    neg_skew[:, 0, 1] = q[:, 2]
    neg_skew[:, 0, 2] = -q[:, 1]
    neg_skew[:, 1, 0] = -q[:, 2]
    neg_skew[:, 1, 2] = q[:, 0]
    neg_skew[:, 2, 0] = q[:, 1]
    neg_skew[:, 2, 1] = -q[:, 0]

    jac = np.empty((n, 2, 6))
    jac[:, :, 0:3] = np.einsum("nij,njk->nik", a, neg_skew)
    jac[:, :, 3:6] = a
    return res, jac.reshape(2 * n, 6)


def refine_pose(pose: Pose, corrs, K: Intrinsics, inlier_mask=None,
                max_iters: int = 20, step_tol: float = 1e-10) -> Pose:
    """Levenberg-Marquardt on the 6-dof tangent parametrization.

    Minimizes the sum of squared reprojection errors over the masked
    inliers; only improving steps are accepted, so the returned cost
    never exceeds the input cost.
    """
    px, pts = _corr_arrays(corrs)
    if inlier_mask is not None:
        mask = np.asarray(inlier_mask, dtype=bool)
        px, pts = px[mask], pts[mask]
    if len(px) < 4:
        raise InsufficientInliers(f"{len(px)} inliers < 4")

    def cost_of(p):
        cam_z = (pts @ p.R.T + p.t)[:, 2]
        if cam_z.min() <= 1e-9:
            return np.inf, None, None
        r, j = reprojection_residuals_jacobian(p, px, pts, K)
        return float(r @ r), r, j

    current = pose
    cost, res, jac = cost_of(current)
    if not np.isfinite(cost):
        return pose
    lam = 1e-3
    for _ in range(max_iters):
        g = jac.T @ res
        if np.linalg.norm(g) < 1e-14:
            break
        h = jac.T @ jac
        step = None
        while lam < 1e12:
            try:
                delta = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            trial = Pose(so3_exp(delta[:3]) @ current.R, current.t + delta[3:])
            trial_cost, trial_res, trial_jac = cost_of(trial)
            if trial_cost < cost:
                current, cost, res, jac = trial, trial_cost, trial_res, trial_jac
                lam = max(lam / 3.0, 1e-12)
                step = delta
                break
            lam *= 4.0
        if step is None or np.linalg.norm(step) < step_tol:
            break
    return current


# -- LO-RANSAC -----------------------------------------------------------------


def _anneal_multipliers(rounds):
    if rounds <= 1:
        return [1.0]
    return list(np.linspace(2.0, 1.0, rounds))


def ransac_pnp(corrs, K: Intrinsics, cfg: RansacConfig) -> PnpResult:
    """Locally optimized RANSAC around the P3P solver.

    Every new best hypothesis is refit on its inliers with the threshold
    annealed from 2x down to the final value; adaptive termination stops
    once a better model is unlikely at the configured confidence. The
    returned model carries the highest inlier count encountered.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(f"{n} correspondences < 4")
    px, pts = _corr_arrays(corrs)
    thr = cfg.inlier_threshold_px
    rng = np.random.default_rng(cfg.rng_seed)

    best_count = 0
    best_pose = None
    best_mask = None
    needed = cfg.max_iterations
    i = 0
    while i < cfg.max_iterations and i < needed:
        sample = rng.choice(n, size=3, replace=False)
        try:
            hyps = p3p([Correspondence2D3D(px[s], pts[s]) for s in sample], K)
        except (CollinearPoints, NoRealSolution):
            i += 1
            continue
        for hyp in hyps:
            errs = _reproj_errors(hyp, px, pts, K)
            count = int((errs < thr).sum())
            if count <= best_count:
                continue
            best_count, best_pose, best_mask = count, hyp, errs < thr
            # local optimization with threshold annealing
            model = hyp
            for mult in _anneal_multipliers(cfg.lo_refit_rounds):
                lo_mask = _reproj_errors(model, px, pts, K) < thr * mult
                if lo_mask.sum() < 4:
                    continue
                try:
                    model = refine_pose(model, corrs, K, lo_mask)
                except InsufficientInliers:
                    continue
            lo_errs = _reproj_errors(model, px, pts, K)
            lo_count = int((lo_errs < thr).sum())
            if lo_count > best_count:
                best_count, best_pose, best_mask = lo_count, model, lo_errs < thr
            w = best_count / n
            if w >= 1.0 - 1e-12:
                needed = 0
            else:
                needed = math.ceil(
                    math.log(1.0 - cfg.confidence) / math.log(1.0 - w ** 3)
                )
        i += 1

    if best_pose is None or best_count < cfg.min_inliers:
        raise NoModelFound(
            f"best model has {best_count} inliers < {cfg.min_inliers}"
        )

    try:
        final = refine_pose(best_pose, corrs, K, best_mask)
        final_errs = _reproj_errors(final, px, pts, K)
        final_count = int((final_errs < thr).sum())
        if final_count >= best_count:
            best_pose, best_mask = final, final_errs < thr
    except InsufficientInliers:
        pass
    return PnpResult(best_pose, best_mask, i)


# -- lifting -------------------------------------------------------------------


def lift_matches(matches: MatchSet, rendered: RenderedView) -> list[Correspondence2D3D]:
    """Convert 2D-2D matches into 2D-3D correspondences via rendered depth.

    Depth is sampled nearest-neighbor at the render-side pixel; pixels on
    or next to a depth discontinuity > 0.5 m are dropped (rasterized
    silhouette depths bleed across edges), as are background pixels. The
    sampled pixel center is what gets back-projected, so the 3D point
    lies exactly on the rendered surface.
    """
    if len(matches) == 0:
        return []
    K = rendered.intrinsics
    ui = np.clip(np.floor(matches.render_px[:, 0] + 0.5).astype(np.int64),
                 0, K.width - 1)
    vi = np.clip(np.floor(matches.render_px[:, 1] + 0.5).astype(np.int64),
                 0, K.height - 1)
    d = rendered.depth[vi, ui]
    edges = depth_edge_mask(rendered.depth, LIFT_DEPTH_JUMP)
    keep = np.isfinite(d) & ~edges[vi, ui]
    if not keep.any():
        return []
    sampled_px = np.stack([ui[keep], vi[keep]], axis=1).astype(np.float64)
    world = backproject_pixels(sampled_px, d[keep], rendered.pose, K)
    return [
        Correspondence2D3D(qpx, wpt)
        for qpx, wpt in zip(matches.query_px[keep], world)
    ]
