"""2D-3D pair assembly and pose solving: EPnP inside a seeded RANSAC loop.

EPnP follows the control-point formulation: four control points from the
centroid + principal axes (three for near-planar sets), barycentric
coordinates, the 2n x 12 projection system, beta cases N = 1..3 with a
Gauss-Newton polish on the inter-control-point distances, Horn alignment, and
a final Gauss-Newton reprojection polish of (R, t).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DegenerateError, InsufficientDataError, InvalidParameterError, NoPoseError
from .geometry import Affine2D, Intrinsics, Pose
from .interp import masked_gather_bilinear

PLANARITY_EIGENRATIO = 1e-3


@dataclass(frozen=True, eq=False)
class PairSet2D3D:
    """2D observation pixels (full-image frame) with 3D object points and weights."""

    pixels: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        pt = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        wt = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(px) == len(pt) == len(wt)):
            raise InvalidParameterError("pixels/points/weights lengths differ")
        if len(wt) and (wt.min() < 0 or wt.max() > 1):
            raise InvalidParameterError("weights must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pt)
        object.__setattr__(self, "weights", wt)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose
    inliers: int
    total: int
    reproj_rms: float
    hypothesis_index: int = 0

    def __post_init__(self):
        if self.inliers > self.total:
            raise InvalidParameterError("inliers cannot exceed total pairs")
        if self.reproj_rms < 0:
            raise InvalidParameterError("reprojection RMS must be >= 0")

    def to_json(self) -> dict:
        return {"pose": self.pose.to_json(), "inliers": self.inliers,
                "total": self.total, "reproj_rms": self.reproj_rms,
                "hypothesis_index": self.hypothesis_index}


def assemble_pairs(pmap, cmap, template, obs_mask, obs_crop: Affine2D | None = None,
                   threshold=0.5, cap=2000) -> PairSet2D3D:
    """2D-3D pairs from a position map, certainty map, and template.

    Keeps foreground observation pixels whose certainty strictly exceeds the
    threshold, looks up the template coordinate map at the predicted position
    (mask-aware bilinear; pairs landing off the template surface are dropped),
    and de-crops observation pixels to full-image coordinates. When more than
    `cap` pairs survive, the highest-certainty ones are kept.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidParameterError("threshold must lie in [0, 1]")
    positions = np.asarray(getattr(pmap, "positions", pmap), dtype=np.float64)
    certainty = np.asarray(getattr(cmap, "values", cmap), dtype=np.float64)
    mask = np.asarray(obs_mask, dtype=bool)
    keep = mask & (certainty > threshold)
    if not keep.any():
        return PairSet2D3D(np.empty((0, 2)), np.empty((0, 3)), np.empty(0))
    vs, us = np.nonzero(keep)
    pix = np.stack([us, vs], axis=1).astype(np.float64)
    xyz, valid = masked_gather_bilinear(np.nan_to_num(template.xyz), template.mask,
                                        positions[vs, us])
    pix, xyz, weights = pix[valid], xyz[valid], certainty[vs, us][valid]
    if obs_crop is not None:
        pix = obs_crop.apply(pix)
    if len(weights) > cap:
        order = np.argsort(-weights, kind="stable")[:cap]
        pix, xyz, weights = pix[order], xyz[order], weights[order]
    return PairSet2D3D(pix, xyz, weights)


# ---------------------------------------------------------------------------
# EPnP

def _control_points(points):
    c0 = points.mean(axis=0)
    centered = points - c0
    cov = centered.T @ centered / len(points)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    if eigvals[2] <= 0 or eigvals[1] / eigvals[2] < 1e-9:
        raise DegenerateError("points are (near-)collinear")
    planar = eigvals[0] / eigvals[2] < PLANARITY_EIGENRATIO
    axes = eigvecs[:, ::-1].T  # principal first
    scales = np.sqrt(np.maximum(eigvals[::-1], 0.0))
    n_axes = 2 if planar else 3
    ctrl = np.vstack([c0] + [c0 + scales[i] * axes[i] for i in range(n_axes)])
    return ctrl, planar


def _barycentric(points, ctrl):
    basis = (ctrl[1:] - ctrl[0]).T  # 3 x (nc-1)
    rhs = (points - ctrl[0]).T
    coeffs, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
    alphas = np.vstack([1.0 - coeffs.sum(axis=0), coeffs]).T
    return alphas  # n x nc


def _build_m(alphas, xn, yn):
    n, nc = alphas.shape
    m = np.zeros((2 * n, 3 * nc))
    for j in range(nc):
        m[0::2, 3 * j] = alphas[:, j]
        m[0::2, 3 * j + 2] = -alphas[:, j] * xn
        m[1::2, 3 * j + 1] = alphas[:, j]
        m[1::2, 3 * j + 2] = -alphas[:, j] * yn
    return m


def _betas_initial(v, rho, pairs, case_n):
    """Closed-form beta seeds for cases N = 1..4 (signs fixed by Gauss-Newton)."""
    dv = np.stack([v[i] - v[j] for i, j in pairs])  # (npairs, 3, case_n)
    if case_n == 1:
        norms = np.linalg.norm(dv[:, :, 0], axis=1)
        den = float((norms ** 2).sum())
        return np.array([float((norms * np.sqrt(rho)).sum()) / max(den, 1e-300)])
    cols = {2: [(0, 0), (0, 1), (1, 1)],
            3: [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)],
            4: [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2),
                (0, 3), (1, 3), (2, 3), (3, 3)]}[case_n]
    lmat = np.zeros((len(pairs), len(cols)))
    for r_i, d in enumerate(dv):
        for c_i, (a, b) in enumerate(cols):
            factor = 1.0 if a == b else 2.0
            lmat[r_i, c_i] = factor * float(d[:, a] @ d[:, b])
    sol, *_ = np.linalg.lstsq(lmat, rho, rcond=None)
    if case_n == 2:
        b1 = np.sqrt(abs(sol[0]))
        b2 = np.sqrt(abs(sol[2])) * np.sign(sol[1]) if sol[1] != 0 else np.sqrt(abs(sol[2]))
        return np.array([b1, b2])
    b1 = np.sqrt(abs(sol[0]))
    if case_n == 3:
        b2 = np.sqrt(abs(sol[2])) * np.sign(sol[1]) if sol[1] != 0 else 0.0
        b3 = np.sqrt(abs(sol[5])) * np.sign(sol[3]) if sol[3] != 0 else 0.0
        return np.array([b1, b2, b3])
    # case 4: the 6x10 product system is underdetermined; use the
    # minimum-norm solution's first row of products as the seed
    if b1 > 1e-12:
        return np.array([b1, sol[1] / b1, sol[3] / b1, sol[6] / b1])
    return np.array([b1, np.sqrt(abs(sol[2])), np.sqrt(abs(sol[5])),
                     np.sqrt(abs(sol[9]))])


def _betas_gauss_newton(v, betas, rho, pairs, iterations=8):
    """Refine beta seed(s) on the inter-control-point distance constraints.

    betas may be (case_n,) or a batch (S, case_n); all seeds iterate together.
    """
    ii = np.array([i for i, _ in pairs])
    jj = np.array([j for _, j in pairs])
    dv = v[ii] - v[jj]  # (npairs, 3, case_n)
    single = betas.ndim == 1
    b = np.atleast_2d(np.asarray(betas, dtype=np.float64))  # (S, case_n)
    case_n = b.shape[1]
    eye = 1e-12 * np.eye(case_n)
    for _ in range(iterations):
        dx = np.einsum("pdn,sn->spd", dv, b)
        res = (dx ** 2).sum(axis=2) - rho[None, :]
        jac = 2.0 * np.einsum("spd,pdn->spn", dx, dv)
        jtj = np.einsum("spn,spm->snm", jac, jac) + eye
        jtr = np.einsum("spn,sp->sn", jac, res)
        try:
            step = np.linalg.solve(jtj, -jtr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        b = b + step
        if np.abs(step).max() < 1e-14:
            break
    return b[0] if single else b


def _pose_from_camera_points(points, cam_points) -> Pose:
    pw = points - points.mean(axis=0)
    pc = cam_points - cam_points.mean(axis=0)
    h = pw.T @ pc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cam_points.mean(axis=0) - r @ points.mean(axis=0)
    return Pose(r, t)


def reprojection_errors(points, pixels, pose: Pose, k: Intrinsics):
    """Per-pair pixel errors; points at or behind the camera get +inf."""
    cam = pose.transform(points)
    z = cam[:, 2]
    err = np.full(len(points), np.inf)
    ok = z > 1e-12
    u = k.fx * cam[ok, 0] / z[ok] + k.cx
    v = k.fy * cam[ok, 1] / z[ok] + k.cy
    err[ok] = np.hypot(u - pixels[ok, 0], v - pixels[ok, 1])
    return err


def _polish_pose(points, pixels, pose: Pose, k: Intrinsics, iterations=15):
    """Gauss-Newton reprojection polish over (rotation, translation)."""
    r, t = pose.rotation, pose.translation
    for _ in range(iterations):
        cam = points @ r.T + t
        z = cam[:, 2]
        if np.any(z <= 1e-12):
            break
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
        res = np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1).reshape(-1)
        d_proj = np.zeros((len(points), 2, 3))
        d_proj[:, 0, 0] = k.fx / z
        d_proj[:, 0, 2] = -k.fx * cam[:, 0] / z ** 2
        d_proj[:, 1, 1] = k.fy / z
        d_proj[:, 1, 2] = -k.fy * cam[:, 1] / z ** 2
        rp = cam - t
        d_cam = np.zeros((len(points), 3, 6))
        d_cam[:, 0, 1], d_cam[:, 0, 2] = rp[:, 2], -rp[:, 1]
        d_cam[:, 1, 0], d_cam[:, 1, 2] = -rp[:, 2], rp[:, 0]
        d_cam[:, 2, 0], d_cam[:, 2, 1] = rp[:, 1], -rp[:, 0]
        d_cam[:, :, 3:] = np.eye(3)
        jac = np.einsum("nij,njk->nik", d_proj, d_cam).reshape(-1, 6)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            step = np.linalg.solve(jtj + 1e-12 * np.eye(6), -jtr)
        except np.linalg.LinAlgError:
            break
        from .geometry import rotation_from_axis_angle
        r = rotation_from_axis_angle(step[:3]) @ r
        t = t + step[3:]
        if np.abs(step).max() < 1e-14:
            break
    # re-orthonormalize against accumulated drift
    u_, _, vt_ = np.linalg.svd(r)
    r = u_ @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u_ @ vt_))]) @ vt_
    return Pose(r, t)


def epnp(points, pixels, k: Intrinsics, polish=True):
    """Control-point EPnP followed by a Gauss-Newton reprojection polish.

    Requires >= 4 pairs; near-planar sets (covariance eigenratio below 1e-3)
    switch to the planar 3-control-point branch; collinear sets raise
    DegenerateError. Returns (Pose, reprojection_rms_px).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n < 4 or len(pixels) != n:
        raise InsufficientDataError("EPnP needs at least 4 pairs")
    xn = (pixels[:, 0] - k.cx) / k.fx
    yn = (pixels[:, 1] - k.cy) / k.fy

    ctrl, planar = _control_points(points)
    nc = len(ctrl)
    alphas = _barycentric(points, ctrl)
    m = _build_m(alphas, xn, yn)
    _, eigvecs = np.linalg.eigh(m.T @ m)
    n_null = 3 if planar else 4
    null = eigvecs[:, :n_null]  # columns: smallest eigenvalues first
    v = null.reshape(nc, 3, n_null)

    pairs = list(combinations(range(nc), 2))
    rho = np.array([float((ctrl[i] - ctrl[j]) @ (ctrl[i] - ctrl[j])) for i, j in pairs])

    best = None
    # n == 4: the null space is exactly 4-dimensional, so only the multistart
    # case-4 solve is informative; larger sets use the classic 1..3 cases
    cases = (1, 2) if planar else ((4,) if n == 4 else (1, 2, 3))
    done = False
    for case_n in cases:
        if done:
            break
        v_case = v[:, :, :case_n]
        try:
            seed = _betas_initial(v_case, rho, pairs, case_n)
        except np.linalg.LinAlgError:
            continue
        seeds = np.atleast_2d(seed)
        if case_n == 4:
            # the 6-quadratics-in-4-unknowns system has several basins; a few
            # deterministic restarts let the reprojection error pick the right one
            scale = max(float(np.linalg.norm(seed)), 1e-6)
            seeds = np.vstack([seeds, -seeds, scale * np.eye(4)])
        try:
            refined = _betas_gauss_newton(v_case, seeds, rho, pairs,
                                          iterations=10 if case_n == 4 else 8)
        except np.linalg.LinAlgError:
            continue
        for betas in refined:
            cam_ctrl = np.tensordot(v_case, betas, axes=([2], [0]))
            cam_pts = alphas @ cam_ctrl
            if cam_pts[:, 2].mean() < 0:
                cam_pts = -cam_pts
            if np.any(cam_pts[:, 2] <= 0):
                continue
            try:
                pose = _pose_from_camera_points(points, cam_pts)
            except np.linalg.LinAlgError:
                continue
            rms = float(np.sqrt(np.mean(reprojection_errors(points, pixels, pose, k) ** 2)))
            if best is None or rms < best[1]:
                best = (pose, rms)
            if rms < 1e-8:  # exact solution; nothing later can improve it
                done = True
                break
    if best is None:
        raise DegenerateError("EPnP found no admissible solution")
    pose, rms = best
    if polish:
        pose = _polish_pose(points, pixels, pose, k)
        rms = float(np.sqrt(np.mean(reprojection_errors(points, pixels, pose, k) ** 2)))
    return pose, rms


def pnp_ransac(pairs: PairSet2D3D, k: Intrinsics, iterations=150,
               reproj_threshold=2.0, seed=0, hypothesis_index=0):
    """EPnP over minimal sets of 4 inside RANSAC, then an inlier refit.

    Deterministic given the seed; consensus ties keep the earliest hypothesis.
    The returned inlier statistics are classified against the final pose.
    Returns (PoseEstimate, inlier_mask). Raises NoPoseError when no hypothesis
    reaches 4 inliers.
    """
    points, pixels = pairs.points, pairs.pixels
    n = len(pairs)
    if n < 4:
        raise InsufficientDataError("PnP needs at least 4 pairs")
    rng = np.random.default_rng(seed)
    best_count, best_inliers, best_pose = -1, None, None
    for _ in range(iterations):
        sel = rng.choice(n, size=4, replace=False)
        try:
            pose, _ = epnp(points[sel], pixels[sel], k, polish=False)
        except (DegenerateError, InsufficientDataError):
            continue
        err = reprojection_errors(points, pixels, pose, k)
        inl = err < reproj_threshold
        count = int(inl.sum())
        if count > best_count:
            best_count, best_inliers, best_pose = count, inl, pose
    if best_inliers is None or best_count < 4:
        raise NoPoseError(f"no hypothesis reached 4 inliers (best {best_count})")

    try:
        pose, _ = epnp(points[best_inliers], pixels[best_inliers], k, polish=True)
    except DegenerateError:
        pose = _polish_pose(points[best_inliers], pixels[best_inliers], best_pose, k)
    err = reprojection_errors(points, pixels, pose, k)
    final_inliers = err < reproj_threshold
    support = final_inliers if final_inliers.any() else best_inliers
    rms = float(np.sqrt(np.mean(err[support] ** 2))) if support.any() else float("inf")
    estimate = PoseEstimate(pose=pose, inliers=int(final_inliers.sum()), total=n,
                            reproj_rms=rms, hypothesis_index=hypothesis_index)
    return estimate, final_inliers
