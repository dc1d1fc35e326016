"""Correspondence and pose error metrics: EPE, MSSD, MSPD, recall aggregation.

Threshold grids follow the BOP-benchmark conventions: MSSD thresholds are
5%..50% of the object diameter in 5% steps, MSPD thresholds 5..50 px in 5 px
steps at a 640 px reference image width. VSD is out of scope (it needs
visibility-mask conventions external to this library).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidParameterError
from .geometry import Intrinsics, Pose, project

MSSD_THRESHOLDS = tuple(np.round(np.arange(1, 11) * 0.05, 10))   # fractions of diameter
MSPD_THRESHOLDS = tuple(float(t) for t in range(5, 51, 5))        # px at 640 px width
MSPD_REFERENCE_WIDTH = 640.0


@dataclass(frozen=True, eq=False)
class SymmetrySet:
    """Rigid object-frame transforms under which the object is equivalent.

    Always contains the identity (prepended when missing).
    """

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        t = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(r) != len(t):
            raise InvalidParameterError("rotation/translation count mismatch")
        for m in r:
            if np.abs(m.T @ m - np.eye(3)).max() > 1e-9:
                raise InvalidParameterError("symmetry rotation is not orthonormal")
        has_identity = any(np.abs(m - np.eye(3)).max() < 1e-12 and np.abs(tv).max() < 1e-12
                           for m, tv in zip(r, t))
        if not has_identity:
            r = np.concatenate([np.eye(3)[None], r])
            t = np.concatenate([np.zeros((1, 3)), t])
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "translations", t)

    @classmethod
    def identity(cls) -> "SymmetrySet":
        return cls(np.eye(3)[None], np.zeros((1, 3)))

    @classmethod
    def from_rotations(cls, rotations) -> "SymmetrySet":
        rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        return cls(rotations, np.zeros((len(rotations), 3)))

    def __len__(self):
        return len(self.rotations)


def epe(positions, positions_hat, mask):
    """Mean Euclidean end-point error over masked pixels, in pixels."""
    p = np.asarray(getattr(positions, "positions", positions), dtype=np.float64)
    q = np.asarray(getattr(positions_hat, "positions", positions_hat), dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if p.shape != q.shape:
        raise InvalidParameterError("position maps must share a shape")
    if not m.any():
        raise InsufficientDataError("empty mask")
    d = p[m] - q[m]
    return float(np.sqrt((d ** 2).sum(axis=-1)).mean())


def subsample_vertices(vertices, cap=10000, seed=0):
    """Deterministic farthest-point subsample when a mesh exceeds the cap."""
    pts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(pts) <= cap:
        return pts
    rng = np.random.default_rng(seed)
    chosen = np.empty(cap, dtype=np.int64)
    chosen[0] = rng.integers(len(pts))
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, cap):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[chosen[i]], axis=1))
    return pts[chosen]


def _model_points(mesh_or_points, cap=10000, seed=0):
    pts = getattr(mesh_or_points, "vertices", mesh_or_points)
    return subsample_vertices(pts, cap, seed)


def mssd(pose: Pose, gt: Pose, mesh_or_points, sym: SymmetrySet | None = None,
         cap=10000, seed=0):
    """Maximum symmetry-aware surface distance, meters."""
    pts = _model_points(mesh_or_points, cap, seed)
    if len(pts) == 0:
        raise InsufficientDataError("empty model point set")
    sym = sym or SymmetrySet.identity()
    est = pose.transform(pts)
    best = math.inf
    for r, t in zip(sym.rotations, sym.translations):
        sym_pts = pts @ r.T + t
        gt_pts = gt.transform(sym_pts)
        best = min(best, float(np.linalg.norm(est - gt_pts, axis=1).max()))
    return best


def mspd(pose: Pose, gt: Pose, k: Intrinsics, mesh_or_points,
         sym: SymmetrySet | None = None, cap=10000, seed=0):
    """Maximum symmetry-aware projection distance, pixels."""
    pts = _model_points(mesh_or_points, cap, seed)
    if len(pts) == 0:
        raise InsufficientDataError("empty model point set")
    sym = sym or SymmetrySet.identity()
    proj_est = project(k, pose, pts)
    best = math.inf
    for r, t in zip(sym.rotations, sym.translations):
        sym_pts = pts @ r.T + t
        proj_gt = project(k, gt, sym_pts)
        best = min(best, float(np.linalg.norm(proj_est - proj_gt, axis=1).max()))
    return best


def average_recall(errors, thresholds, normalizer=1.0):
    """Mean over thresholds of the fraction of normalized errors below each.

    Failed instances can be passed as +inf; they count against every
    threshold.
    """
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if errors.size == 0:
        raise InsufficientDataError("empty error list")
    if thresholds.size == 0:
        raise InvalidParameterError("need at least one threshold")
    normalized = errors / normalizer
    recalls = [(normalized < th).mean() for th in thresholds]
    return float(np.mean(recalls))


def ar_mssd(errors, diameter):
    """Average recall of MSSD errors against the diameter-fraction grid."""
    return average_recall(errors, np.asarray(MSSD_THRESHOLDS) * diameter)


def ar_mspd(errors, image_width):
    """Average recall of MSPD errors against the width-scaled pixel grid."""
    scale = image_width / MSPD_REFERENCE_WIDTH
    return average_recall(errors, np.asarray(MSPD_THRESHOLDS) * scale)


def rotation_error_deg(pose: Pose, gt: Pose):
    cosang = (np.trace(pose.rotation @ gt.rotation.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cosang))))


def translation_error(pose: Pose, gt: Pose):
    return float(np.linalg.norm(pose.translation - gt.translation))


def translation_accuracy(errors_m, threshold_m=0.05):
    """Fraction of instances with translation error below the threshold (5 cm)."""
    errors = np.asarray(errors_m, dtype=np.float64)
    if errors.size == 0:
        raise InsufficientDataError("empty error list")
    return float((errors < threshold_m).mean())
