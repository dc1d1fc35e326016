"""Pose, intrinsics, and 2D similarity-transform algebra.

Conventions used throughout the library:

* A pose maps object-frame points into the camera frame, ``x_cam = R @ x + t``,
  with the camera looking down +z, pixel u growing right and pixel v growing
  down.
* Pixel coordinates are continuous with integer values at pixel centers:
  pixel (row i, col j) has center (u=j, v=i).
* The in-plane angle ``alpha`` of an ``Affine2D`` is measured from +u toward
  +v (i.e. counterclockwise in (u, v) coordinates, with v pointing down on
  screen), so the 2x3 matrix is
  ``[[s cos a, -s sin a, t_u], [s sin a, s cos a, t_v]]``.
* 4-DoF affines map OBSERVATION pixels to TEMPLATE pixels everywhere in this
  library; dense position maps are built by applying them to the observation
  pixel grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InsufficientDataError, InvalidParameterError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid object-to-camera transform: rotation (3x3) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidParameterError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise InvalidParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidParameterError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def transform(self, points):
        """Map object-frame points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, points):
        """Map camera-frame points (..., 3) back into the object frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    @property
    def viewing_direction(self):
        """Camera optical axis (+z) expressed in the object frame."""
        return self.rotation[2, :].copy()

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose equivalent to applying `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def to_json(self) -> dict:
        return {"R": self.rotation.tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(np.array(obj["R"], dtype=np.float64),
                   np.array(obj["t"], dtype=np.float64))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Pose":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, obj: dict) -> "Intrinsics":
        return cls(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]))


@dataclass(frozen=True)
class Affine2D:
    """4-DoF similarity transform: in-plane rotation, scale, 2D translation.

    Maps observation pixels to template pixels (see module docstring).
    """

    alpha: float
    scale: float
    t_u: float
    t_v: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidParameterError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(0.0, 1.0, 0.0, 0.0)

    @property
    def matrix(self):
        """The 2x3 matrix [[s cos a, -s sin a, t_u], [s sin a, s cos a, t_v]]."""
        c = self.scale * math.cos(self.alpha)
        s = self.scale * math.sin(self.alpha)
        return np.array([[c, -s, self.t_u], [s, c, self.t_v]])

    @classmethod
    def from_matrix(cls, m, tol=1e-6) -> "Affine2D":
        """Decompose a 2x3 similarity matrix back into (alpha, scale, t)."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 3):
            raise InvalidParameterError(f"expected a 2x3 matrix, got {m.shape}")
        scale = math.hypot(m[0, 0], m[1, 0])
        if scale <= 0:
            raise InvalidParameterError("matrix has non-positive scale")
        if abs(m[0, 0] - m[1, 1]) > tol * max(1.0, scale) or \
           abs(m[0, 1] + m[1, 0]) > tol * max(1.0, scale):
            raise InvalidParameterError("matrix is not a similarity transform")
        alpha = math.atan2(m[1, 0], m[0, 0])
        return cls(alpha, scale, float(m[0, 2]), float(m[1, 2]))

    def apply(self, points):
        """Apply to points (..., 2): M @ [u, v, 1]^T."""
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return pts @ m[:, :2].T + m[:, 2]

    def compose(self, other: "Affine2D") -> "Affine2D":
        """Return self∘other (apply `other` first)."""
        alpha = self.alpha + other.alpha
        scale = self.scale * other.scale
        t = self.apply([other.t_u, other.t_v])
        return Affine2D(alpha, scale, float(t[0]), float(t[1]))

    def invert(self) -> "Affine2D":
        inv_scale = 1.0 / self.scale
        c = math.cos(-self.alpha) * inv_scale
        s = math.sin(-self.alpha) * inv_scale
        tu = -(c * self.t_u - s * self.t_v)
        tv = -(s * self.t_u + c * self.t_v)
        return Affine2D(-self.alpha, inv_scale, tu, tv)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "scale": self.scale, "t": [self.t_u, self.t_v]}

    @classmethod
    def from_json(cls, obj: dict) -> "Affine2D":
        return cls(float(obj["alpha"]), float(obj["scale"]),
                   float(obj["t"][0]), float(obj["t"][1]))


def affine_matrix(a: Affine2D):
    """2x3 matrix form of a 4-DoF transform."""
    return a.matrix


def affine_apply(a: Affine2D, point):
    """Apply the transform to a single 2D point or an array of points."""
    return a.apply(point)


def affine_invert(a: Affine2D) -> Affine2D:
    return a.invert()


def project(k: Intrinsics, pose: Pose, points):
    """Pinhole-project object-frame points (..., 3) to pixels (..., 2).

    Raises BehindCameraError if any point has camera-frame z <= 0.
    """
    cam = pose.transform(points)
    z = cam[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    u = k.fx * cam[..., 0] / z + k.cx
    v = k.fy * cam[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def _fit_similarity_complex(src, dst):
    """Least-squares 4-DoF fit mapping src (N,2) onto dst (N,2).

    Returns (w, b) complex such that dst ≈ w*src + b in complex form.
    Raises InsufficientDataError when src points are (near-)coincident.
    """
    p = src[:, 0] + 1j * src[:, 1]
    q = dst[:, 0] + 1j * dst[:, 1]
    pm = p.mean()
    qm = q.mean()
    pc = p - pm
    denom = np.vdot(pc, pc).real
    if denom < 1e-18:
        raise InsufficientDataError("source points are coincident; similarity fit is degenerate")
    w = np.vdot(pc, q - qm) / denom
    b = qm - w * pm
    return w, b


def similarity_from_complex(w, b) -> Affine2D:
    scale = abs(w)
    if scale <= 0:
        raise InvalidParameterError("degenerate similarity (zero scale)")
    return Affine2D(math.atan2(w.imag, w.real), scale, b.real, b.imag)


def gt_affine_between(query: Pose, template: Pose, k: Intrinsics, points,
                      crop_query: Affine2D | None = None,
                      crop_template: Affine2D | None = None):
    """Ground-truth observation→template 4-DoF affine between two views.

    Projects the given object-frame surface `points` (N,3) under both poses,
    maps each projection into its crop frame, and least-squares fits the
    4-DoF transform taking query-crop pixels onto template-crop pixels.
    Exact whenever the relative rotation is purely about the optical axis.

    Returns (Affine2D, rms_residual_px). Points behind either camera are
    dropped; fewer than 2 surviving points raises InsufficientDataError.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    zq = query.transform(pts)[:, 2]
    zt = template.transform(pts)[:, 2]
    visible = (zq > 0) & (zt > 0)
    if visible.sum() < 2:
        raise InsufficientDataError("fewer than 2 surface points visible in both views")
    pts = pts[visible]
    px_q = project(k, query, pts)
    px_t = project(k, template, pts)
    if crop_query is not None:
        px_q = crop_query.invert().apply(px_q)
    if crop_template is not None:
        px_t = crop_template.invert().apply(px_t)
    w, b = _fit_similarity_complex(px_q, px_t)
    affine = similarity_from_complex(w, b)
    residual = affine.apply(px_q) - px_t
    rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    return affine, rms


def look_at_pose(camera_center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at `camera_center` looking at `target` (object frame).

    The camera +z axis points at the target; `up` fixes the roll (falls back
    to +x when the viewing direction is parallel to `up`).
    """
    c = np.asarray(camera_center, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    fwd = tgt - c
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise InvalidParameterError("camera center coincides with the look-at target")
    z_axis = fwd / norm
    up = np.asarray(up, dtype=np.float64)
    x_axis = np.cross(up, z_axis)
    if np.linalg.norm(x_axis) < 1e-6:
        x_axis = np.cross([1.0, 0.0, 0.0], z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    r = np.stack([x_axis, y_axis, z_axis])
    return Pose(r, -r @ c)


def rotate_in_camera_frame(pose: Pose, axis_angle) -> Pose:
    """Premultiply a pose by a camera-frame rotation given as an axis-angle vector."""
    q = rotation_from_axis_angle(axis_angle)
    return Pose(q @ pose.rotation, q @ pose.translation)


def rotation_from_axis_angle(axis_angle):
    """Rodrigues formula: axis-angle vector (3,) to rotation matrix."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def rotation_geodesic_deg(r1, r2) -> float:
    """Geodesic distance between two rotation matrices, degrees."""
    cos_angle = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
