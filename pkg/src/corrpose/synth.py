"""Deterministic synthetic objects, template rendering, and scene generation.

Templates are rendered by casting rays through pixel centers against the mesh
(z-buffered Moller-Trumbore), so every masked pixel stores the exact
object-frame surface point of the nearest intersection; reprojection is exact
by construction. No lighting model beyond a flat face shade for the optional
rgb channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BehindCameraError, DegenerateError, FormatError,
                     InvalidParameterError)
from .geometry import (Affine2D, Intrinsics, Pose, gt_affine_between,
                       look_at_pose)
from .interp import masked_gather_bilinear

XYZ_MAGIC = b"PICOXYZ\x00"


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in the object frame (meters)."""

    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(v) < 4:
            raise InvalidParameterError("mesh needs at least 4 vertices")
        centered = v - v.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-12) < 3:
            raise InvalidParameterError("mesh vertices are coplanar")
        if t.min() < 0 or t.max() >= len(v):
            raise InvalidParameterError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.diameter <= 0:
            d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
            object.__setattr__(self, "diameter", float(np.sqrt(d2.max())))

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    def surface_samples(self, count=64):
        """Deterministic subset of vertices for ground-truth affine fits."""
        n = len(self.vertices)
        step = max(1, n // count)
        return self.vertices[::step][:count]


@dataclass(frozen=True, eq=False)
class Template:
    """Rendered view: per-pixel object-frame coordinates, mask, and pose.

    xyz is finite exactly where mask is true (NaN elsewhere).
    """

    xyz: np.ndarray
    mask: np.ndarray
    pose: Pose
    rgb: np.ndarray | None = None

    @property
    def size(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class SceneGT:
    """Ground truth for one synthetic observation.

    flow holds, for every observation pixel, the template-crop pixel of the
    same 3D surface point (extended by the ground-truth affine off the mask so
    it stays finite); certainty is 1 exactly where the observation pixel and
    its flow target see the same surface point (depth-consistent within
    1e-4 * diameter).
    """

    pose: Pose
    affine: Affine2D
    flow: np.ndarray
    certainty: np.ndarray
    affine_rms: float = 0.0


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Observation degradation switches for synthetic scenes."""

    feature_sigma: float = 0.0
    mask_dilate: int = 0
    mask_erode: int = 0
    seed: int = 0


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    observation: Template
    seg_mask: np.ndarray
    gt: SceneGT
    best_template_index: int
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    best_template_pose: Pose | None = None


# ---------------------------------------------------------------------------
# viewpoint sampling

def icosphere_directions(level: int):
    """Unit viewing directions from icosahedron subdivision: 12/42/162 points."""
    if level not in (0, 1, 2):
        raise InvalidParameterError("viewpoint level must be 0, 1, or 2")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), faces


def sample_viewpoints(level: int, radius: float = 1.0, target=(0.0, 0.0, 0.0)):
    """Icosphere viewpoints (12/42/162 for levels 0/1/2) looking at `target`."""
    directions, _ = icosphere_directions(level)
    tgt = np.asarray(target, dtype=np.float64)
    return [look_at_pose(tgt + radius * d, tgt) for d in directions]


# ---------------------------------------------------------------------------
# synthetic meshes

def make_cube_mesh(side=0.5, center=(0.0, 0.0, 0.0)) -> Mesh:
    h = side / 2.0
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)])
    faces = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
             (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
             (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return Mesh(corners + c, np.array(faces))


def make_blob_mesh(seed=0, subdivisions=2, diameter=0.30, bump_amplitude=0.22) -> Mesh:
    """Asymmetric star-convex blob: icosphere with a seeded radial bump field.

    Deliberately symmetry-free so pose recovery is well-posed.
    """
    directions, faces = icosphere_directions(subdivisions)
    rng = np.random.default_rng(seed)
    n_lobes = 6
    axes = rng.normal(size=(n_lobes, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    amps = rng.uniform(0.35, 1.0, n_lobes) * bump_amplitude
    freqs = rng.uniform(1.0, 2.5, n_lobes)
    phases = rng.uniform(0, 2 * np.pi, n_lobes)
    radii = np.ones(len(directions))
    for a, amp, f, ph in zip(axes, amps, freqs, phases):
        radii += amp * np.sin(f * np.pi * (directions @ a) + ph)
    verts = directions * radii[:, None]
    verts -= verts.mean(axis=0)
    mesh = Mesh(verts, np.array(faces))
    return Mesh(mesh.vertices * (diameter / mesh.diameter), mesh.triangles)


# ---------------------------------------------------------------------------
# rendering

def render_template(mesh: Mesh, pose: Pose, k: Intrinsics, size, with_rgb=False) -> Template:
    """Z-buffered ray-cast render of the mesh into a Template.

    Raises BehindCameraError when any vertex is behind the camera and
    DegenerateError when the render covers no pixels.
    """
    h, w = size
    cam_verts = pose.transform(mesh.vertices)
    if np.any(cam_verts[:, 2] <= 0):
        raise BehindCameraError("object is not fully in front of the camera")
    px = np.stack([k.fx * cam_verts[:, 0] / cam_verts[:, 2] + k.cx,
                   k.fy * cam_verts[:, 1] / cam_verts[:, 2] + k.cy], axis=1)

    zbuf = np.full((h, w), np.inf)
    xyz = np.full((h, w, 3), np.nan)
    shade = np.zeros((h, w)) if with_rgb else None

    for tri in mesh.triangles:
        tpx = px[tri]
        u0 = max(0, int(np.floor(tpx[:, 0].min())))
        u1 = min(w - 1, int(np.ceil(tpx[:, 0].max())))
        v0 = max(0, int(np.floor(tpx[:, 1].min())))
        v1 = min(h - 1, int(np.ceil(tpx[:, 1].max())))
        if u1 < u0 or v1 < v0:
            continue
        us, vs = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        # rays through pixel centers; direction z-component is 1, so the ray
        # parameter equals camera depth
        d = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)],
                     axis=-1)
        a, b, c = cam_verts[tri]
        e1, e2 = b - a, c - a
        hvec = np.cross(d, e2)
        det = hvec @ e1
        qvec = np.cross(-a, e1)  # ray origin is the camera center (0,0,0)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_det = np.where(np.abs(det) > 1e-14, 1.0 / det, 0.0)
            ub = (hvec @ -a) * inv_det
            vb = (d @ qvec) * inv_det
            tray = float(e2 @ qvec) * inv_det
        hit = (np.abs(det) > 1e-14) & (ub >= -1e-12) & (vb >= -1e-12) & \
              (ub + vb <= 1 + 1e-12) & (tray > 0)
        if not hit.any():
            continue
        sub_z = zbuf[v0:v1 + 1, u0:u1 + 1]
        closer = hit & (tray < sub_z)
        if not closer.any():
            continue
        sub_z[closer] = tray[closer]
        p_cam = tray[..., None] * d
        p_obj = pose.inverse_transform(p_cam)
        xyz[v0:v1 + 1, u0:u1 + 1][closer] = p_obj[closer]
        if with_rgb:
            n = np.cross(e1, e2)
            n /= np.linalg.norm(n)
            shade[v0:v1 + 1, u0:u1 + 1][closer] = 0.25 + 0.75 * abs(n[2])

    mask = np.isfinite(zbuf)
    if not mask.any():
        raise DegenerateError("render produced an empty mask")
    rgb = None
    if with_rgb:
        gray = np.clip(shade * 255, 0, 255).astype(np.uint8)
        rgb = np.stack([gray, gray, gray], axis=-1)
    return Template(xyz=xyz, mask=mask, pose=pose, rgb=rgb)


# ---------------------------------------------------------------------------
# scene generation

def nearest_viewpoint_index(query: Pose, template_poses) -> int:
    """Index of the template whose viewing direction is closest to the query's.

    The in-plane component is ignored by construction (directions only).
    """
    qd = query.viewing_direction
    dots = np.array([float(np.dot(qd, p.viewing_direction)) for p in template_poses])
    return int(np.argmax(dots))


def _binary_shift_op(mask, radius, op):
    out = mask.copy()
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            if dv == 0 and du == 0:
                continue
            shifted = np.zeros_like(mask)
            src = mask[max(0, -dv):mask.shape[0] - max(0, dv),
                       max(0, -du):mask.shape[1] - max(0, du)]
            shifted[max(0, dv):mask.shape[0] + min(0, dv),
                    max(0, du):mask.shape[1] + min(0, du)] = src
            out = op(out, shifted)
    return out


def perturb_mask(mask, dilate=0, erode=0):
    out = mask
    if dilate > 0:
        out = _binary_shift_op(out, dilate, np.logical_or)
    if erode > 0:
        out = ~_binary_shift_op(~out, erode, np.logical_or)
    return out


def sample_template_xyz(template: Template, positions):
    """Mask-aware bilinear sample of the template coordinate map.

    positions is (..., 2) in (u, v). Returns (values (..., 3), valid (...,)):
    corners off the mask are dropped and the remaining bilinear weights are
    renormalized; samples with no masked corner are invalid.
    """
    return masked_gather_bilinear(template.xyz, template.mask, positions)


def flow_ground_truth(mesh: Mesh, obs: Template, tpl: Template, k: Intrinsics,
                      depth_consistency_frac=1e-4):
    """Dense ground-truth flow and certainty of an observation against a template.

    For each masked observation pixel, the flow holds the template pixel of
    the same 3D surface point; off the mask it is extended by the ground-truth
    4-DoF affine so the map stays finite. Certainty is 1 exactly where the
    flow target sees the same surface point (mask-aware bilinear lookup, depth
    consistent within depth_consistency_frac * diameter).

    Returns (flow (H, W, 2), certainty (H, W), affine, affine_rms).
    """
    affine, rms = gt_affine_between(obs.pose, tpl.pose, k, mesh.surface_samples(64))
    h, w = obs.mask.shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([us, vs], axis=-1)
    flow = affine.apply(grid)

    if obs.mask.any():
        pts = obs.xyz[obs.mask]
        cam_t = tpl.pose.transform(pts)
        in_front = cam_t[:, 2] > 0
        proj = np.full((len(pts), 2), np.nan)
        proj[in_front] = np.stack([k.fx * cam_t[in_front, 0] / cam_t[in_front, 2] + k.cx,
                                   k.fy * cam_t[in_front, 1] / cam_t[in_front, 2] + k.cy], axis=1)
        masked_flow = flow[obs.mask]
        masked_flow[in_front] = proj[in_front]
        flow[obs.mask] = masked_flow

    certainty = np.zeros((h, w))
    if obs.mask.any():
        sampled, valid = sample_template_xyz(tpl, flow[obs.mask])
        consistent = valid & (np.linalg.norm(sampled - np.nan_to_num(obs.xyz[obs.mask]), axis=-1)
                              < depth_consistency_frac * mesh.diameter)
        certainty[obs.mask] = consistent.astype(np.float64)
    return flow, certainty, affine, rms


def make_scene(mesh: Mesh, query_pose: Pose, k: Intrinsics, size,
               template_poses, templates=None,
               noise: NoiseConfig | None = None,
               depth_consistency_frac=1e-4) -> SyntheticScene:
    """Render a query view and derive full ground truth against a template set.

    template_poses is the onboarded viewpoint list; `templates` optionally
    supplies the matching rendered templates (the best one is re-rendered when
    omitted). Certainty is 1 exactly where the observation pixel and its flow
    target land on the same surface point within
    depth_consistency_frac * diameter.
    """
    noise = noise or NoiseConfig()
    try:
        obs = render_template(mesh, query_pose, k, size, with_rgb=True)
    except DegenerateError as exc:
        raise DegenerateError(f"degenerate scene: {exc}") from exc

    best = nearest_viewpoint_index(query_pose, template_poses)
    tpl_pose = template_poses[best]
    if templates is not None:
        tpl = templates[best]
    else:
        tpl = render_template(mesh, tpl_pose, k, size)

    flow, certainty, affine, rms = flow_ground_truth(mesh, obs, tpl, k,
                                                     depth_consistency_frac)
    gt = SceneGT(pose=query_pose, affine=affine, flow=flow, certainty=certainty,
                 affine_rms=rms)
    seg = perturb_mask(obs.mask, noise.mask_dilate, noise.mask_erode)
    return SyntheticScene(observation=obs, seg_mask=seg, gt=gt,
                          best_template_index=best, noise=noise,
                          best_template_pose=tpl_pose)


# ---------------------------------------------------------------------------
# persistence: PICOXYZ binary, PGM masks, OBJ meshes

def save_xyz(xyz, path):
    """Little-endian binary coordinate map: magic, u32 H, W, f32 triples."""
    h, w, _ = xyz.shape
    with open(path, "wb") as f:
        f.write(XYZ_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(xyz, dtype="<f4").tobytes())


def load_xyz(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != XYZ_MAGIC:
        raise FormatError(f"bad magic in {path!r}", offset=0)
    if len(data) < 16:
        raise FormatError("truncated header", offset=len(data))
    h, w = struct.unpack_from("<II", data, 8)
    expected = 16 + h * w * 3 * 4
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", offset=len(data))
    return np.frombuffer(data, dtype="<f4", count=h * w * 3, offset=16).reshape(h, w, 3).astype(np.float64)


def save_pgm_mask(mask, path):
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write((mask.astype(np.uint8) * 255).tobytes())


def load_pgm_mask(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"not a binary PGM: {path!r}", offset=0)
    fields, idx = [], 2
    while len(fields) < 3:
        while idx < len(data) and data[idx:idx + 1].isspace():
            idx += 1
        if idx < len(data) and data[idx:idx + 1] == b"#":
            while idx < len(data) and data[idx] != 0x0A:
                idx += 1
            continue
        start = idx
        while idx < len(data) and not data[idx:idx + 1].isspace():
            idx += 1
        fields.append(int(data[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, _ = fields
    if len(data) < idx + w * h:
        raise FormatError("truncated PGM payload", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=idx).reshape(h, w) > 127


def save_template(template: Template, prefix):
    """Persist as <prefix>.xyz / <prefix>.pgm / <prefix>_pose.json."""
    save_xyz(np.nan_to_num(template.xyz), f"{prefix}.xyz")
    save_pgm_mask(template.mask, f"{prefix}.pgm")
    template.pose.save(f"{prefix}_pose.json")


def load_template(prefix) -> Template:
    xyz = load_xyz(f"{prefix}.xyz")
    mask = load_pgm_mask(f"{prefix}.pgm")
    xyz = np.where(mask[..., None], xyz, np.nan)
    return Template(xyz=xyz, mask=mask, pose=Pose.load(f"{prefix}_pose.json"))


def save_obj(mesh: Mesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path) -> Mesh:
    """ASCII OBJ reader, v/f records only (f indices may carry //-suffixes)."""
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[i], idx[i + 1]])
    if not verts:
        raise FormatError(f"no vertices in OBJ file {path!r}")
    return Mesh(np.array(verts), np.array(faces))
