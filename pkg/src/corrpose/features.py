"""Stage 1: feature maps, procedural providers, template scoring, coarse matches.

The procedural provider stands in for a frozen patch-feature backbone at desk
scale: a descriptor is a random-Fourier-feature encoding of the patch's mean
3D surface point under a fixed seeded projection, so the same surface point
yields the same noiseless descriptor in any view and the cosine similarity of
two descriptors decays as exp(-d^2 / (2 ell^2)) in 3D surface distance d.
Background patches draw from an independent seeded population.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (DimensionMismatchError, EmptyForegroundError, FormatError,
                     InsufficientDataError, InvalidParameterError)
from .interp import masked_gather_bilinear

FEAT_MAGIC = b"PICOFEAT"
FEAT_VERSION = 1

DEFAULT_ENCODER_SEED = 7


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """H_f x W_f grid of D-dimensional descriptors with a foreground mask."""

    grid: np.ndarray
    mask: np.ndarray
    patch_size: float

    def __post_init__(self):
        grid = np.asarray(self.grid)
        mask = np.asarray(self.mask, dtype=bool)
        if grid.ndim != 3 or grid.shape[2] < 1:
            raise InvalidParameterError(f"feature grid must be HxWxD, got {grid.shape}")
        if mask.shape != grid.shape[:2]:
            raise DimensionMismatchError("mask shape does not match feature grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "mask", mask)

    @property
    def dim(self):
        return self.grid.shape[2]

    @property
    def grid_shape(self):
        return self.grid.shape[:2]

    @property
    def vectors(self):
        """Flat (N, D) view, row-major over the patch grid."""
        return self.grid.reshape(-1, self.dim)

    @property
    def flat_mask(self):
        return self.mask.reshape(-1)

    def normalized(self) -> "FeatureMap":
        """Unit-L2 rows; zero vectors are left zero and dropped from the mask."""
        vecs = self.grid.astype(np.float64)
        norms = np.linalg.norm(vecs, axis=-1)
        nonzero = norms > 0
        out = np.where(nonzero[..., None], vecs / np.maximum(norms, 1e-300)[..., None], 0.0)
        return FeatureMap(out, self.mask & nonzero, self.patch_size)

    def patch_centers(self):
        """(H_f, W_f, 2) pixel-center coordinates of every patch."""
        hf, wf = self.grid_shape
        us = (np.arange(wf) + 0.5) * self.patch_size - 0.5
        vs = (np.arange(hf) + 0.5) * self.patch_size - 0.5
        uu, vv = np.meshgrid(us, vs)
        return np.stack([uu, vv], axis=-1)


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Cosine-similarity matrix, rows = observation patches, cols = template patches."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvalidParameterError("correspondence map must be 2D")
        object.__setattr__(self, "values", v)


class RandomFourierEncoder:
    """Fixed seeded map from 3D points to D-dim descriptors.

    E[z(x) . z(y)] = exp(-|x - y|^2 / (2 ell^2)) with ell = corr_frac * length_scale,
    so corr_frac controls how fast descriptors decorrelate along the surface.
    """

    def __init__(self, dim, length_scale=1.0, corr_frac=0.05, seed=DEFAULT_ENCODER_SEED):
        if dim < 8:
            raise InvalidParameterError("descriptor dimension must be >= 8")
        ell = corr_frac * length_scale
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.freq = rng.normal(0.0, 1.0 / ell, size=(3, dim))
        self.phase = rng.uniform(0.0, 2 * np.pi, size=dim)

    def encode(self, points):
        """points (..., 3) -> descriptors (..., dim), approximately unit norm."""
        pts = np.asarray(points, dtype=np.float64)
        return np.sqrt(2.0 / self.dim) * np.cos(pts @ self.freq + self.phase)


def _background_population(rng, count, dim):
    vecs = rng.normal(size=(count, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def procedural_features(xyz, mask, seed, noise_sigma=0.0, dim=64, patch_size=14,
                        length_scale=1.0, corr_frac=0.05,
                        encoder_seed=DEFAULT_ENCODER_SEED) -> FeatureMap:
    """Patch descriptors from a per-pixel coordinate map.

    A patch is foreground when at least half its pixels are masked; its
    descriptor encodes the mean of the masked pixels' 3D points. Background
    patches draw from a population seeded by `seed`, and Gaussian noise of
    scale noise_sigma is added everywhere. Identical inputs are bit-identical.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise InvalidParameterError("image size must divide into whole patches")
    hf, wf = h // patch_size, w // patch_size
    m = mask.reshape(hf, patch_size, wf, patch_size)
    counts = m.sum(axis=(1, 3))
    fg = counts >= (patch_size * patch_size) / 2.0
    pts = np.nan_to_num(np.asarray(xyz, dtype=np.float64))
    pts = pts.reshape(hf, patch_size, wf, patch_size, 3)
    sums = (pts * m[..., None]).sum(axis=(1, 3))
    means = sums / np.maximum(counts, 1)[..., None]

    encoder = RandomFourierEncoder(dim, length_scale, corr_frac, encoder_seed)
    grid = encoder.encode(means)
    rng = np.random.default_rng(seed)
    background = _background_population(rng, hf * wf, dim).reshape(hf, wf, dim)
    grid = np.where(fg[..., None], grid, background)
    if noise_sigma > 0:
        grid = grid + rng.normal(0.0, noise_sigma, size=grid.shape)
    return FeatureMap(grid, fg, float(patch_size))


def procedural_block_features(xyz, mask, grid_hw, seed, noise_sigma=0.0, dim=256,
                              length_scale=1.0, corr_frac=0.05,
                              encoder_seed=DEFAULT_ENCODER_SEED) -> FeatureMap:
    """Block-resolution descriptors for the local-refinement stage.

    Cells sample the coordinate map at their centers (mask-aware bilinear) and
    are encoded with the same construction as `procedural_features`, so block
    descriptors of the same surface point also match across views.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    gh, gw = grid_hw
    us = (np.arange(gw) + 0.5) * w / gw - 0.5
    vs = (np.arange(gh) + 0.5) * h / gh - 0.5
    uu, vv = np.meshgrid(us, vs)
    centers = np.stack([uu, vv], axis=-1)
    pts, valid = masked_gather_bilinear(np.nan_to_num(np.asarray(xyz, dtype=np.float64)),
                                        mask, centers, min_weight=0.5)
    encoder = RandomFourierEncoder(dim, length_scale, corr_frac, encoder_seed)
    grid = encoder.encode(pts)
    rng = np.random.default_rng(seed)
    background = _background_population(rng, gh * gw, dim).reshape(gh, gw, dim)
    grid = np.where(valid[..., None], grid, background)
    if noise_sigma > 0:
        grid = grid + rng.normal(0.0, noise_sigma, size=grid.shape)
    return FeatureMap(grid, valid, float(w) / gw)


# ---------------------------------------------------------------------------
# correspondence map, scoring, coarse matches

def correspondence_map(f_obs: FeatureMap, f_tpl: FeatureMap) -> CorrespondenceMap:
    """All-pairs inner products of (already normalized) patch features."""
    if f_obs.dim != f_tpl.dim:
        raise DimensionMismatchError(
            f"feature dims differ: {f_obs.dim} vs {f_tpl.dim}")
    return CorrespondenceMap(f_obs.vectors @ f_tpl.vectors.T)


def template_score(f_obs: FeatureMap, f_tpl: FeatureMap,
                   template_foreground_only=False) -> float:
    """Mean over observation foreground patches of the max cosine similarity.

    The max runs over all template patches by default;
    template_foreground_only restricts it to the template foreground.
    """
    obs_n = f_obs.normalized()
    tpl_n = f_tpl.normalized()
    fg = obs_n.flat_mask
    if not fg.any():
        raise EmptyForegroundError("observation has no foreground patches")
    tpl_vecs = tpl_n.vectors
    if template_foreground_only:
        tpl_vecs = tpl_vecs[tpl_n.flat_mask]
        if len(tpl_vecs) == 0:
            raise EmptyForegroundError("template has no foreground patches")
    sims = obs_n.vectors[fg] @ tpl_vecs.T
    return float(sims.max(axis=1).mean())


def select_best_template(f_obs: FeatureMap, templates, top_k=1,
                         template_foreground_only=False):
    """Rank templates by score, descending; ties break toward the lower index.

    Returns (indices, scores) of the top_k templates.
    """
    if len(templates) == 0:
        raise InsufficientDataError("empty template list")
    if top_k < 1:
        raise InvalidParameterError("top_k must be >= 1")
    scores = np.array([template_score(f_obs, t, template_foreground_only)
                       for t in templates])
    order = np.argsort(-scores, kind="stable")[:top_k]
    return order, scores[order]


@dataclass(frozen=True, eq=False)
class CoarseMatches:
    """Per-patch argmax matches: one pair per surviving observation patch."""

    obs_indices: np.ndarray
    tpl_indices: np.ndarray
    sims: np.ndarray
    obs_px: np.ndarray
    tpl_px: np.ndarray

    def __len__(self):
        return len(self.obs_indices)


def coarse_correspondences(a: CorrespondenceMap, obs_mask, min_sim=0.3,
                           patch_size=14.0, obs_grid_shape=None,
                           tpl_grid_shape=None, tpl_mask=None) -> CoarseMatches:
    """Argmax template patch for each foreground observation patch.

    Pairs below min_sim are dropped; ties in the argmax resolve to the lowest
    template index. Patch indices convert to pixel centers at patch_size
    granularity. May return an empty set.
    """
    obs_mask = np.asarray(obs_mask, dtype=bool)
    if obs_grid_shape is None:
        obs_grid_shape = obs_mask.shape
    values = a.values
    if tpl_grid_shape is None:
        side = int(round(np.sqrt(values.shape[1])))
        tpl_grid_shape = (side, side)
    fg = np.flatnonzero(obs_mask.reshape(-1))
    if len(fg) == 0:
        return CoarseMatches(*[np.empty(0, dtype=np.int64)] * 2, np.empty(0),
                             np.empty((0, 2)), np.empty((0, 2)))
    rows = values[fg]
    if tpl_mask is not None:
        cols = np.flatnonzero(np.asarray(tpl_mask, dtype=bool).reshape(-1))
        best_local = np.argmax(rows[:, cols], axis=1)
        best = cols[best_local]
    else:
        best = np.argmax(rows, axis=1)
    sims = rows[np.arange(len(fg)), best]
    keep = sims >= min_sim
    obs_idx, tpl_idx, sims = fg[keep], best[keep], sims[keep]

    def centers(indices, grid_shape):
        r, c = np.divmod(indices, grid_shape[1])
        return np.stack([(c + 0.5) * patch_size - 0.5,
                         (r + 0.5) * patch_size - 0.5], axis=-1)

    return CoarseMatches(obs_idx, tpl_idx, sims,
                         centers(obs_idx, obs_grid_shape),
                         centers(tpl_idx, tpl_grid_shape))


def loss_coarse_infonce(similarities, positives, temperature):
    """InfoNCE over rows of candidate similarities.

    similarities is (M, K); positives[i] is the column of the positive
    candidate in row i. Returns (loss, gradient w.r.t. similarities).
    """
    if temperature <= 0:
        raise InvalidParameterError("temperature must be positive")
    s = np.asarray(similarities, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise InsufficientDataError("need at least one positive pair")
    if s.shape[1] < 2:
        raise InsufficientDataError("need at least two candidates per row")
    m = s.shape[0]
    z = s / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_denom = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(m), pos] - log_denom
    loss = float(-log_p.mean())
    softmax = np.exp(z - log_denom[:, None])
    grad = softmax
    grad[np.arange(m), pos] -= 1.0
    grad /= temperature * m
    return loss, grad


# ---------------------------------------------------------------------------
# PICOFEAT container

def save_features(fmap: FeatureMap, path):
    """PICOFEAT binary: magic, u8 version, u32 H_f W_f D patch_size,
    f32 grid row-major, then H_f*W_f mask bytes. Little-endian throughout."""
    ps = fmap.patch_size
    if abs(ps - round(ps)) > 1e-9:
        raise InvalidParameterError("PICOFEAT stores integer patch sizes")
    hf, wf = fmap.grid_shape
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<BIIII", FEAT_VERSION, hf, wf, fmap.dim, int(round(ps))))
        f.write(np.ascontiguousarray(fmap.grid, dtype="<f4").tobytes())
        f.write(fmap.mask.astype(np.uint8).tobytes())


def load_features(path) -> FeatureMap:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise FormatError(f"file too short for magic: {path!r}", offset=len(data))
    if data[:8] != FEAT_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}", offset=0)
    header_end = 8 + struct.calcsize("<BIIII")
    if len(data) < header_end:
        raise FormatError("truncated header", offset=len(data))
    version, hf, wf, dim, patch_size = struct.unpack_from("<BIIII", data, 8)
    if version != FEAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    grid_bytes = hf * wf * dim * 4
    expected = header_end + grid_bytes + hf * wf
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes",
                          offset=len(data))
    grid = np.frombuffer(data, dtype="<f4", count=hf * wf * dim,
                         offset=header_end).reshape(hf, wf, dim)
    mask = np.frombuffer(data, dtype=np.uint8, count=hf * wf,
                         offset=header_end + grid_bytes).reshape(hf, wf) != 0
    return FeatureMap(grid.copy(), mask.copy(), float(patch_size))
