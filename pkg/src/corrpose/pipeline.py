"""End-to-end orchestration: onboarding, estimation, and the experiment harness.

Estimation runs template scoring + coarse pairs over the top-k templates,
then per hypothesis: robust 4-DoF fit -> dense position map -> multi-scale
local refinement -> 2D-3D pair assembly -> EPnP/RANSAC, and keeps the
hypothesis with the most inliers (ties by lower reprojection RMS). All
randomness derives from the config seed plus stable per-template offsets, so
results are identical across runs, worker counts, and top-k supersets.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import features, metrics, pnp, stage2, stage3, synth
from .errors import (CorrposeError, DegenerateError, EmptyForegroundError,
                     InsufficientDataError, InvalidParameterError, NoModelError,
                     NoPoseError)
from .geometry import Affine2D, Intrinsics, Pose, rotate_in_camera_frame
from .interp import identity_grid

_STAGE2_SALT = 0x5A2
_PNP_SALT = 0x9E9


@dataclass(frozen=True)
class FeatureConfig:
    provider: str = "procedural"      # "procedural" or "file"
    patch_dim: int = 64
    block_dim: int = 256
    patch_corr_frac: float = 0.05
    block_corr_fracs: tuple = (0.05, 0.04, 0.03)
    noise_sigma: float = 0.0          # observation featurization noise
    encoder_seed: int = features.DEFAULT_ENCODER_SEED


@dataclass(frozen=True)
class Stage3Config:
    block_sizes: tuple = ((16, 16), (32, 32), (64, 64))
    radius: int = 4
    temperature: float = 0.1
    offset_gate: float = 0.5


@dataclass(frozen=True)
class PnpConfig:
    iterations: int = 150
    reproj_threshold: float = 2.0
    certainty_threshold: float = 0.5
    pair_cap: int = 2000


@dataclass(frozen=True)
class PipelineConfig:
    image_size: tuple = (224, 224)
    patch_size: int = 14
    template_level: int = 2
    template_radius_factor: float = 2.2
    top_k: int = 1
    min_sim: float = 0.3
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    # inlier threshold = patch_size/2: coarse pairs are patch centers, so
    # correct pairs carry up to half a patch of quantization error
    stage2: stage2.RansacConfig = field(
        default_factory=lambda: stage2.RansacConfig(inlier_threshold=7.0))
    stage3: Stage3Config = field(default_factory=Stage3Config)
    pnp: PnpConfig = field(default_factory=PnpConfig)
    lambda_fine: float = 1.0
    mu_fine: float = 1.0
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(350.0, 350.0, 111.5, 111.5))
    seed: int = 0
    eval_stage1_pose: bool = True
    eval_stage2_pose: bool = False

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise InvalidParameterError("image size must be divisible by patch_size")
        if self.top_k < 1:
            raise InvalidParameterError("top_k must be >= 1")
        sizes = list(self.stage3.block_sizes)
        for a, b in zip(sizes, sizes[1:]):
            if not (b[0] >= a[0] and b[1] >= a[1]):
                raise InvalidParameterError("block sizes must be ascending")

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "template_level": self.template_level,
            "template_radius_factor": self.template_radius_factor,
            "top_k": self.top_k,
            "min_sim": self.min_sim,
            "feature": {
                "provider": self.feature.provider,
                "patch_dim": self.feature.patch_dim,
                "block_dim": self.feature.block_dim,
                "patch_corr_frac": self.feature.patch_corr_frac,
                "block_corr_fracs": list(self.feature.block_corr_fracs),
                "noise_sigma": self.feature.noise_sigma,
                "encoder_seed": self.feature.encoder_seed,
            },
            "stage2": {
                "iterations": self.stage2.iterations,
                "inlier_threshold": self.stage2.inlier_threshold,
                "min_inliers": self.stage2.min_inliers,
                "seed": self.stage2.seed,
            },
            "stage3": {
                "block_sizes": [list(b) for b in self.stage3.block_sizes],
                "radius": self.stage3.radius,
                "temperature": self.stage3.temperature,
                "offset_gate": self.stage3.offset_gate,
            },
            "pnp": {
                "iterations": self.pnp.iterations,
                "reproj_threshold": self.pnp.reproj_threshold,
                "certainty_threshold": self.pnp.certainty_threshold,
                "pair_cap": self.pnp.pair_cap,
            },
            "lambda_fine": self.lambda_fine,
            "mu_fine": self.mu_fine,
            "intrinsics": self.intrinsics.to_json(),
            "seed": self.seed,
            "eval_stage1_pose": self.eval_stage1_pose,
            "eval_stage2_pose": self.eval_stage2_pose,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        base = cls()
        feat = {**base.feature.__dict__, **obj.get("feature", {})}
        feat["block_corr_fracs"] = tuple(feat["block_corr_fracs"])
        s2 = {f: getattr(base.stage2, f) for f in ("iterations", "inlier_threshold", "min_inliers", "seed")}
        s2.update(obj.get("stage2", {}))
        s3 = {**base.stage3.__dict__, **obj.get("stage3", {})}
        s3["block_sizes"] = tuple(tuple(b) for b in s3["block_sizes"])
        pnp_cfg = {**base.pnp.__dict__, **obj.get("pnp", {})}
        intr = obj.get("intrinsics")
        return cls(
            image_size=tuple(obj.get("image_size", base.image_size)),
            patch_size=obj.get("patch_size", base.patch_size),
            template_level=obj.get("template_level", base.template_level),
            template_radius_factor=obj.get("template_radius_factor", base.template_radius_factor),
            top_k=obj.get("top_k", base.top_k),
            min_sim=obj.get("min_sim", base.min_sim),
            feature=FeatureConfig(**feat),
            stage2=stage2.RansacConfig(**s2),
            stage3=Stage3Config(**s3),
            pnp=PnpConfig(**pnp_cfg),
            lambda_fine=obj.get("lambda_fine", base.lambda_fine),
            mu_fine=obj.get("mu_fine", base.mu_fine),
            intrinsics=Intrinsics.from_json(intr) if intr else base.intrinsics,
            seed=obj.get("seed", base.seed),
            eval_stage1_pose=obj.get("eval_stage1_pose", base.eval_stage1_pose),
            eval_stage2_pose=obj.get("eval_stage2_pose", base.eval_stage2_pose),
        )

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _derived_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# feature providers

class ProceduralFeatureProvider:
    """Geometry-derived descriptors standing in for the frozen backbone."""

    def __init__(self, cfg: PipelineConfig, length_scale: float):
        self.cfg = cfg
        self.length_scale = length_scale

    def patch_features(self, xyz, mask, seed, noise_sigma) -> features.FeatureMap:
        f = self.cfg.feature
        return features.procedural_features(
            xyz, mask, seed=seed, noise_sigma=noise_sigma, dim=f.patch_dim,
            patch_size=self.cfg.patch_size, length_scale=self.length_scale,
            corr_frac=f.patch_corr_frac, encoder_seed=f.encoder_seed).normalized()

    def block_features(self, xyz, mask, seed, noise_sigma):
        f = self.cfg.feature
        out = []
        for level, size in enumerate(self.cfg.stage3.block_sizes):
            frac = f.block_corr_fracs[min(level, len(f.block_corr_fracs) - 1)]
            fmap = features.procedural_block_features(
                xyz, mask, size, seed=_derived_seed(seed, level),
                noise_sigma=noise_sigma, dim=f.block_dim,
                length_scale=self.length_scale, corr_frac=frac,
                encoder_seed=_derived_seed(f.encoder_seed, 1 + level))
            out.append(features.FeatureMap(fmap.grid.astype(np.float32), fmap.mask,
                                           fmap.patch_size))
        return out


class FileFeatureProvider:
    """Patch features come from PICOFEAT files; block maps are upsampled."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg

    @staticmethod
    def patch_features(fmap: features.FeatureMap) -> features.FeatureMap:
        return fmap.normalized()

    def block_features(self, patch_map: features.FeatureMap):
        from .interp import resize_field
        out = []
        for size in self.cfg.stage3.block_sizes:
            grid = resize_field(patch_map.grid.astype(np.float64), size, extrapolate=False)
            mask = resize_field(patch_map.mask.astype(np.float64), size,
                                extrapolate=False) > 0.5
            h, w = self.cfg.image_size
            out.append(features.FeatureMap(grid.astype(np.float32), mask, w / size[1]))
        return out


# ---------------------------------------------------------------------------
# onboarding

@dataclass(frozen=True, eq=False)
class TemplateSet:
    """Immutable onboarded object: templates, poses, normalized patch features."""

    templates: list
    poses: list
    patch_features: list
    intrinsics: Intrinsics
    level: int
    diameter: float
    config: PipelineConfig

    def __len__(self):
        return len(self.templates)

    def viewing_directions(self):
        return np.stack([p.viewing_direction for p in self.poses])


@dataclass(frozen=True, eq=False)
class Observation:
    """One detected crop: mask plus either a coordinate map (procedural mode)
    or precomputed feature maps (file mode)."""

    mask: np.ndarray
    xyz: np.ndarray | None = None
    patch_features: features.FeatureMap | None = None
    block_features: list | None = None
    crop_frame: Affine2D | None = None
    feature_seed: int = 0


def onboard(mesh: synth.Mesh, config: PipelineConfig) -> TemplateSet:
    """Render and featurize the template set (162 views at level 2)."""
    radius = config.template_radius_factor * mesh.diameter
    poses = synth.sample_viewpoints(config.template_level, radius,
                                    target=mesh.centroid)
    provider = ProceduralFeatureProvider(config, mesh.diameter)
    templates, fmaps = [], []
    for i, pose in enumerate(poses):
        try:
            tpl = synth.render_template(mesh, pose, config.intrinsics, config.image_size)
        except CorrposeError as exc:
            raise type(exc)(f"template {i}: {exc}") from exc
        templates.append(tpl)
        fmaps.append(provider.patch_features(tpl.xyz, tpl.mask,
                                             seed=_derived_seed(config.seed, 0xF, i),
                                             noise_sigma=0.0))
    return TemplateSet(templates=templates, poses=poses, patch_features=fmaps,
                       intrinsics=config.intrinsics, level=config.template_level,
                       diameter=mesh.diameter, config=config)


def template_subset(tset: TemplateSet, count: int) -> list:
    """Farthest-point-sampling prefix over viewing directions.

    The FPS ordering is complete, so subsets of increasing counts are nested.
    """
    dirs = tset.viewing_directions()
    n = len(dirs)
    count = min(count, n)
    chosen = [0]
    dist = 1.0 - dirs @ dirs[0]
    while len(chosen) < count:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - dirs @ dirs[nxt])
    return chosen


# ---------------------------------------------------------------------------
# estimation

@dataclass(frozen=True, eq=False)
class HypothesisResult:
    template_index: int
    score: float
    affine: Affine2D
    stage2_fallback: bool
    n_coarse: int
    n_stage2_inliers: int
    estimate: pnp.PoseEstimate | None
    n_pairs: int
    error: str | None = None
    position_map: stage3.PositionMap | None = None
    certainty: stage3.CertaintyMap | None = None
    coarse: features.CoarseMatches | None = None


@dataclass(frozen=True, eq=False)
class StageDiagnostics:
    template_index: int = -1
    template_score: float = 0.0
    affine: Affine2D | None = None
    stage2_fallback: bool = False
    n_coarse_pairs: int = 0
    n_stage2_inliers: int = 0
    n_pnp_pairs: int = 0
    epe_stage1: float | None = None
    epe_stage2: float | None = None
    epe_stage3: float | None = None
    stage1_pose: pnp.PoseEstimate | None = None
    stage2_pose: pnp.PoseEstimate | None = None
    hypotheses: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)
    # populated only with keep_maps=True
    position_map: stage3.PositionMap | None = None
    certainty: stage3.CertaintyMap | None = None
    coarse: features.CoarseMatches | None = None


def _observation_features(obs: Observation, tset: TemplateSet, config: PipelineConfig):
    if config.feature.provider == "file":
        if obs.patch_features is None:
            raise InvalidParameterError("file provider needs precomputed patch features")
        fp = FileFeatureProvider(config)
        patch = fp.patch_features(obs.patch_features)
        blocks = obs.block_features or fp.block_features(patch)
        return patch, blocks
    if obs.xyz is None:
        raise InvalidParameterError("procedural provider needs an observation coordinate map")
    provider = ProceduralFeatureProvider(config, tset.diameter)
    patch = provider.patch_features(obs.xyz, obs.mask, seed=obs.feature_seed,
                                    noise_sigma=config.feature.noise_sigma)
    blocks = provider.block_features(obs.xyz, obs.mask, seed=_derived_seed(obs.feature_seed, 1),
                                     noise_sigma=config.feature.noise_sigma)
    return patch, blocks


def _template_blocks(tpl: synth.Template, index: int, tset: TemplateSet,
                     config: PipelineConfig):
    if config.feature.provider == "file":
        # both sides must share the upsampled-patch construction
        return FileFeatureProvider(config).block_features(tset.patch_features[index])
    provider = ProceduralFeatureProvider(config, tset.diameter)
    return provider.block_features(tpl.xyz, tpl.mask,
                                   seed=_derived_seed(config.seed, 0xB, index),
                                   noise_sigma=0.0)


def _stage1_dense_positions(coarse: features.CoarseMatches, obs_shape, patch_size):
    """Piecewise-translation dense map induced by the per-patch matches."""
    out = np.full(obs_shape + (2,), np.nan)
    grid = identity_grid(*obs_shape)
    wf = obs_shape[1] // patch_size
    for oi, opx, tpx in zip(coarse.obs_indices, coarse.obs_px, coarse.tpl_px):
        r, c = divmod(int(oi), wf)
        sl = np.s_[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
        out[sl] = grid[sl] + (tpx - opx)
    return out


def _run_hypothesis(idx, score, obs, patch_map, block_maps, tset, config,
                    keep_maps=False):
    tpl = tset.templates[idx]
    a = features.correspondence_map(patch_map, tset.patch_features[idx])
    coarse = features.coarse_correspondences(
        a, patch_map.mask, min_sim=config.min_sim, patch_size=config.patch_size)
    fallback = False
    n_inl = 0
    try:
        affine, inl = stage2.fit_similarity_ransac(
            coarse.obs_px, coarse.tpl_px,
            replace(config.stage2, seed=_derived_seed(config.stage2.seed, _STAGE2_SALT, idx)))
        n_inl = int(inl.sum())
    except (InsufficientDataError, NoModelError):
        affine, fallback = Affine2D.identity(), True

    p0 = stage3.position_map_from_affine(affine, config.image_size)
    tpl_blocks = _template_blocks(tpl, idx, tset, config)
    pyramids = [stage3.correlation_pyramid(ob, tb, num_levels=l + 2, radius=config.stage3.radius)
                for l, (ob, tb) in enumerate(zip(block_maps, tpl_blocks))]
    cfg3 = stage3.RefineConfig(config.stage3.radius, config.stage3.temperature,
                               config.stage3.offset_gate)
    pmap, cert, _ = stage3.refine(p0, pyramids, cfg3, mask=obs.mask)
    pairs = pnp.assemble_pairs(pmap, cert, tpl, obs.mask, obs_crop=obs.crop_frame,
                               threshold=config.pnp.certainty_threshold,
                               cap=config.pnp.pair_cap)
    error = None
    estimate = None
    try:
        estimate, _ = pnp.pnp_ransac(pairs, tset.intrinsics,
                                     iterations=config.pnp.iterations,
                                     reproj_threshold=config.pnp.reproj_threshold,
                                     seed=_derived_seed(config.seed, _PNP_SALT, idx),
                                     hypothesis_index=idx)
    except (InsufficientDataError, NoPoseError, DegenerateError) as exc:
        error = str(exc)
    return HypothesisResult(
        template_index=idx, score=float(score), affine=affine, stage2_fallback=fallback,
        n_coarse=len(coarse), n_stage2_inliers=n_inl, estimate=estimate,
        n_pairs=len(pairs), error=error,
        position_map=pmap if keep_maps else None,
        certainty=cert if keep_maps else None,
        coarse=coarse if keep_maps else None)


def estimate(obs: Observation, tset: TemplateSet, config: PipelineConfig | None = None,
             gt: synth.SceneGT | None = None, gt_template_index=None, keep_maps=False):
    """Full three-stage estimation over the top-k scored templates.

    Returns (PoseEstimate, StageDiagnostics). Per-hypothesis failures degrade
    to skipped hypotheses; only all-fail raises NoPoseError (carrying the
    diagnostics as an attribute). A stage-2 no-model falls back to the
    identity transform and is flagged in the diagnostics. EPE diagnostics are
    filled from `gt` only when the chosen template matches gt_template_index
    (the ground-truth flow targets that template's frame).
    """
    config = config or tset.config
    if not np.asarray(obs.mask).any():
        raise EmptyForegroundError("observation mask is empty")
    t_start = time.monotonic()
    patch_map, block_maps = _observation_features(obs, tset, config)
    t_feat = time.monotonic()
    order, scores = features.select_best_template(patch_map, tset.patch_features,
                                                  top_k=config.top_k)
    t_score = time.monotonic()
    hyps = [_run_hypothesis(int(i), s, obs, patch_map, block_maps, tset, config,
                            keep_maps=keep_maps or gt is not None)
            for i, s in zip(order, scores)]
    t_hyp = time.monotonic()

    ok = [h for h in hyps if h.estimate is not None]
    if not ok:
        diag = _diagnostics_from(hyps, None, obs, tset, config, gt,
                                 gt_template_index, (t_start, t_feat, t_score, t_hyp))
        err = NoPoseError("all hypotheses failed: " +
                          "; ".join(h.error or "?" for h in hyps))
        err.diagnostics = diag
        raise err
    best = max(ok, key=lambda h: (h.estimate.inliers, -h.estimate.reproj_rms))
    diag = _diagnostics_from(hyps, best, obs, tset, config, gt,
                             gt_template_index, (t_start, t_feat, t_score, t_hyp))
    return best.estimate, diag


def _diagnostics_from(hyps, best, obs, tset, config, gt, gt_template_index, marks):
    t_start, t_feat, t_score, t_hyp = marks
    timings = {"features": (t_feat - t_start) * 1e3,
               "stage1_scoring": (t_score - t_feat) * 1e3,
               "hypotheses": (t_hyp - t_score) * 1e3}
    ref = best or (hyps[0] if hyps else None)
    epe1 = epe2 = epe3 = None
    pose1 = pose2 = None
    epe_comparable = (ref is not None and gt is not None and
                      (gt_template_index is None or ref.template_index == gt_template_index))
    if epe_comparable:
        gtmask = gt.certainty > 0.5
        if gtmask.any():
            if ref.coarse is not None and len(ref.coarse):
                p1 = _stage1_dense_positions(ref.coarse, config.image_size, config.patch_size)
                m1 = gtmask & np.isfinite(p1[..., 0])
                if m1.any():
                    d = p1[m1] - gt.flow[m1]
                    epe1 = float(np.sqrt((d ** 2).sum(axis=-1)).mean())
            p2 = stage3.position_map_from_affine(ref.affine, config.image_size)
            epe2 = metrics.epe(p2.positions, gt.flow, gtmask)
            if ref.position_map is not None:
                epe3 = metrics.epe(ref.position_map.positions, gt.flow, gtmask)
    if ref is not None and config.eval_stage1_pose and ref.coarse is not None \
            and len(ref.coarse) >= 4:
        pose1 = _pose_from_coarse(ref, obs, tset, config)
    if ref is not None and config.eval_stage2_pose and not ref.stage2_fallback:
        pose2 = _pose_from_affine(ref, obs, tset, config)
    return StageDiagnostics(
        template_index=ref.template_index if ref else -1,
        template_score=ref.score if ref else 0.0,
        affine=ref.affine if ref else None,
        stage2_fallback=ref.stage2_fallback if ref else False,
        n_coarse_pairs=ref.n_coarse if ref else 0,
        n_stage2_inliers=ref.n_stage2_inliers if ref else 0,
        n_pnp_pairs=ref.n_pairs if ref else 0,
        epe_stage1=epe1, epe_stage2=epe2, epe_stage3=epe3,
        stage1_pose=pose1, stage2_pose=pose2,
        hypotheses=[{"template": h.template_index, "score": h.score,
                     "inliers": h.estimate.inliers if h.estimate else 0,
                     "error": h.error} for h in hyps],
        timings_ms=timings,
        position_map=ref.position_map if ref else None,
        certainty=ref.certainty if ref else None,
        coarse=ref.coarse if ref else None)


def _pose_from_coarse(hyp, obs, tset, config):
    """Stage-1 baseline: PnP directly on the per-patch matches."""
    tpl = tset.templates[hyp.template_index]
    xyz, valid = synth.sample_template_xyz(tpl, hyp.coarse.tpl_px)
    pix = hyp.coarse.obs_px[valid]
    if obs.crop_frame is not None:
        pix = obs.crop_frame.apply(pix)
    pairs = pnp.PairSet2D3D(pix, xyz[valid], np.clip(hyp.coarse.sims[valid], 0, 1))
    try:
        est, _ = pnp.pnp_ransac(pairs, tset.intrinsics, iterations=config.pnp.iterations,
                                reproj_threshold=config.pnp.reproj_threshold,
                                seed=_derived_seed(config.seed, _PNP_SALT, 0xC0A),
                                hypothesis_index=hyp.template_index)
        return est
    except (InsufficientDataError, NoPoseError, DegenerateError):
        return None


def _pose_from_affine(hyp, obs, tset, config, stride=3):
    """Stage-2 baseline: PnP on the affine-induced dense correspondences."""
    tpl = tset.templates[hyp.template_index]
    h, w = config.image_size
    mask = np.zeros((h, w), dtype=bool)
    mask[::stride, ::stride] = True
    mask &= obs.mask
    if not mask.any():
        return None
    vs, us = np.nonzero(mask)
    pix = np.stack([us, vs], axis=1).astype(np.float64)
    pos = hyp.affine.apply(pix)
    xyz, valid = synth.sample_template_xyz(tpl, pos)
    pix = pix[valid]
    if obs.crop_frame is not None:
        pix = obs.crop_frame.apply(pix)
    pairs = pnp.PairSet2D3D(pix, xyz[valid], np.ones(valid.sum()))
    try:
        est, _ = pnp.pnp_ransac(pairs, tset.intrinsics, iterations=config.pnp.iterations,
                                reproj_threshold=config.pnp.reproj_threshold,
                                seed=_derived_seed(config.seed, _PNP_SALT, 0xC0B),
                                hypothesis_index=hyp.template_index)
        return est
    except (InsufficientDataError, NoPoseError, DegenerateError):
        return None


# ---------------------------------------------------------------------------
# experiment harness

@dataclass(frozen=True)
class SuiteConfig:
    n_scenes: int = 200
    seed: int = 12345
    mesh_seed: int = 3
    diameter: float = 0.30
    noise_sigma: float = 0.05
    max_in_plane_deg: float = 180.0
    distance_range: tuple = (0.85, 1.2)
    jitter_px: float = 8.0
    out_of_plane_deg: float = 0.0  # extra wobble beyond the template grid gap

    def to_json(self) -> dict:
        return {"n_scenes": self.n_scenes, "seed": self.seed,
                "mesh_seed": self.mesh_seed, "diameter": self.diameter,
                "noise_sigma": self.noise_sigma,
                "max_in_plane_deg": self.max_in_plane_deg,
                "distance_range": list(self.distance_range),
                "jitter_px": self.jitter_px,
                "out_of_plane_deg": self.out_of_plane_deg}

    @classmethod
    def from_json(cls, obj: dict) -> "SuiteConfig":
        base = cls()
        kwargs = {f: obj.get(f, getattr(base, f)) for f in base.__dataclass_fields__}
        kwargs["distance_range"] = tuple(kwargs["distance_range"])
        return cls(**kwargs)


def random_query_pose(rng, mesh, config: PipelineConfig, suite: SuiteConfig) -> Pose:
    from .geometry import look_at_pose
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = config.template_radius_factor * mesh.diameter * rng.uniform(*suite.distance_range)
    pose = look_at_pose(mesh.centroid + radius * direction, mesh.centroid)
    gamma = np.deg2rad(rng.uniform(-suite.max_in_plane_deg, suite.max_in_plane_deg))
    pose = rotate_in_camera_frame(pose, [0.0, 0.0, -gamma])
    if suite.out_of_plane_deg > 0:
        tilt = np.deg2rad(rng.uniform(-suite.out_of_plane_deg, suite.out_of_plane_deg, 2))
        pose = rotate_in_camera_frame(pose, [tilt[0], tilt[1], 0.0])
    if suite.jitter_px > 0:
        z = float(np.linalg.norm(pose.translation))
        du, dv = rng.uniform(-suite.jitter_px, suite.jitter_px, 2)
        k = config.intrinsics
        shift = np.array([du * z / k.fx, dv * z / k.fy, 0.0])
        pose = Pose(pose.rotation, pose.translation + shift)
    return pose


def generate_suite(mesh: synth.Mesh, template_poses, config: PipelineConfig,
                   suite: SuiteConfig):
    """Deterministic list of synthetic scenes with full ground truth."""
    seeds = np.random.SeedSequence(suite.seed).spawn(suite.n_scenes)
    scenes = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        noise = synth.NoiseConfig(feature_sigma=suite.noise_sigma,
                                  seed=_derived_seed(suite.seed, 0x5C, i))
        for _ in range(8):  # retry fully-visible pose
            pose = random_query_pose(rng, mesh, config, suite)
            try:
                scene = synth.make_scene(mesh, pose, config.intrinsics,
                                         config.image_size, template_poses,
                                         noise=noise)
                break
            except CorrposeError:
                continue
        else:
            raise InvalidParameterError(f"could not generate scene {i}")
        scenes.append(scene)
    return scenes


def _stage_epes(scene, diag, tset, config, mesh):
    """Per-stage EPE against the template the estimator actually chose.

    The stored scene ground truth targets the nearest template; when the
    estimator picked another one, the dense flow is recomputed against it.
    Stage 1 is evaluated over GT-certain pixels whose patch produced a pair
    (it predicts nothing elsewhere); stages 2/3 are dense over GT certainty.
    """
    if diag.template_index < 0:
        return None, None, None
    same = (scene.best_template_pose is not None and
            np.abs(tset.poses[diag.template_index].rotation -
                   scene.best_template_pose.rotation).max() < 1e-12)
    if same:
        flow, certainty = scene.gt.flow, scene.gt.certainty
    else:
        flow, certainty, _, _ = synth.flow_ground_truth(
            mesh, scene.observation, tset.templates[diag.template_index],
            tset.intrinsics)
    gtmask = certainty > 0.5
    if not gtmask.any():
        return None, None, None
    epe1 = epe2 = epe3 = None
    if diag.coarse is not None and len(diag.coarse):
        p1 = _stage1_dense_positions(diag.coarse, config.image_size, config.patch_size)
        m1 = gtmask & np.isfinite(p1[..., 0])
        if m1.any():
            d = p1[m1] - flow[m1]
            epe1 = float(np.sqrt((d ** 2).sum(axis=-1)).mean())
    if diag.affine is not None:
        p2 = stage3.position_map_from_affine(diag.affine, config.image_size)
        epe2 = metrics.epe(p2.positions, flow, gtmask)
    if diag.position_map is not None:
        epe3 = metrics.epe(diag.position_map.positions, flow, gtmask)
    return epe1, epe2, epe3


def _scene_record(index, scene, tset, config, mesh, with_epe=True):
    cfg = replace(config, feature=replace(config.feature,
                                          noise_sigma=scene.noise.feature_sigma))
    obs = Observation(mask=scene.seg_mask, xyz=scene.observation.xyz,
                      feature_seed=scene.noise.seed)
    record = {"scene": index, "ok": False, "template": -1,
              "rot_err_deg": float("inf"), "trans_err_m": float("inf"),
              "mssd": float("inf"), "mspd": float("inf"),
              "epe_stage1": None, "epe_stage2": None, "epe_stage3": None,
              "inliers": 0, "n_pairs": 0, "stage2_fallback": False,
              "rot_err_deg_stage1": float("inf"), "trans_err_m_stage1": float("inf"),
              "mssd_stage1": float("inf"), "mspd_stage1": float("inf"),
              "mssd_stage2": float("inf"), "mspd_stage2": float("inf")}
    gt_pose = scene.gt.pose
    try:
        est, diag = estimate(obs, tset, cfg, keep_maps=with_epe)
    except NoPoseError as exc:
        diag = getattr(exc, "diagnostics", None)
        est = None
    if diag is not None:
        record.update({"template": diag.template_index,
                       "stage2_fallback": diag.stage2_fallback})
        if with_epe:
            epe1, epe2, epe3 = _stage_epes(scene, diag, tset, config, mesh)
            record.update({"epe_stage1": epe1, "epe_stage2": epe2, "epe_stage3": epe3})
        for label, pose_est in (("_stage1", diag.stage1_pose), ("_stage2", diag.stage2_pose)):
            if pose_est is not None:
                record["rot_err_deg" + label] = metrics.rotation_error_deg(pose_est.pose, gt_pose)
                record["trans_err_m" + label] = metrics.translation_error(pose_est.pose, gt_pose)
                record["mssd" + label] = metrics.mssd(pose_est.pose, gt_pose, mesh)
                record["mspd" + label] = metrics.mspd(pose_est.pose, gt_pose,
                                                      tset.intrinsics, mesh)
    if est is not None:
        record.update({
            "ok": True,
            "rot_err_deg": metrics.rotation_error_deg(est.pose, gt_pose),
            "trans_err_m": metrics.translation_error(est.pose, gt_pose),
            "mssd": metrics.mssd(est.pose, gt_pose, mesh),
            "mspd": metrics.mspd(est.pose, gt_pose, tset.intrinsics, mesh),
            "inliers": est.inliers, "n_pairs": est.total})
    return record


_WORKER_STATE: dict = {}


def _worker_record(args):
    index, scene = args
    mesh, tset, config, with_epe = _WORKER_STATE["args"]
    return _scene_record(index, scene, tset, config, mesh, with_epe=with_epe)


def evaluate_suite(scenes, tset: TemplateSet, config: PipelineConfig,
                   mesh: synth.Mesh, workers=1, with_epe=True):
    """Per-scene records plus the aggregate report (timings excluded so the
    aggregate is byte-identical across runs and worker counts)."""
    tasks = list(enumerate(scenes))
    if workers <= 1:
        records = [_scene_record(i, s, tset, config, mesh, with_epe=with_epe)
                   for i, s in tasks]
    else:
        # forked workers inherit the shared state; scenes travel per task
        import multiprocessing as mp
        _WORKER_STATE["args"] = (mesh, tset, config, with_epe)
        try:
            with ProcessPoolExecutor(max_workers=workers,
                                     mp_context=mp.get_context("fork")) as pool:
                records = list(pool.map(_worker_record, tasks))
        finally:
            _WORKER_STATE.clear()
    records.sort(key=lambda r: r["scene"])
    return records, aggregate_records(records, tset, config)


def aggregate_records(records, tset, config):
    width = config.image_size[1]

    def _ar(mssd_key, mspd_key):
        mssd_err = [r[mssd_key] for r in records]
        mspd_err = [r[mspd_key] for r in records]
        a1 = metrics.ar_mssd(mssd_err, tset.diameter)
        a2 = metrics.ar_mspd(mspd_err, width)
        return a1, a2, (a1 + a2) / 2.0

    ar_s, ar_p, ar_m = _ar("mssd", "mspd")
    agg = {
        "n_scenes": len(records),
        "n_ok": sum(1 for r in records if r["ok"]),
        "ar_mssd": ar_s, "ar_mspd": ar_p, "ar_mean": ar_m,
        "translation_acc_5cm": metrics.translation_accuracy(
            [r["trans_err_m"] for r in records]),
        "rot_err_deg_median": float(np.median([r["rot_err_deg"] for r in records])),
    }
    for stage in (1, 2, 3):
        vals = [r[f"epe_stage{stage}"] for r in records if r[f"epe_stage{stage}"] is not None]
        agg[f"epe_stage{stage}_mean"] = float(np.mean(vals)) if vals else None
    if any(np.isfinite(r["mssd_stage1"]) for r in records):
        s1s, s1p, s1m = _ar("mssd_stage1", "mspd_stage1")
        agg.update({"ar_mssd_stage1": s1s, "ar_mspd_stage1": s1p, "ar_mean_stage1": s1m})
        agg["translation_acc_5cm_stage1"] = metrics.translation_accuracy(
            [r["trans_err_m_stage1"] for r in records])
    if any(np.isfinite(r["mssd_stage2"]) for r in records):
        s2s, s2p, s2m = _ar("mssd_stage2", "mspd_stage2")
        agg.update({"ar_mssd_stage2": s2s, "ar_mspd_stage2": s2p, "ar_mean_stage2": s2m})
    return agg


def _json_safe(value):
    """Strict-JSON form: non-finite floats become null."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, (np.floating, np.integer)):
        return _json_safe(value.item())
    return value


def write_report(records, aggregate, out_dir):
    import os
    os.makedirs(out_dir, exist_ok=True)
    records_path = os.path.join(out_dir, "records.jsonl")
    agg_path = os.path.join(out_dir, "aggregate.json")
    with open(records_path, "w") as f:
        for r in records:
            f.write(json.dumps(_json_safe(r), sort_keys=True, allow_nan=False) + "\n")
    with open(agg_path, "w") as f:
        json.dump(_json_safe(aggregate), f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")
    return records_path, agg_path


def run_experiment(config: PipelineConfig, suite: SuiteConfig, out_dir=None,
                   workers=1, template_counts=None, mesh=None):
    """Generate the seeded suite, estimate every scene, aggregate, optionally
    sweep template counts; writes records.jsonl + aggregate.json when out_dir
    is given."""
    mesh = mesh or synth.make_blob_mesh(seed=suite.mesh_seed, diameter=suite.diameter)
    tset = onboard(mesh, config)
    scenes = generate_suite(mesh, tset.poses, config, suite)
    records, agg = evaluate_suite(scenes, tset, config, mesh, workers=workers)
    result = {"aggregate": agg, "records": records}
    if template_counts:
        result["template_sweep"] = sweep_template_counts(
            scenes, tset, config, mesh, template_counts, workers=workers)
    if out_dir is not None:
        write_report(records, agg, out_dir)
        if template_counts:
            import os
            with open(os.path.join(out_dir, "template_sweep.json"), "w") as f:
                json.dump(_json_safe(result["template_sweep"]), f, sort_keys=True,
                          indent=2, allow_nan=False)
                f.write("\n")
    return result


# ---------------------------------------------------------------------------
# suite and store persistence

def write_suite(scenes, mesh, config: PipelineConfig, suite: SuiteConfig, out_dir):
    import os
    os.makedirs(out_dir, exist_ok=True)
    synth.save_obj(mesh, os.path.join(out_dir, "object.obj"))
    with open(os.path.join(out_dir, "suite.json"), "w") as f:
        json.dump({"suite": suite.to_json(), "config": config.to_json(),
                   "n_scenes": len(scenes)}, f, sort_keys=True, indent=2)
    for i, scene in enumerate(scenes):
        sdir = os.path.join(out_dir, "scenes", f"scene_{i:04d}")
        os.makedirs(sdir, exist_ok=True)
        synth.save_template(scene.observation, os.path.join(sdir, "obs"))
        synth.save_pgm_mask(scene.seg_mask, os.path.join(sdir, "seg.pgm"))
        if scene.observation.rgb is not None:
            stage3.save_ppm(scene.observation.rgb, os.path.join(sdir, "obs_rgb.ppm"))
        stage3.save_position_map(stage3.PositionMap(scene.gt.flow, config.image_size),
                                 os.path.join(sdir, "flow.bin"))
        stage3.save_certainty_map(stage3.CertaintyMap(scene.gt.certainty),
                                  os.path.join(sdir, "cert.bin"))
        with open(os.path.join(sdir, "gt.json"), "w") as f:
            json.dump({"pose": scene.gt.pose.to_json(),
                       "affine": scene.gt.affine.to_json(),
                       "affine_rms": scene.gt.affine_rms,
                       "best_template_index": scene.best_template_index,
                       "best_template_pose": (scene.best_template_pose.to_json()
                                              if scene.best_template_pose else None),
                       "noise": {"feature_sigma": scene.noise.feature_sigma,
                                 "mask_dilate": scene.noise.mask_dilate,
                                 "mask_erode": scene.noise.mask_erode,
                                 "seed": scene.noise.seed}},
                      f, sort_keys=True, indent=2)


def load_suite(suite_dir):
    """Returns (scenes, mesh, PipelineConfig, SuiteConfig) from a gen directory."""
    import os
    with open(os.path.join(suite_dir, "suite.json")) as f:
        meta = json.load(f)
    mesh = synth.load_obj(os.path.join(suite_dir, "object.obj"))
    config = PipelineConfig.from_json(meta["config"])
    suite = SuiteConfig.from_json(meta["suite"])
    scenes = []
    for i in range(meta["n_scenes"]):
        sdir = os.path.join(suite_dir, "scenes", f"scene_{i:04d}")
        obs = synth.load_template(os.path.join(sdir, "obs"))
        seg = synth.load_pgm_mask(os.path.join(sdir, "seg.pgm"))
        flow = stage3.load_position_map(os.path.join(sdir, "flow.bin"))
        cert = stage3.load_certainty_map(os.path.join(sdir, "cert.bin"))
        with open(os.path.join(sdir, "gt.json")) as f:
            gt_meta = json.load(f)
        noise = synth.NoiseConfig(**gt_meta["noise"])
        gt = synth.SceneGT(pose=Pose.from_json(gt_meta["pose"]),
                           affine=Affine2D.from_json(gt_meta["affine"]),
                           flow=flow.positions, certainty=cert.values,
                           affine_rms=gt_meta.get("affine_rms", 0.0))
        best_pose = (Pose.from_json(gt_meta["best_template_pose"])
                     if gt_meta.get("best_template_pose") else None)
        scenes.append(synth.SyntheticScene(
            observation=obs, seg_mask=seg, gt=gt,
            best_template_index=gt_meta["best_template_index"], noise=noise,
            best_template_pose=best_pose))
    return scenes, mesh, config, suite


def write_store(tset: TemplateSet, mesh, out_dir):
    import os
    os.makedirs(os.path.join(out_dir, "templates"), exist_ok=True)
    synth.save_obj(mesh, os.path.join(out_dir, "mesh.obj"))
    with open(os.path.join(out_dir, "store.json"), "w") as f:
        json.dump({"config": tset.config.to_json(), "level": tset.level,
                   "diameter": tset.diameter, "count": len(tset)},
                  f, sort_keys=True, indent=2)
    for i, (tpl, fmap) in enumerate(zip(tset.templates, tset.patch_features)):
        prefix = os.path.join(out_dir, "templates", f"tpl_{i:04d}")
        synth.save_template(tpl, prefix)
        features.save_features(fmap, prefix + ".feat")


def load_store(store_dir):
    """Returns (TemplateSet, mesh) from an onboard directory."""
    import os
    with open(os.path.join(store_dir, "store.json")) as f:
        meta = json.load(f)
    mesh = synth.load_obj(os.path.join(store_dir, "mesh.obj"))
    config = PipelineConfig.from_json(meta["config"])
    templates, fmaps = [], []
    for i in range(meta["count"]):
        prefix = os.path.join(store_dir, "templates", f"tpl_{i:04d}")
        templates.append(synth.load_template(prefix))
        fmaps.append(features.load_features(prefix + ".feat").normalized())
    poses = [t.pose for t in templates]
    return TemplateSet(templates=templates, poses=poses, patch_features=fmaps,
                       intrinsics=config.intrinsics, level=meta["level"],
                       diameter=meta["diameter"], config=config), mesh


def subset_template_set(tset: TemplateSet, indices) -> TemplateSet:
    return TemplateSet(
        templates=[tset.templates[i] for i in indices],
        poses=[tset.poses[i] for i in indices],
        patch_features=[tset.patch_features[i] for i in indices],
        intrinsics=tset.intrinsics, level=tset.level, diameter=tset.diameter,
        config=tset.config)


def sweep_template_counts(scenes, tset, config, mesh, counts, workers=1):
    """Re-estimate the suite over nested template subsets of the given sizes."""
    sweep = {}
    cfg = replace(config, eval_stage1_pose=False, eval_stage2_pose=False)
    for count in counts:
        indices = template_subset(tset, count)
        sub = subset_template_set(tset, indices)
        _, agg = evaluate_suite(scenes, sub, cfg, mesh, workers=workers,
                                with_epe=False)
        sweep[str(count)] = {"ar_mean": agg["ar_mean"], "ar_mssd": agg["ar_mssd"],
                             "ar_mspd": agg["ar_mspd"],
                             "translation_acc_5cm": agg["translation_acc_5cm"]}
    return sweep
