"""Stage 2: global 4-DoF transform from coarse pairs, plus its training losses.

The transform is fit with RANSAC over two-point minimal models (complex-ratio
construction) followed by a closed-form complex least-squares refit on the
consensus set. Losses carry analytic gradients for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, InsufficientDataError, InvalidParameterError, NoModelError
from .geometry import Affine2D, _fit_similarity_complex, similarity_from_complex


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    inlier_threshold: float = 2.0
    min_inliers: int | None = None  # None -> max(6, 5% of pairs)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise InvalidParameterError("inlier threshold must be positive")

    def resolved_min_inliers(self, n_pairs):
        if self.min_inliers is not None:
            return self.min_inliers
        return max(6, int(math.ceil(0.05 * n_pairs)))


def similarity_from_two_pairs(p1, q1, p2, q2) -> Affine2D:
    """Unique 4-DoF similarity mapping p1->q1 and p2->q2 exactly."""
    p1 = complex(p1[0], p1[1])
    p2 = complex(p2[0], p2[1])
    q1 = complex(q1[0], q1[1])
    q2 = complex(q2[0], q2[1])
    dp = p2 - p1
    if abs(dp) < 1e-12:
        raise DegenerateError("coincident source points")
    w = (q2 - q1) / dp
    return similarity_from_complex(w, q1 - w * p1)


def fit_similarity_ransac(src, dst, cfg: RansacConfig | None = None):
    """Robust 4-DoF fit of dst ≈ A(src) over 2D point pairs.

    Vectorized hypothesis evaluation; deterministic given cfg.seed (consensus
    ties keep the earliest hypothesis). Returns (Affine2D, inlier mask), where
    the mask is the consensus set of the winning minimal model and the affine
    is its least-squares refit. Raises InsufficientDataError for < 2 pairs and
    NoModelError when consensus stays below the configured floor.
    """
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n != len(dst):
        raise InvalidParameterError("src/dst length mismatch")
    if n < 2:
        raise InsufficientDataError("need at least 2 pairs")

    p = src[:, 0] + 1j * src[:, 1]
    q = dst[:, 0] + 1j * dst[:, 1]
    rng = np.random.default_rng(cfg.seed)
    ia = rng.integers(0, n, size=cfg.iterations)
    ib = rng.integers(0, n - 1, size=cfg.iterations)
    ib = np.where(ib >= ia, ib + 1, ib)

    dp = p[ib] - p[ia]
    ok = np.abs(dp) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(ok, (q[ib] - q[ia]) / np.where(ok, dp, 1.0), 0.0)
    b = q[ia] - w * p[ia]
    residuals = np.abs(w[:, None] * p[None, :] + b[:, None] - q[None, :])
    counts = np.where(ok, (residuals < cfg.inlier_threshold).sum(axis=1), -1)
    best = int(np.argmax(counts))  # first max: deterministic tie-break
    best_count = int(counts[best])

    if best_count < max(2, cfg.resolved_min_inliers(n)):
        raise NoModelError(
            f"consensus {best_count} below floor {cfg.resolved_min_inliers(n)}")

    inliers = residuals[best] < cfg.inlier_threshold
    try:
        w_fit, b_fit = _fit_similarity_complex(src[inliers], dst[inliers])
        return similarity_from_complex(w_fit, b_fit), inliers
    except (InsufficientDataError, InvalidParameterError) as exc:
        # coincident consensus points collapse the similarity
        raise NoModelError(f"degenerate consensus: {exc}") from exc


# ---------------------------------------------------------------------------
# losses

def loss_geodesic(alpha, alpha_hat):
    """Geodesic distance acos(cos a cos a' + sin a sin a') in [0, pi].

    Returns (value, d/dalpha, at_endpoint); the gradient is the subgradient 0
    with at_endpoint=True at distances 0 and pi.
    """
    inner = math.cos(alpha) * math.cos(alpha_hat) + math.sin(alpha) * math.sin(alpha_hat)
    value = math.acos(min(1.0, max(-1.0, inner)))
    s = math.sin(alpha - alpha_hat)
    if abs(s) < 1e-12:
        return value, 0.0, True
    return value, math.copysign(1.0, s), False


@dataclass(frozen=True)
class SmoothLossTerms:
    geo: float
    log_scale: float
    trans_u: float
    trans_v: float

    @property
    def total(self):
        return self.geo + self.log_scale + self.trans_u + self.trans_v


@dataclass(frozen=True)
class SmoothLossGrads:
    d_alpha: float
    d_scale: float
    d_tu: float
    d_tv: float


def loss_smooth(pred: Affine2D, gt: Affine2D, weights=(1.0, 1.0, 1.0, 1.0)):
    """Per-term 4-DoF loss: geodesic angle + |ln s - ln s'| + |t - t'| (L1).

    All four terms weigh equally by default despite their mixed units;
    optional per-term weights are exposed. Returns
    (SmoothLossTerms, SmoothLossGrads).
    """
    w_geo, w_s, w_u, w_v = weights
    geo, d_alpha, _ = loss_geodesic(pred.alpha, gt.alpha)
    dlog = math.log(pred.scale) - math.log(gt.scale)
    du = pred.t_u - gt.t_u
    dv = pred.t_v - gt.t_v
    terms = SmoothLossTerms(w_geo * geo, w_s * abs(dlog), w_u * abs(du), w_v * abs(dv))
    grads = SmoothLossGrads(
        d_alpha=w_geo * d_alpha,
        d_scale=w_s * (math.copysign(1.0, dlog) / pred.scale if dlog != 0 else 0.0),
        d_tu=w_u * (math.copysign(1.0, du) if du != 0 else 0.0),
        d_tv=w_v * (math.copysign(1.0, dv) if dv != 0 else 0.0),
    )
    return terms, grads


def predicted_angle_from_cos_sin(cos_alpha, sin_alpha):
    """Renormalize an external (cos, sin) prediction to the unit circle."""
    norm = math.hypot(cos_alpha, sin_alpha)
    if norm < 1e-12:
        raise InvalidParameterError("zero-length (cos, sin) prediction")
    return math.atan2(sin_alpha / norm, cos_alpha / norm)
