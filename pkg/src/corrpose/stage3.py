"""Stage 3: dense position maps, correlation pyramid + lookup, local refinement.

The learned offset heads are replaced by correlation-peak refinement over the
same lookup structure: each block finds the level-0 lookup-window maximum,
sharpens it with a quadratic sub-pixel fit around the peak (on log-costs,
which is exact for the Gaussian correlation falloff of the procedural
features), and scores the match by its margin over the best cost more than
one pixel away.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, FormatError, InvalidParameterError
from .geometry import Affine2D
from .interp import avg_pool2_last2, gather_bilinear, identity_grid, resize_field

FLOW_MAGIC = b"PICOFLOW"
CERT_MAGIC = b"PICOCERT"


@dataclass(frozen=True, eq=False)
class PositionMap:
    """Dense per-observation-pixel coordinates in the template frame.

    Positions may lie outside the frame (tracked, not clamped) but must be
    finite; frame_size records the (H, W) of the template frame they index.
    """

    positions: np.ndarray
    frame_size: tuple

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 2:
            raise InvalidParameterError(f"positions must be HxWx2, got {p.shape}")
        if not np.isfinite(p).all():
            raise InvalidParameterError("positions must be finite everywhere")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "frame_size", (int(self.frame_size[0]), int(self.frame_size[1])))

    @property
    def shape(self):
        return self.positions.shape[:2]


@dataclass(frozen=True, eq=False)
class CertaintyMap:
    """Per-pixel correspondence confidence in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.min() < -1e-9 or v.max() > 1 + 1e-9:
            raise InvalidParameterError("certainty values must lie in [0, 1]")
        object.__setattr__(self, "values", np.clip(v, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class CorrelationPyramid:
    """All-pairs cost volume plus template-pooled levels.

    levels[0] is (H, W, Ht, Wt) at full block resolution; every further level
    average-pools the template dimensions by 2.
    """

    levels: list
    radius: int = 4


def position_map_from_affine(a: Affine2D, size, frame_size=None) -> PositionMap:
    """P[v, u] = M @ [u, v, 1]^T over the pixel-center grid."""
    h, w = size
    grid = identity_grid(h, w)
    return PositionMap(a.apply(grid), frame_size or size)


def correlation_pyramid(f_obs, f_tpl, num_levels, radius=4) -> CorrelationPyramid:
    """All-pairs dot products of L2-normalized block features, then pooling.

    f_obs / f_tpl are (H, W, D) arrays or FeatureMaps of equal D.
    """
    obs = np.asarray(getattr(f_obs, "grid", f_obs))
    tpl = np.asarray(getattr(f_tpl, "grid", f_tpl))
    if not np.issubdtype(obs.dtype, np.floating):
        obs = obs.astype(np.float64)
    if not np.issubdtype(tpl.dtype, np.floating):
        tpl = tpl.astype(np.float64)
    if obs.shape[-1] != tpl.shape[-1]:
        raise DimensionMismatchError(
            f"feature dims differ: {obs.shape[-1]} vs {tpl.shape[-1]}")
    if num_levels < 1:
        raise InvalidParameterError("num_levels must be >= 1")

    def _normalize(x):
        # float32 inputs stay float32 so the all-pairs product runs in sgemm
        n = np.linalg.norm(x.astype(np.float64), axis=-1, keepdims=True)
        return (x / np.maximum(n, 1e-300).astype(x.dtype)).astype(x.dtype)

    obs_n = _normalize(obs)
    tpl_n = _normalize(tpl)
    vol = np.tensordot(obs_n, tpl_n, axes=([2], [2]))
    levels = [vol]
    for _ in range(num_levels - 1):
        levels.append(avg_pool2_last2(levels[-1]))
    return CorrelationPyramid(levels=levels, radius=radius)


def correlation_lookup(pyr: CorrelationPyramid, positions, radius=None):
    """Sample (2r+1)^2 cost windows around the current positions per level.

    positions is (H, W, 2) (or a PositionMap) at the block resolution of
    pyr.levels[0]; centers are rescaled per pyramid level. Out-of-grid taps
    are zero with validity flags. Returns (taps, valid), both
    (H, W, L, 2r+1, 2r+1).
    """
    r = int(pyr.radius if radius is None else radius)
    if r < 1:
        raise InvalidParameterError("lookup radius must be >= 1")
    pos = np.asarray(getattr(positions, "positions", positions), dtype=np.float64)
    h, w = pos.shape[:2]
    n = h * w
    k = 2 * r + 1
    offs = np.arange(-r, r + 1, dtype=np.float64)
    du, dv = np.meshgrid(offs, offs)
    window = np.stack([du, dv], axis=-1).reshape(1, k * k, 2)

    taps = np.zeros((n, len(pyr.levels), k * k))
    valid = np.zeros((n, len(pyr.levels), k * k), dtype=bool)
    flat_pos = pos.reshape(n, 2)
    rows = np.arange(n)[:, None]
    for m, vol in enumerate(pyr.levels):
        ht, wt = vol.shape[2:]
        vol_flat = vol.reshape(n, ht, wt)
        pts = flat_pos[:, None, :] / (2.0 ** m) + window
        u, v = pts[..., 0], pts[..., 1]
        ok = (u >= 0) & (u <= wt - 1) & (v >= 0) & (v <= ht - 1)
        u0 = np.clip(np.floor(u).astype(np.int64), 0, max(wt - 2, 0))
        v0 = np.clip(np.floor(v).astype(np.int64), 0, max(ht - 2, 0))
        fu, fv = u - u0, v - v0
        u1 = np.minimum(u0 + 1, wt - 1)
        v1 = np.minimum(v0 + 1, ht - 1)
        vals = (vol_flat[rows, v0, u0] * (1 - fu) * (1 - fv) +
                vol_flat[rows, v0, u1] * fu * (1 - fv) +
                vol_flat[rows, v1, u0] * (1 - fu) * fv +
                vol_flat[rows, v1, u1] * fu * fv)
        taps[:, m, :] = np.where(ok, vals, 0.0)
        valid[:, m, :] = ok
    return (taps.reshape(h, w, len(pyr.levels), k, k),
            valid.reshape(h, w, len(pyr.levels), k, k))


@dataclass(frozen=True)
class RefineConfig:
    radius: int = 4
    temperature: float = 0.1
    offset_gate: float = 0.5  # blocks apply offsets only where their own certainty exceeds this

    def __post_init__(self):
        if self.radius < 1:
            raise InvalidParameterError("radius must be >= 1")
        if not self.temperature > 0:
            raise InvalidParameterError("temperature must be positive")
        if not 0.0 <= self.offset_gate <= 1.0:
            raise InvalidParameterError("offset gate must lie in [0, 1]")


_COST_FLOOR = 1e-3


def _subpixel_1d(c_minus, c_zero, c_plus):
    """Per-axis quadratic peak fit on log-costs (floored to stay positive).

    Exact for a Gaussian correlation falloff. The center cost itself bounds
    the apex distance under that model (|x*| = sqrt(-2 ln c0 / -denom)); the
    fit is clipped to min(bound, 0.5), which pins exact matches (c0 = 1) to
    zero offset even when the neighbor decay is asymmetric.
    """
    lm = np.log(np.maximum(c_minus, _COST_FLOOR))
    l0 = np.log(np.maximum(c_zero, _COST_FLOOR))
    lp = np.log(np.maximum(c_plus, _COST_FLOOR))
    denom = lm - 2.0 * l0 + lp
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom < -1e-12, 0.5 * (lm - lp) / denom, 0.0)
        model_cap = np.sqrt(2.0 * np.maximum(-l0, 0.0) / np.maximum(-denom, 1e-12))
    return np.clip(delta, -np.minimum(model_cap, 0.5), np.minimum(model_cap, 0.5))


def refine_block(pyr: CorrelationPyramid, positions, cfg: RefineConfig | None = None):
    """One offset-regression block over a correlation pyramid.

    Per pixel: displacement of the level-0 lookup-window maximum, sharpened by
    a quadratic sub-pixel fit around the peak in the underlying volume, capped
    at the lookup radius; certainty is the rescaled logistic of the margin
    between the peak and the best valid cost more than 1 px away (Chebyshev).
    Pixels with fully invalid windows get delta 0 and certainty 0.

    Returns (delta (H, W, 2), certainty (H, W)).
    """
    cfg = cfg or RefineConfig(radius=pyr.radius)
    pos = np.asarray(getattr(positions, "positions", positions), dtype=np.float64)
    h, w = pos.shape[:2]
    n = h * w
    r = cfg.radius
    k = 2 * r + 1

    # peak finding and margins need only the level-0 window; the full
    # multi-level lookup stays available through correlation_lookup
    level0 = CorrelationPyramid(levels=[pyr.levels[0]], radius=r)
    taps, valid = correlation_lookup(level0, pos, radius=r)
    win = taps[:, :, 0].reshape(n, k * k)
    wok = valid[:, :, 0].reshape(n, k * k)
    neg = np.where(wok, win, -np.inf)
    any_valid = wok.any(axis=1)
    peak_idx = np.argmax(neg, axis=1)
    peak_val = neg[np.arange(n), peak_idx]

    # margin against the best cost more than 1 px (Chebyshev) from the peak tap
    py, px = np.divmod(peak_idx, k)
    oy, ox = np.divmod(np.arange(k * k), k)
    near = (np.abs(oy[None, :] - py[:, None]) <= 1) & (np.abs(ox[None, :] - px[:, None]) <= 1)
    second = np.where(near | ~wok, -np.inf, win).max(axis=1)
    with np.errstate(invalid="ignore"):
        margin = np.where(np.isfinite(second) & np.isfinite(peak_val),
                          np.maximum(peak_val - second, 0.0),
                          np.maximum(np.nan_to_num(peak_val, neginf=0.0), 0.0))
    certainty = 2.0 / (1.0 + np.exp(-margin / cfg.temperature)) - 1.0

    # sub-pixel: quadratic fit on the level-0 volume cells around the peak
    vol = pyr.levels[0].reshape(n, *pyr.levels[0].shape[2:])
    ht, wt = vol.shape[1:]
    flat_pos = pos.reshape(n, 2)
    if ht < 3 or wt < 3:  # no room for a 3x3 neighborhood
        delta = np.where(any_valid[:, None],
                         np.clip(np.stack([px - r, py - r], axis=1).astype(np.float64),
                                 -r, r), 0.0)
        certainty = np.where(any_valid, certainty, 0.0)
        return delta.reshape(h, w, 2), np.clip(certainty.reshape(h, w), 0.0, 1.0)
    peak_pos = flat_pos + np.stack([px - r, py - r], axis=1).astype(np.float64)
    mu = np.clip(np.round(peak_pos[:, 0]).astype(np.int64), 1, max(wt - 2, 1))
    mv = np.clip(np.round(peak_pos[:, 1]).astype(np.int64), 1, max(ht - 2, 1))
    rows = np.arange(n)
    for _ in range(2):  # walk to the local cell maximum (<= 2 steps)
        c3 = vol[rows[:, None, None],
                 (mv[:, None, None] + np.arange(-1, 2)[None, :, None]),
                 (mu[:, None, None] + np.arange(-1, 2)[None, None, :])]
        flat3 = c3.reshape(n, 9)
        best9 = np.argmax(flat3, axis=1)
        dy, dx = np.divmod(best9, 3)
        if (best9 == 4).all():
            break
        mu = np.clip(mu + dx - 1, 1, max(wt - 2, 1))
        mv = np.clip(mv + dy - 1, 1, max(ht - 2, 1))
    c3 = vol[rows[:, None, None],
             (mv[:, None, None] + np.arange(-1, 2)[None, :, None]),
             (mu[:, None, None] + np.arange(-1, 2)[None, None, :])]
    du = _subpixel_1d(c3[:, 1, 0], c3[:, 1, 1], c3[:, 1, 2])
    dv = _subpixel_1d(c3[:, 0, 1], c3[:, 1, 1], c3[:, 2, 1])
    refined = np.stack([mu + du, mv + dv], axis=1)

    delta = np.clip(refined - flat_pos, -r, r)
    delta = np.where(any_valid[:, None], delta, 0.0)
    certainty = np.where(any_valid, certainty, 0.0)
    return delta.reshape(h, w, 2), np.clip(certainty.reshape(h, w), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class RefineDiagnostics:
    block_positions: list = field(default_factory=list)
    block_deltas: list = field(default_factory=list)
    block_certainties: list = field(default_factory=list)
    upsampled_certainties: list = field(default_factory=list)


def refine(p0: PositionMap, pyramids, cfg: RefineConfig | None = None, mask=None):
    """Run L offset blocks over ascending block resolutions.

    For each block: resize/rescale P to the block grid, run refine_block,
    upsample the offsets back (rescaling coordinates) and add to P; the final
    certainty is the mean of the L upsampled per-block certainties. When the
    observation foreground `mask` is given, cells outside it contribute no
    offsets (their positions stay on the incoming map).

    Returns (PositionMap, CertaintyMap, RefineDiagnostics).
    """
    cfg = cfg or RefineConfig()
    if not pyramids:
        raise InvalidParameterError("need at least one block pyramid")
    sizes = [pyr.levels[0].shape[:2] for pyr in pyramids]
    for a, b in zip(sizes, sizes[1:]):
        if not (b[0] >= a[0] and b[1] >= a[1]):
            raise InvalidParameterError("block resolutions must be ascending")

    h, w = p0.shape
    fh, fw = p0.frame_size
    p = p0.positions.copy()
    diag = RefineDiagnostics()
    cert_sum = np.zeros((h, w))
    mask_f = None if mask is None else np.asarray(mask, dtype=np.float64)
    for pyr in pyramids:
        bh, bw = pyr.levels[0].shape[:2]
        scale = np.array([bw / fw, bh / fh])
        # positions convert between pixel-center frames: x_b = (x + 0.5)·s - 0.5;
        # offsets are differences and scale purely
        p_block = (resize_field(p, (bh, bw), extrapolate=True) + 0.5) * scale - 0.5
        delta, cert = refine_block(pyr, p_block, cfg)
        # indistinct matches (ambiguous windows, off-mask cells) contribute no
        # update; zeroing before upsampling keeps their garbage offsets from
        # bleeding across the mask boundary
        apply_cell = cert > cfg.offset_gate
        if mask_f is not None:
            apply_cell &= resize_field(mask_f, (bh, bw), extrapolate=False) > 0.5
        gated = np.where(apply_cell[..., None], delta, 0.0)
        delta_up = resize_field(gated, (h, w), extrapolate=True) / scale
        p = p + delta_up
        cert_up = np.clip(resize_field(cert, (h, w), extrapolate=False), 0.0, 1.0)
        cert_sum += cert_up
        diag.block_positions.append(p_block)
        diag.block_deltas.append(delta)
        diag.block_certainties.append(cert)
        diag.upsampled_certainties.append(cert_up)
    return (PositionMap(p, p0.frame_size),
            CertaintyMap(cert_sum / len(pyramids)), diag)


def loss_fine(deltas, certs, gt_deltas, gt_certs, lam=1.0, mu=1.0):
    """Masked L1 on offsets plus BCE on certainties, summed over levels.

    The L1 term is masked by the ground-truth certainty exactly (all-zero
    ground truth kills it regardless of the prediction); certainties are
    clamped to [1e-7, 1 - 1e-7] before the BCE. Returns
    (loss, grads w.r.t. each delta, grads w.r.t. each certainty).
    """
    if lam < 0 or mu < 0:
        raise InvalidParameterError("loss weights must be non-negative")
    if not (len(deltas) == len(certs) == len(gt_deltas) == len(gt_certs)):
        raise DimensionMismatchError("per-level lists must have equal length")
    eps = 1e-7
    total = 0.0
    grads_d, grads_c = [], []
    for dp, c, dp_hat, c_hat in zip(deltas, certs, gt_deltas, gt_certs):
        dp = np.asarray(dp, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        dp_hat = np.asarray(dp_hat, dtype=np.float64)
        c_hat = np.asarray(c_hat, dtype=np.float64)
        if dp.shape != dp_hat.shape or c.shape != c_hat.shape or dp.shape[:2] != c.shape:
            raise DimensionMismatchError("level shapes disagree")
        diff = dp - dp_hat
        total += lam * float(np.abs(c_hat[..., None] * diff).sum())
        cc = np.clip(c, eps, 1.0 - eps)
        total += mu * float(-(c_hat * np.log(cc) + (1 - c_hat) * np.log(1 - cc)).sum())
        grads_d.append(lam * c_hat[..., None] * np.sign(diff))
        in_range = (c > eps) & (c < 1.0 - eps)
        grads_c.append(np.where(in_range, mu * (-c_hat / cc + (1 - c_hat) / (1 - cc)), 0.0))
    return total, grads_d, grads_c


# ---------------------------------------------------------------------------
# persistence and visualization

def _save_grid(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _load_grid(path, magic, channels):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != magic:
        raise FormatError(f"bad magic in {path!r}", offset=0)
    if len(data) < 16:
        raise FormatError("truncated header", offset=len(data))
    h, w = struct.unpack_from("<II", data, 8)
    expected = 16 + h * w * channels * 4
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", offset=len(data))
    flat = np.frombuffer(data, dtype="<f4", count=h * w * channels, offset=16)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return flat.reshape(shape).astype(np.float64)


def save_position_map(pmap: PositionMap, path):
    _save_grid(path, FLOW_MAGIC, pmap.positions)


def load_position_map(path, frame_size=None) -> PositionMap:
    arr = _load_grid(path, FLOW_MAGIC, 2)
    return PositionMap(arr, frame_size or arr.shape[:2])


def save_certainty_map(cmap: CertaintyMap, path):
    _save_grid(path, CERT_MAGIC, cmap.values)


def load_certainty_map(path) -> CertaintyMap:
    return CertaintyMap(np.clip(_load_grid(path, CERT_MAGIC, 1), 0.0, 1.0))


def _flow_colorwheel():
    """Standard 55-color optical-flow wheel (RY/YG/GC/CB/BM/MR sectors)."""
    sectors = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
               (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
               (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    wheel = []
    for count, start, end in sectors:
        for i in range(count):
            t = i / count
            wheel.append([s + t * (e - s) for s, e in zip(start, end)])
    return np.array(wheel)


def flow_to_rgb(flow, max_magnitude=None):
    """Color-wheel encoding of a dense flow field (H, W, 2) -> uint8 (H, W, 3)."""
    flow = np.asarray(flow, dtype=np.float64)
    mag = np.sqrt((flow ** 2).sum(axis=-1))
    if max_magnitude is None:
        max_magnitude = max(float(mag.max()), 1e-9)
    wheel = _flow_colorwheel()
    ncols = len(wheel)
    angle = np.arctan2(-flow[..., 1], -flow[..., 0]) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[..., None]
    col = wheel[k0] * (1 - f) + wheel[k1] * f
    col /= 255.0
    radius = np.clip(mag / max_magnitude, 0, 1)[..., None]
    col = 1 - radius * (1 - col)
    return np.clip(col * 255, 0, 255).astype(np.uint8)


def save_ppm(rgb, path):
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def flow_to_ppm(pmap: PositionMap, path, max_magnitude=None):
    """Visualize the deviation of a position map from the identity grid."""
    h, w = pmap.shape
    flow = pmap.positions - identity_grid(h, w)
    save_ppm(flow_to_rgb(flow, max_magnitude), path)
