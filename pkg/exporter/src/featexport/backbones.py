"""Patch-feature backbones.

The default family ("patchdct-D") is a fixed-weight handcrafted backbone:
per-patch low-frequency DCT coefficients of the gray channel plus color
statistics, pushed through a frozen seeded orthonormal projection to D
dimensions. It needs no downloaded weights and is bit-deterministic, which is
what the desk-scale pipeline tests rely on. Remote ViT identifiers are
resolved through torch hub when that stack is importable and raise
ModelLoadError otherwise.
"""

from __future__ import annotations

import numpy as np


class ModelLoadError(RuntimeError):
    """The requested backbone could not be constructed."""


_PROJECTION_SEED = 0xFEA7


def _dct_matrix(n):
    k = np.arange(n)
    basis = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    basis[0] *= 1.0 / np.sqrt(2.0)
    return basis * np.sqrt(2.0 / n)


class PatchDctBackbone:
    """Frozen handcrafted per-patch descriptor of dimension `dim`."""

    LOW_FREQ = 6  # keep the top-left 6x6 DCT block

    def __init__(self, dim):
        if dim < 8:
            raise ModelLoadError("patchdct needs dim >= 8")
        self.dim = dim
        self.raw_dim = self.LOW_FREQ * self.LOW_FREQ + 6  # DCT block + RGB mean/std
        rng = np.random.default_rng(_PROJECTION_SEED)
        w = rng.normal(size=(max(dim, self.raw_dim), self.raw_dim))
        q, _ = np.linalg.qr(w)
        self.projection = q[:dim, :]  # frozen weights

    def patch_features(self, image, patch_size):
        """image (H, W, 3) float in [0, 1] -> (H/ps, W/ps, dim) descriptors."""
        h, w, _ = image.shape
        hf, wf = h // patch_size, w // patch_size
        patches = image.reshape(hf, patch_size, wf, patch_size, 3)
        gray = patches.mean(axis=-1).transpose(0, 2, 1, 3)  # (hf, wf, ps, ps)
        dct = _dct_matrix(patch_size)
        coeffs = np.einsum("ia,hwab,jb->hwij", dct, gray, dct)
        low = coeffs[:, :, :self.LOW_FREQ, :self.LOW_FREQ].reshape(hf, wf, -1)
        means = patches.mean(axis=(1, 3))
        stds = patches.std(axis=(1, 3))
        raw = np.concatenate([low, means, stds], axis=-1)
        return raw @ self.projection.T


class RemoteViTBackbone:
    """Placeholder for a real frozen ViT; requires torch + downloadable weights."""

    def __init__(self, identifier):
        try:
            import torch  # noqa: F401
            import torch.hub
        except ImportError as exc:
            raise ModelLoadError(f"torch unavailable for {identifier!r}: {exc}") from exc
        try:
            self.model = torch.hub.load("facebookresearch/dinov2", identifier)
        except Exception as exc:
            raise ModelLoadError(
                f"could not load {identifier!r} (weights not reachable): {exc}") from exc
        self.model.eval()
        self.dim = getattr(self.model, "embed_dim", 1024)

    def patch_features(self, image, patch_size):
        import torch
        with torch.no_grad():
            tensor = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
            tokens = self.model.forward_features(tensor)["x_norm_patchtokens"]
        h, w, _ = image.shape
        return tokens[0].reshape(h // patch_size, w // patch_size, -1).numpy()


def available_models():
    return ("patchdct-64", "patchdct-256", "patchdct-1024", "dinov2_vitl14")


def load_backbone(identifier):
    """Backbone registry; unknown or unloadable models raise ModelLoadError."""
    if identifier.startswith("patchdct-"):
        try:
            dim = int(identifier.split("-", 1)[1])
        except ValueError as exc:
            raise ModelLoadError(f"bad patchdct dimension in {identifier!r}") from exc
        return PatchDctBackbone(dim)
    if identifier.startswith("dinov2"):
        return RemoteViTBackbone(identifier)
    raise ModelLoadError(f"unknown model {identifier!r}; "
                         f"available: {', '.join(available_models())}")
