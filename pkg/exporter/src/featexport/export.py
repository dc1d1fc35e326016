"""Manifest-driven batch export of patch features to PICOFEAT files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbones import load_backbone
from .picofeat import write_picofeat


@dataclass(frozen=True)
class ExportManifest:
    """Inputs for one export run.

    images is a list of {"image": path, "mask": optional path}; every image is
    resized to `resize` (H, W), which must divide into whole patches.
    """

    images: list
    output_dir: str
    model: str = "patchdct-64"
    patch_size: int = 14
    resize: tuple = (224, 224)

    def __post_init__(self):
        h, w = self.resize
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("resized images must divide into whole patches")
        if not self.images:
            raise ValueError("manifest lists no images")

    @classmethod
    def from_json(cls, obj: dict) -> "ExportManifest":
        return cls(images=list(obj["images"]),
                   output_dir=obj["output_dir"],
                   model=obj.get("model", "patchdct-64"),
                   patch_size=int(obj.get("patch_size", 14)),
                   resize=tuple(obj.get("resize", (224, 224))))

    @classmethod
    def from_file(cls, path) -> "ExportManifest":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _load_image(path, size_hw):
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size_hw[1], size_hw[0]), Image.BILINEAR)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"unreadable image {path!r}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float64) / 255.0


def _load_mask(path, size_hw):
    try:
        with Image.open(path) as img:
            gray = img.convert("L").resize((size_hw[1], size_hw[0]), Image.NEAREST)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"unreadable mask {path!r}: {exc}") from exc
    return np.asarray(gray) > 127


def _majority_patch_mask(mask, patch_size):
    hf, wf = mask.shape[0] // patch_size, mask.shape[1] // patch_size
    cells = mask.reshape(hf, patch_size, wf, patch_size)
    return cells.mean(axis=(1, 3)) >= 0.5


def export(manifest: ExportManifest):
    """Write one PICOFEAT per manifest entry plus index.json.

    Returns the index entries. Raises ValueError for unreadable inputs and
    ModelLoadError when the backbone cannot be constructed.
    """
    backbone = load_backbone(manifest.model)
    os.makedirs(manifest.output_dir, exist_ok=True)
    entries = []
    for spec in manifest.images:
        image_path = spec["image"]
        image = _load_image(image_path, manifest.resize)
        grid = backbone.patch_features(image, manifest.patch_size)
        if spec.get("mask"):
            mask = _majority_patch_mask(_load_mask(spec["mask"], manifest.resize),
                                        manifest.patch_size)
        else:
            mask = np.ones(grid.shape[:2], dtype=bool)
        stem = os.path.splitext(os.path.basename(image_path))[0]
        out_path = os.path.join(manifest.output_dir, stem + ".feat")
        write_picofeat(out_path, grid, mask, manifest.patch_size)
        entries.append({"input": image_path, "mask": spec.get("mask"),
                        "output": out_path, "h_f": grid.shape[0],
                        "w_f": grid.shape[1], "dim": grid.shape[2],
                        "patch_size": manifest.patch_size,
                        "model": manifest.model})
    index_path = os.path.join(manifest.output_dir, "index.json")
    with open(index_path, "w") as f:
        json.dump({"model": manifest.model, "entries": entries}, f,
                  sort_keys=True, indent=2)
        f.write("\n")
    return entries
