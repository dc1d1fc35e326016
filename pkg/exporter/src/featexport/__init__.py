"""Offline patch-feature exporter.

Runs a pretrained patch-feature backbone over crop/template images and writes
one PICOFEAT file per image (plus a JSON index), consumable by the pose
pipeline's file-based feature provider. Features are exported raw
(unnormalized); normalization happens on the consumer side.
"""

from .backbones import ModelLoadError, available_models, load_backbone
from .export import ExportManifest, export
from .picofeat import write_picofeat

__all__ = ["ExportManifest", "ModelLoadError", "available_models",
           "export", "load_backbone", "write_picofeat"]
__version__ = "0.1.0"
