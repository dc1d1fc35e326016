"""Progressive pixel-to-pixel correspondence pipeline for novel-object 6D pose
estimation: template scoring, coarse matching, 4-DoF affine estimation,
multi-scale local refinement, and EPnP/RANSAC pose solving, all testable at
desk scale against synthetic oracles."""

from . import (errors, features, geometry, interp, metrics, pipeline, pnp,
               stage2, stage3, synth)

__all__ = ["errors", "features", "geometry", "interp", "metrics", "pipeline",
           "pnp", "stage2", "stage3", "synth"]
__version__ = "0.1.0"
