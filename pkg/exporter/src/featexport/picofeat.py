"""PICOFEAT container writer.

Layout (little-endian): magic "PICOFEAT", u8 version=1, u32 H_f, u32 W_f,
u32 D, u32 patch_size, f32 grid row-major, then H_f*W_f mask bytes.
"""

import struct

import numpy as np

MAGIC = b"PICOFEAT"
VERSION = 1


def write_picofeat(path, grid, mask, patch_size):
    grid = np.asarray(grid)
    mask = np.asarray(mask, dtype=bool)
    hf, wf, dim = grid.shape
    if mask.shape != (hf, wf):
        raise ValueError(f"mask shape {mask.shape} does not match grid {grid.shape[:2]}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BIIII", VERSION, hf, wf, dim, int(patch_size)))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
        f.write(mask.astype(np.uint8).tobytes())


def read_header(path):
    """Header fields of an existing file (for index checks, not a validator)."""
    with open(path, "rb") as f:
        head = f.read(8 + struct.calcsize("<BIIII"))
    if len(head) < 8 + struct.calcsize("<BIIII") or head[:8] != MAGIC:
        raise ValueError(f"not a PICOFEAT file: {path!r}")
    version, hf, wf, dim, patch_size = struct.unpack_from("<BIIII", head, 8)
    return {"version": version, "h_f": hf, "w_f": wf, "dim": dim,
            "patch_size": patch_size}
