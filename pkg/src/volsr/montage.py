"""Slice-montage PNG export for quick visual review of volumes.

Slices are tiled row-major into a near-square grid. When labels are given,
class contours are overdrawn in fixed per-class colors; every non-contour
pixel stays pure grey (r == g == b), which makes the overlay recoverable
from the PNG itself.
"""

import io
import math

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import ValidationError
from .ioutil import atomic_write_bytes
from .volume import GreyVolume, LabelVolume

# Contour palette, one color per foreground class. Deliberately never grey.
CONTOUR_COLORS = {
    1: (230, 60, 60),    # LV cavity
    2: (60, 200, 60),    # LV myocardium
    3: (70, 110, 240),   # RV cavity
}

MAX_SLICES = 64


def montage_grid(n_slices: int):
    """Grid layout for ``n_slices`` tiles: (rows, cols), cols = ceil(sqrt(n))."""
    if n_slices < 1:
        raise ValidationError("montage needs at least one slice")
    cols = math.ceil(math.sqrt(n_slices))
    rows = math.ceil(n_slices / cols)
    return rows, cols


def slice_indices(n_total: int, limit: int = MAX_SLICES):
    """All slice indices when they fit, else ``limit`` evenly spaced ones."""
    if n_total <= limit:
        return list(range(n_total))
    return sorted(set(int(round(i)) for i in np.linspace(0, n_total - 1, limit)))


def _extract_slice(vox, plane, index):
    # axial tiles are (ny, nx) images indexed by z; long-axis tiles are
    # (nz, nx) images indexed by y. Pixel (row, col) maps back to a voxel
    # as documented in export_montage.
    if plane == "axial":
        return vox[:, :, index].T
    return vox[:, index, :].T


def boundary_mask(labels_2d):
    """Pixels of a foreground class with any in-plane 4-neighbor of a different class."""
    lab = labels_2d
    diff = np.zeros(lab.shape, dtype=bool)
    diff[1:, :] |= lab[1:, :] != lab[:-1, :]
    diff[:-1, :] |= lab[:-1, :] != lab[1:, :]
    diff[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    diff[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    return diff & (lab > 0)


def export_montage(volume, labels, path, plane="axial", meta=None):
    """Write a tiled 8-bit RGB PNG of evenly spaced slices of ``volume``.

    ``labels`` may be None. ``plane`` is "axial" (z-indexed, tiles show x/y)
    or "long-axis" (y-indexed, tiles show x/z). ``meta`` string pairs are
    embedded as PNG text chunks. Inputs are never mutated.
    """
    if not isinstance(volume, GreyVolume):
        raise ValidationError("montage expects a GreyVolume")
    if labels is not None:
        if not isinstance(labels, LabelVolume):
            raise ValidationError("labels must be a LabelVolume")
        if labels.dims != volume.dims:
            raise ValidationError(
                f"label dims {labels.dims} do not match volume dims {volume.dims}"
            )
    if plane not in ("axial", "long-axis"):
        raise ValidationError(f"plane must be 'axial' or 'long-axis', got {plane!r}")

    n_total = volume.dims[2] if plane == "axial" else volume.dims[1]
    indices = slice_indices(n_total)
    rows, cols = montage_grid(len(indices))

    tile_shape = _extract_slice(volume.voxels, plane, 0).shape
    th, tw = tile_shape
    canvas = np.zeros((rows * th, cols * tw, 3), dtype=np.uint8)

    for tile_num, index in enumerate(indices):
        grey = _extract_slice(volume.voxels, plane, index)
        tile = np.repeat(np.round(grey * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
        if labels is not None:
            lab = _extract_slice(labels.voxels, plane, index)
            contour = boundary_mask(lab)
            for class_id, color in CONTOUR_COLORS.items():
                mask = contour & (lab == class_id)
                tile[mask] = color
        r, c = divmod(tile_num, cols)
        canvas[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tile

    info = PngInfo()
    for key, value in (meta or {}).items():
        info.add_text(str(key), str(value))
    buf = io.BytesIO()
    Image.fromarray(canvas, mode="RGB").save(buf, format="PNG", pnginfo=info)
    atomic_write_bytes(path, buf.getvalue())
