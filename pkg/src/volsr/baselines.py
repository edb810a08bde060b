"""Classic interpolation baselines for through-plane upsampling.

These are the comparison floor the learned model has to beat: the LR
stack is stretched along z back to HR slice count by nearest, linear, or
cubic B-spline interpolation on the align-corners grid (LR slice 0 maps
to HR slice 0, LR slice nz-1 to HR slice s*nz-1). In-plane resolution is
untouched. Labels are always nearest-interpolated whatever the grey
method, since averaging class ids is meaningless.
"""

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import ValidationError
from .volume import GreyVolume, LabelVolume

BASELINE_METHODS = ("nearest", "trilinear", "bspline")


def _z_grid(nz_lr: int, nz_hr: int) -> np.ndarray:
    return np.linspace(0.0, nz_lr - 1.0, nz_hr)


def _upsample_nearest(values: np.ndarray, nz_hr: int) -> np.ndarray:
    idx = np.rint(_z_grid(values.shape[2], nz_hr)).astype(np.intp)
    return values[:, :, idx]


def _upsample_linear(values: np.ndarray, nz_hr: int) -> np.ndarray:
    grid = _z_grid(values.shape[2], nz_hr)
    lo = np.floor(grid).astype(np.intp)
    hi = np.minimum(lo + 1, values.shape[2] - 1)
    frac = (grid - lo).astype(np.float64)
    v = values.astype(np.float64)
    return v[:, :, lo] * (1.0 - frac) + v[:, :, hi] * frac


def _upsample_bspline(values: np.ndarray, nz_hr: int) -> np.ndarray:
    nz = values.shape[2]
    if nz < 4:
        raise ValidationError(f"bspline needs at least 4 slices, got {nz}")
    spline = make_interp_spline(np.arange(nz), values.astype(np.float64), k=3, axis=2)
    return spline(_z_grid(nz, nz_hr))


_GREY_KERNELS = {
    "nearest": _upsample_nearest,
    "trilinear": _upsample_linear,
    "bspline": _upsample_bspline,
}


def baseline_upsample(lr_grey: GreyVolume, lr_labels, method: str, factor: int):
    """Upsample an LR grey volume (and optional labels) along z by ``factor``.

    Returns ``(GreyVolume, LabelVolume | None)`` with nz multiplied by the
    factor and z spacing divided by it.
    """
    if method not in BASELINE_METHODS:
        raise ValidationError(
            f"unknown upsampling method {method!r}; choose from {BASELINE_METHODS}"
        )
    factor = int(factor)
    if factor < 1:
        raise ValidationError(f"upsampling factor must be >= 1, got {factor}")
    nz_hr = lr_grey.voxels.shape[2] * factor
    grey_up = np.clip(_GREY_KERNELS[method](lr_grey.voxels, nz_hr), 0.0, 1.0)
    sx, sy, sz = lr_grey.spacing
    spacing = (sx, sy, sz / factor)
    out_grey = GreyVolume(
        voxels=grey_up.astype(np.float32),
        spacing=spacing,
        phase=lr_grey.phase,
        domain=lr_grey.domain,
    )
    if lr_labels is None:
        return out_grey, None
    if lr_labels.voxels.shape != lr_grey.voxels.shape:
        raise ValidationError(
            f"labels {lr_labels.voxels.shape} do not match grey {lr_grey.voxels.shape}"
        )
    out_labels = LabelVolume(
        voxels=_upsample_nearest(lr_labels.voxels, nz_hr),
        spacing=spacing,
        phase=lr_labels.phase,
        domain=lr_labels.domain,
        num_classes=lr_labels.num_classes,
    )
    return out_grey, out_labels
