"""In-plane training augmentation: random crop plus horizontal/vertical flips.

The same geometric transform must hit the grey volume and its label map —
and, for super-resolution pairs, the LR and HR volumes — identically, so
sampling and application are split: ``sample_transform`` draws one
``PlaneTransform`` from a seed, ``apply_to_array`` replays it on any
volume that shares the in-plane dimensions. Everything acts on x/y only;
the z (through-plane) axis is never cropped or flipped, which is what
keeps one transform valid for both members of an LR/HR pair.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import GreyVolume, LabelVolume


@dataclass(frozen=True)
class AugmentationSpec:
    """What the augmentation pipeline is allowed to do.

    ``crop_size`` is the in-plane (x, y) crop in voxels, or None to keep
    the full plane. Flip probabilities are per-sample Bernoulli rates.
    """

    crop_size: tuple = (48, 48)
    hflip_p: float = 0.5
    vflip_p: float = 0.5

    def __post_init__(self):
        if self.crop_size is not None:
            size = tuple(int(c) for c in self.crop_size)
            if len(size) != 2 or any(c <= 0 for c in size):
                raise ValidationError(f"crop_size must be two positive ints, got {self.crop_size}")
            object.__setattr__(self, "crop_size", size)
        for name in ("hflip_p", "vflip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")

    def echo(self):
        out = dict(self.__dict__)
        if out["crop_size"] is not None:
            out["crop_size"] = list(out["crop_size"])
        return out


@dataclass(frozen=True)
class PlaneTransform:
    """One concrete draw: crop window (or None) plus flip decisions."""

    crop: tuple = None  # (ox, oy, cx, cy)
    hflip: bool = False
    vflip: bool = False


def sample_transform(spec: AugmentationSpec, in_plane_dims, seed: int) -> PlaneTransform:
    """Draw a transform for a volume whose x/y plane is ``in_plane_dims``."""
    nx, ny = (int(d) for d in in_plane_dims)
    rng = np.random.default_rng(np.random.SeedSequence([0x4175, int(seed)]))
    crop = None
    if spec.crop_size is not None:
        cx, cy = spec.crop_size
        if cx > nx or cy > ny:
            raise ValidationError(
                f"crop {spec.crop_size} does not fit in plane ({nx}, {ny})"
            )
        ox = int(rng.integers(0, nx - cx + 1))
        oy = int(rng.integers(0, ny - cy + 1))
        crop = (ox, oy, cx, cy)
    hflip = bool(rng.random() < spec.hflip_p)
    vflip = bool(rng.random() < spec.vflip_p)
    return PlaneTransform(crop=crop, hflip=hflip, vflip=vflip)


def apply_to_array(values: np.ndarray, transform: PlaneTransform) -> np.ndarray:
    """Replay ``transform`` on one (nx, ny, nz) array; returns a copy."""
    if values.ndim != 3:
        raise ValidationError(f"expected a 3-d array, got shape {values.shape}")
    out = values
    if transform.crop is not None:
        ox, oy, cx, cy = transform.crop
        if ox < 0 or oy < 0 or ox + cx > values.shape[0] or oy + cy > values.shape[1]:
            raise ValidationError(
                f"crop window {transform.crop} outside plane {values.shape[:2]}"
            )
        out = out[ox : ox + cx, oy : oy + cy, :]
    if transform.hflip:
        out = out[::-1, :, :]
    if transform.vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment(grey: GreyVolume, labels: LabelVolume, spec: AugmentationSpec, seed: int):
    """Apply one shared random transform to a grey/label pair."""
    if grey.voxels.shape != labels.voxels.shape:
        raise ValidationError(
            f"grey {grey.voxels.shape} and labels {labels.voxels.shape} differ"
        )
    t = sample_transform(spec, grey.voxels.shape[:2], seed)
    new_grey = GreyVolume(
        voxels=apply_to_array(grey.voxels, t),
        spacing=grey.spacing,
        phase=grey.phase,
        domain=grey.domain,
    )
    new_labels = LabelVolume(
        voxels=apply_to_array(labels.voxels, t),
        spacing=labels.spacing,
        phase=labels.phase,
        domain=labels.domain,
        num_classes=labels.num_classes,
    )
    return new_grey, new_labels
