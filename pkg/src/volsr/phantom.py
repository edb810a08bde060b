"""Deterministic synthetic cardiac-like phantom corpus.

Each phantom is an ellipsoidal-shell left ventricle (cavity inside a
myocardial wall) plus a crescent-shaped right ventricle, embedded in a
textured background. The generator returns paired high-resolution grey and
label volumes; ``degrade_lr`` produces the low-resolution counterpart by
slab decimation with per-slice misalignment, bias and noise, emulating a
multi-breath-hold acquisition; ``domain_shift`` emulates a different
scanner by warping the LR intensity distribution.

Everything is a pure function of (inputs, seed): per-purpose RNG streams
are derived from the seed with tagged SeedSequences, so corpus generation
is reproducible case by case.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ParseError, ValidationError
from .ioutil import atomic_write_text, canonical_json, config_hash
from .volume import (
    CLASS_NAMES,
    FOREGROUND_CLASSES,
    GreyVolume,
    LabelVolume,
    LV_CAVITY,
    LV_MYOCARDIUM,
    RV_CAVITY,
    read_volume,
    write_volume,
)

# Seed-stream tags: one per source of randomness.
_TAG_GEOMETRY = 1
_TAG_TEXTURE = 2
_TAG_DEGRADE = 3
_TAG_SHIFT = 4

# Mean intensity per class before noise; pairwise gaps stay >= 0.15 after
# texture and blur because interiors dominate each class.
CLASS_INTENSITY = {0: 0.15, LV_CAVITY: 0.95, LV_MYOCARDIUM: 0.45, RV_CAVITY: 0.72}

PHASES = ("ED", "ES")
PHASE_CODE = {"ED": 1, "ES": 2}


def _rng(seed, tag, extra=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), int(extra)]))


@dataclass(frozen=True)
class PhantomParams:
    """Generation parameters; geometry ranges are fractions of volume extent."""

    seed: int = 0
    hr_dims: tuple = (64, 64, 32)
    hr_spacing: tuple = (1.8, 1.8, 2.0)
    lr_factor: int = 4
    phase: str = "ED"
    lv_center_jitter: float = 0.04
    lv_radius_frac: tuple = (0.13, 0.17)      # in-plane semi-axes, of x extent
    lv_radius_z_frac: tuple = (0.30, 0.36)    # z semi-axis, of z extent
    wall_frac: tuple = (0.050, 0.068)         # myocardium thickness, of x extent
    rv_offset_frac: tuple = (0.16, 0.22)      # RV center offset along +x, of x extent
    ed_scale: float = 1.0
    es_scale: float = 0.72
    noise_sigma: float = 0.03
    misalign_sigma: float = 1.0
    bias_amplitude: float = 0.10
    texture_amplitude: float = 0.04
    blur_sigma: float = 0.6

    def __post_init__(self):
        nx, ny, nz = self.hr_dims
        if nx < 8 or ny < 8 or nz < self.lr_factor:
            raise ValidationError(f"hr_dims too small: {self.hr_dims}")
        if self.lr_factor < 1 or nz % self.lr_factor != 0:
            raise ValidationError(
                f"hr z dim {nz} must be divisible by lr_factor {self.lr_factor}"
            )
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("noise_sigma", "misalign_sigma", "bias_amplitude", "texture_amplitude"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not self.es_scale < self.ed_scale:
            raise ValidationError("es_scale must be strictly less than ed_scale")

    def echo(self):
        out = {}
        for key, value in self.__dict__.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass(frozen=True)
class DomainShiftParams:
    """Intensity warp standing in for a scanner difference on LR volumes."""

    gamma: float = 2.2
    contrast: float = 0.55
    bias_amplitude: float = 0.12
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValidationError("gamma must be > 0")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValidationError("noise_sigma and bias_amplitude must be >= 0")

    def echo(self):
        return dict(self.__dict__)


DOMAIN_SHIFT_PRESETS = {
    "default": DomainShiftParams(),
    "mild": DomainShiftParams(gamma=1.3, contrast=0.9, bias_amplitude=0.05, noise_sigma=0.01),
}


def _smooth_field(dims, coarse_shape, rng):
    """Low-frequency random field: coarse N(0,1) grid upsampled trilinearly."""
    coarse = rng.standard_normal(coarse_shape)
    coords = np.meshgrid(
        *[np.linspace(0.0, c - 1.0, n) for c, n in zip(coarse_shape, dims)],
        indexing="ij",
    )
    return ndimage.map_coordinates(coarse, coords, order=1, mode="nearest")


def _ellipsoid(coords, center, radii):
    x, y, z = coords
    cx, cy, cz = center
    rx, ry, rz = radii
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def _ventricle_landmarks(labels, class_id):
    """Apex/mid/base slice centroids (voxel coordinates) for one cavity class."""
    mask = labels == class_id
    occupied = np.flatnonzero(mask.any(axis=(0, 1)))
    if occupied.size == 0:
        return None
    points = {}
    mid_slice = occupied[(occupied.size - 1) // 2]
    for name, k in (("apex", occupied[0]), ("mid", mid_slice), ("base", occupied[-1])):
        xs, ys = np.nonzero(mask[:, :, k])
        points[name] = [float(xs.mean()), float(ys.mean()), float(k)]
    return points


def generate_phantom(params: PhantomParams):
    """Generate one phantom: (hr grey, hr labels, meta dict).

    Deterministic in params.seed; ED and ES of the same seed share anatomy,
    with cavity radii scaled down at ES (the myocardial outer surface stays
    fixed, so the wall thickens in systole).
    """
    nx, ny, nz = params.hr_dims
    sx, sy, sz = params.hr_spacing
    extent = (nx * sx, ny * sy, nz * sz)

    geo = _rng(params.seed, _TAG_GEOMETRY)
    center = np.array(extent) / 2.0 + geo.uniform(-1.0, 1.0, 3) * params.lv_center_jitter * np.array(extent)
    lv_a = geo.uniform(*params.lv_radius_frac) * extent[0]
    lv_b = geo.uniform(*params.lv_radius_frac) * extent[0]
    lv_c = geo.uniform(*params.lv_radius_z_frac) * extent[2]
    wall = geo.uniform(*params.wall_frac) * extent[0]
    rv_dx = geo.uniform(*params.rv_offset_frac) * extent[0]
    rv_a = lv_a * geo.uniform(1.25, 1.45)
    rv_b = lv_b * geo.uniform(1.05, 1.25)
    rv_c = lv_c * geo.uniform(0.85, 1.0)

    scale = params.ed_scale if params.phase == "ED" else params.es_scale
    # The thin-walled right ventricle contracts less radially than the left.
    rv_scale = scale ** 0.5

    coords = np.meshgrid(
        np.arange(nx) * sx, np.arange(ny) * sy, np.arange(nz) * sz, indexing="ij"
    )
    cavity = _ellipsoid(coords, center, (lv_a * scale, lv_b * scale, lv_c * scale))
    outer = _ellipsoid(coords, center, (lv_a + wall, lv_b + wall, lv_c + wall))
    rv_center = center + np.array([rv_dx, 0.0, 0.0])
    rv_full = _ellipsoid(coords, rv_center, (rv_a * rv_scale, rv_b * rv_scale, rv_c * rv_scale))

    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    labels[rv_full & ~outer] = RV_CAVITY
    labels[outer & ~cavity] = LV_MYOCARDIUM
    labels[cavity] = LV_CAVITY

    for class_id in FOREGROUND_CLASSES:
        if not np.any(labels == class_id):
            raise GenerationError(
                f"phantom geometry collapsed class '{CLASS_NAMES[class_id]}' to zero voxels "
                f"(seed {params.seed})"
            )

    grey = np.empty((nx, ny, nz), dtype=np.float64)
    for class_id, base in CLASS_INTENSITY.items():
        grey[labels == class_id] = base
    tex = _rng(params.seed, _TAG_TEXTURE, PHASE_CODE[params.phase])
    grey += params.texture_amplitude * _smooth_field((nx, ny, nz), (6, 6, 4), tex)
    if params.blur_sigma > 0:
        grey = ndimage.gaussian_filter(grey, sigma=params.blur_sigma)
    grey = np.clip(grey, 0.0, 1.0)

    hr = GreyVolume(grey.astype(np.float32), params.hr_spacing, params.phase, "target")
    hr_labels = LabelVolume(labels, params.hr_spacing, params.phase, "target")

    meta = {
        "seed": params.seed,
        "phase": params.phase,
        "landmarks": {
            "lv_cavity": _ventricle_landmarks(labels, LV_CAVITY),
            "rv_cavity": _ventricle_landmarks(labels, RV_CAVITY),
        },
        "class_voxels": {CLASS_NAMES[c]: int((labels == c).sum()) for c in CLASS_NAMES},
        "params": params.echo(),
    }
    return hr, hr_labels, meta


def degrade_lr(hr: GreyVolume, hr_labels: LabelVolume, params: PhantomParams):
    """Degrade an HR pair to its LR counterpart.

    Grey slabs are averaged over ``lr_factor`` consecutive z slices; labels
    take the slab majority vote with ties broken toward the smaller id.
    Each LR slice then gets an independent integer in-plane shift
    (breath-hold misalignment, circular), a multiplicative bias, and
    additive Gaussian noise clamped back to [0, 1].
    """
    if hr.dims != hr_labels.dims:
        raise ValidationError(f"grey dims {hr.dims} != label dims {hr_labels.dims}")
    nx, ny, nz = hr.dims
    s = params.lr_factor
    if nz % s != 0:
        raise ValidationError(f"z dim {nz} not divisible by lr_factor {s}")
    nzl = nz // s

    grey = hr.voxels.astype(np.float64).reshape(nx, ny, nzl, s).mean(axis=3)

    lab4 = hr_labels.voxels.reshape(nx, ny, nzl, s)
    counts = np.stack(
        [(lab4 == c).sum(axis=3) for c in range(hr_labels.num_classes)], axis=0
    )
    # argmax returns the first maximum, i.e. the smallest class id on ties
    labels = counts.argmax(axis=0).astype(np.uint8)

    rng = _rng(params.seed, _TAG_DEGRADE, PHASE_CODE[params.phase])
    shifts = np.rint(rng.normal(0.0, params.misalign_sigma, size=(nzl, 2))).astype(int)
    biases = 1.0 + params.bias_amplitude * rng.uniform(-1.0, 1.0, size=nzl)
    for k in range(nzl):
        if shifts[k, 0] or shifts[k, 1]:
            grey[:, :, k] = np.roll(grey[:, :, k], tuple(shifts[k]), axis=(0, 1))
            labels[:, :, k] = np.roll(labels[:, :, k], tuple(shifts[k]), axis=(0, 1))
        grey[:, :, k] *= biases[k]
    if params.noise_sigma > 0:
        grey += rng.normal(0.0, params.noise_sigma, size=grey.shape)
    grey = np.clip(grey, 0.0, 1.0)

    lr_spacing = (hr.spacing[0], hr.spacing[1], hr.spacing[2] * s)
    lr = GreyVolume(grey.astype(np.float32), lr_spacing, hr.phase, hr.domain)
    lr_labels = LabelVolume(labels, lr_spacing, hr.phase, hr.domain, hr_labels.num_classes)
    return lr, lr_labels


def domain_shift(lr: GreyVolume, params: DomainShiftParams) -> GreyVolume:
    """Intensity warp v -> clamp(contrast * v**gamma + bias_field + noise)."""
    rng = _rng(params.seed, _TAG_SHIFT)
    v = lr.voxels.astype(np.float64)
    out = params.contrast * np.power(v, params.gamma)
    if params.bias_amplitude > 0:
        out += params.bias_amplitude * _smooth_field(lr.dims, (3, 3, 2), rng)
    if params.noise_sigma > 0:
        out += rng.normal(0.0, params.noise_sigma, size=v.shape)
    out = np.clip(out, 0.0, 1.0)
    return GreyVolume(out.astype(np.float32), lr.spacing, lr.phase, "source")


def class_mean_gap(grey: GreyVolume, labels: LabelVolume) -> float:
    """Smallest pairwise gap between per-class mean intensities."""
    means = []
    for class_id in range(labels.num_classes):
        mask = labels.voxels == class_id
        if mask.any():
            means.append(float(grey.voxels[mask].mean()))
    means = sorted(means)
    return min(b - a for a, b in zip(means, means[1:]))


def generate_corpus(
    out_dir,
    counts,
    seed,
    base_params: PhantomParams = None,
    phases=PHASES,
    shift: DomainShiftParams = None,
):
    """Write a phantom corpus under ``out_dir``.

    ``counts`` maps split name -> number of anatomies; each anatomy yields
    one volume per phase. Files per case: <id>_{hr,lr,hr_seg,lr_seg}.mvol
    and <id>_meta.json; corpus.json at the root records the generation
    parameters and their hash. With ``shift`` given, every LR grey volume
    is domain-shifted and the corpus is tagged as source domain.
    """
    base_params = base_params if base_params is not None else PhantomParams()
    identity = {
        "version": 1,
        "seed": int(seed),
        "counts": {k: int(v) for k, v in counts.items()},
        "phases": list(phases),
        "params": base_params.echo(),
        "shift": shift.echo() if shift is not None else None,
    }
    identity["config_hash"] = config_hash(identity)

    os.makedirs(out_dir, exist_ok=True)
    anatomy_index = 0
    manifest = {}
    for split, n_cases in counts.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        case_ids = []
        for _ in range(n_cases):
            for phase in phases:
                params = replace(base_params, seed=seed + anatomy_index, phase=phase)
                hr, hr_labels, meta = generate_phantom(params)
                lr, lr_labels = degrade_lr(hr, hr_labels, params)
                if shift is not None:
                    case_shift = replace(shift, seed=seed + anatomy_index)
                    lr = domain_shift(lr, case_shift)
                    lr_labels = LabelVolume(
                        lr_labels.voxels, lr_labels.spacing, lr_labels.phase,
                        "source", lr_labels.num_classes,
                    )
                    hr = GreyVolume(hr.voxels, hr.spacing, hr.phase, "source")
                    hr_labels = LabelVolume(
                        hr_labels.voxels, hr_labels.spacing, hr_labels.phase,
                        "source", hr_labels.num_classes,
                    )
                    meta["shift"] = case_shift.echo()
                case_id = f"c{anatomy_index:04d}_{phase.lower()}"
                prefix = os.path.join(split_dir, case_id)
                write_volume(prefix + "_hr.mvol", hr)
                write_volume(prefix + "_lr.mvol", lr)
                write_volume(prefix + "_hr_seg.mvol", hr_labels)
                write_volume(prefix + "_lr_seg.mvol", lr_labels)
                atomic_write_text(prefix + "_meta.json", json.dumps(meta, indent=1, sort_keys=True))
                case_ids.append(case_id)
            anatomy_index += 1
        manifest[split] = case_ids

    identity["cases"] = manifest
    atomic_write_text(os.path.join(out_dir, "corpus.json"), canonical_json(identity))
    return identity


def load_corpus(root) -> dict:
    """Read a corpus index written by ``generate_corpus``."""
    path = os.path.join(root, "corpus.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read corpus index {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"corpus index {path} is not valid JSON: {exc}") from exc
    for key in ("cases", "config_hash"):
        if key not in doc:
            raise ParseError(f"corpus index {path} lacks {key!r}")
    return doc


def load_case(root, split: str, case_id: str) -> dict:
    """Load the four volumes of one corpus case."""
    prefix = os.path.join(root, split, case_id)
    return {
        "case_id": case_id,
        "split": split,
        "hr": read_volume(prefix + "_hr.mvol"),
        "lr": read_volume(prefix + "_lr.mvol"),
        "hr_seg": read_volume(prefix + "_hr_seg.mvol"),
        "lr_seg": read_volume(prefix + "_lr_seg.mvol"),
    }
