"""Volume data model and bit-exact MVOL file I/O.

A volume is a 3D grid with physical voxel spacing in millimeters. Grey
volumes hold float32 intensities normalized to [0, 1]; label volumes hold
uint8 class ids. Both serialize to the minimal MVOL container:

    bytes 0-3   magic "MVOL"
    byte  4     format version (1)
    byte  5     dtype code (0 = float32 grey, 1 = uint8 labels)
    bytes 6-7   reserved, zero
    3 x uint32  dims (nx, ny, nz), little endian
    3 x float32 spacing (sx, sy, sz) in mm, little endian
    byte        phase code (0 = NA, 1 = ED, 2 = ES)
    byte        domain code (0 = NA, 1 = target, 2 = source)
    payload     voxels in x-fastest order

Writes are atomic (temp file + rename), so a crash never leaves a partial
file at the destination path.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .ioutil import atomic_write_bytes

MAGIC = b"MVOL"
FORMAT_VERSION = 1
HEADER_SIZE = 34

DTYPE_GREY = 0
DTYPE_LABEL = 1

PHASE_CODES = {"NA": 0, "ED": 1, "ES": 2}
DOMAIN_CODES = {"NA": 0, "target": 1, "source": 2}
_PHASE_NAMES = {v: k for k, v in PHASE_CODES.items()}
_DOMAIN_NAMES = {v: k for k, v in DOMAIN_CODES.items()}

# Label palette used throughout: phantom generation, metrics, montages.
BACKGROUND = 0
LV_CAVITY = 1
LV_MYOCARDIUM = 2
RV_CAVITY = 3
DEFAULT_NUM_CLASSES = 4
CLASS_NAMES = {
    BACKGROUND: "background",
    LV_CAVITY: "lv_cavity",
    LV_MYOCARDIUM: "lv_myocardium",
    RV_CAVITY: "rv_cavity",
}
FOREGROUND_CLASSES = (LV_CAVITY, LV_MYOCARDIUM, RV_CAVITY)


def _check_spacing(spacing):
    # Quantized to float32 so in-memory spacing equals what the file stores.
    spacing = tuple(float(np.float32(s)) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise ValidationError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


def _check_tag(value, codes, what):
    if value not in codes:
        raise ValidationError(f"{what} must be one of {sorted(codes)}, got {value!r}")
    return value


@dataclass
class GreyVolume:
    """3D intensity grid, float32 in [0, 1], shape (nx, ny, nz)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    phase: str = "NA"
    domain: str = "NA"

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ValidationError(f"grey voxels must be 3D, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValidationError("grey voxels contain non-finite values")
        if vox.size and (vox.min() < 0.0 or vox.max() > 1.0):
            raise ValidationError(
                f"grey intensities must lie in [0, 1], got range "
                f"[{vox.min():.6g}, {vox.max():.6g}]"
            )
        self.voxels = vox
        self.spacing = _check_spacing(self.spacing)
        self.phase = _check_tag(self.phase, PHASE_CODES, "phase")
        self.domain = _check_tag(self.domain, DOMAIN_CODES, "domain")

    @property
    def dims(self):
        return self.voxels.shape

    def __eq__(self, other):
        if not isinstance(other, GreyVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.phase == other.phase
            and self.domain == other.domain
            and np.array_equal(self.voxels, other.voxels)
        )

    def with_voxels(self, voxels):
        return GreyVolume(voxels, self.spacing, self.phase, self.domain)


@dataclass
class LabelVolume:
    """3D class-id grid, uint8 ids in {0 .. num_classes-1}, shape (nx, ny, nz)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    phase: str = "NA"
    domain: str = "NA"
    num_classes: int = field(default=DEFAULT_NUM_CLASSES)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValidationError(f"label voxels must be 3D, got shape {vox.shape}")
        if not np.issubdtype(vox.dtype, np.integer):
            raise ValidationError(f"label voxels must be integer, got dtype {vox.dtype}")
        if vox.size and vox.min() < 0:
            raise ValidationError("label ids must be non-negative")
        if self.num_classes < 1 or self.num_classes > 256:
            raise ValidationError(f"num_classes must be in [1, 256], got {self.num_classes}")
        if vox.size and int(vox.max()) >= self.num_classes:
            raise ValidationError(
                f"label id {int(vox.max())} out of range for {self.num_classes} classes"
            )
        self.voxels = vox.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)
        self.phase = _check_tag(self.phase, PHASE_CODES, "phase")
        self.domain = _check_tag(self.domain, DOMAIN_CODES, "domain")

    @property
    def dims(self):
        return self.voxels.shape

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.phase == other.phase
            and self.domain == other.domain
            and np.array_equal(self.voxels, other.voxels)
        )

    def with_voxels(self, voxels):
        return LabelVolume(voxels, self.spacing, self.phase, self.domain, self.num_classes)


@dataclass
class VolumeHeader:
    """Decoded MVOL header; round-trips identically through write/read."""

    dims: tuple
    spacing: tuple
    dtype_code: int
    phase: str = "NA"
    domain: str = "NA"
    version: int = FORMAT_VERSION

    def encode(self) -> bytes:
        return (
            MAGIC
            + struct.pack("<BBH", self.version, self.dtype_code, 0)
            + struct.pack("<III", *self.dims)
            + struct.pack("<fff", *self.spacing)
            + struct.pack("<BB", PHASE_CODES[self.phase], DOMAIN_CODES[self.domain])
        )

    @classmethod
    def decode(cls, raw: bytes, path="<bytes>"):
        if len(raw) < HEADER_SIZE:
            raise ParseError(f"{path}: file too short for MVOL header ({len(raw)} bytes)")
        if raw[:4] != MAGIC:
            raise ParseError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
        version, dtype_code, _reserved = struct.unpack("<BBH", raw[4:8])
        if version != FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported format version {version}")
        if dtype_code not in (DTYPE_GREY, DTYPE_LABEL):
            raise ParseError(f"{path}: unsupported dtype code {dtype_code}")
        dims = struct.unpack("<III", raw[8:20])
        spacing = struct.unpack("<fff", raw[20:32])
        phase_code, domain_code = struct.unpack("<BB", raw[32:34])
        if phase_code not in _PHASE_NAMES:
            raise ParseError(f"{path}: unknown phase code {phase_code}")
        if domain_code not in _DOMAIN_NAMES:
            raise ParseError(f"{path}: unknown domain code {domain_code}")
        return cls(
            dims=dims,
            spacing=spacing,
            dtype_code=dtype_code,
            phase=_PHASE_NAMES[phase_code],
            domain=_DOMAIN_NAMES[domain_code],
            version=version,
        )


class VolsrIOError(ValidationError):
    """Filesystem failure while writing a volume; message names the path."""


def write_volume(path, volume) -> None:
    """Serialize a GreyVolume or LabelVolume to ``path`` atomically."""
    if isinstance(volume, GreyVolume):
        dtype_code, payload_dtype = DTYPE_GREY, np.dtype("<f4")
    elif isinstance(volume, LabelVolume):
        dtype_code, payload_dtype = DTYPE_LABEL, np.dtype("u1")
    else:
        raise ValidationError(f"cannot write object of type {type(volume).__name__}")
    header = VolumeHeader(volume.dims, volume.spacing, dtype_code, volume.phase, volume.domain)
    payload = np.ascontiguousarray(volume.voxels.astype(payload_dtype)).tobytes(order="F")
    try:
        atomic_write_bytes(path, header.encode() + payload)
    except OSError as exc:
        raise VolsrIOError(f"failed to write {path}: {exc}") from exc


def read_volume(path):
    """Read an MVOL file back into a GreyVolume or LabelVolume."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    header = VolumeHeader.decode(raw, path=str(path))
    nx, ny, nz = header.dims
    itemsize = 4 if header.dtype_code == DTYPE_GREY else 1
    expected = nx * ny * nz * itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise ParseError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    if header.dtype_code == DTYPE_GREY:
        vox = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
        return GreyVolume(vox.copy(), header.spacing, header.phase, header.domain)
    vox = np.frombuffer(payload, dtype="u1").reshape((nx, ny, nz), order="F")
    num_classes = max(DEFAULT_NUM_CLASSES, int(vox.max()) + 1 if vox.size else 1)
    return LabelVolume(vox.copy(), header.spacing, header.phase, header.domain, num_classes)
