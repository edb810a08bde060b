"""Rigid inter-volume alignment from ventricle landmarks.

Landmarks are the apex/mid/base slice centroids of the two cavity classes,
in millimeters. A rigid transform (proper rotation + translation) is fit
with the SVD/Kabsch construction; the determinant guard keeps the rotation
proper even for planar or mirrored landmark configurations. Volumes are
pulled back onto a reference grid, trilinear for grey values and
nearest-neighbor for labels.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import CLASS_NAMES, GreyVolume, LabelVolume, LV_CAVITY, RV_CAVITY

LANDMARK_CLASSES = (LV_CAVITY, RV_CAVITY)
LANDMARK_NAMES = tuple(
    f"{CLASS_NAMES[c]}_{part}" for c in LANDMARK_CLASSES for part in ("apex", "mid", "base")
)


@dataclass(frozen=True)
class LandmarkSet:
    """Named 3D points in millimeters, shape (n, 3)."""

    points: np.ndarray
    names: tuple = LANDMARK_NAMES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"landmarks must be (n, 3), got {pts.shape}")
        if len(self.names) != pts.shape[0]:
            raise ValidationError("one name per landmark point required")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "names", tuple(self.names))


@dataclass(frozen=True)
class RigidTransform:
    """x -> R @ x + t with R a proper rotation (det +1)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ValidationError("rotation matrix is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValidationError("rotation matrix is a reflection (det < 0)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = pts @ self.rotation.T + self.translation
        return out[0] if single else out

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def _slice_centroids(mask, spacing, class_name):
    occupied = np.flatnonzero(mask.any(axis=(0, 1)))
    if occupied.size == 0:
        raise ValidationError(f"cannot extract landmarks: class '{class_name}' is empty")
    sx, sy, sz = spacing
    points = []
    mid = occupied[(occupied.size - 1) // 2]
    for k in (occupied[0], mid, occupied[-1]):
        xs, ys = np.nonzero(mask[:, :, k])
        points.append((xs.mean() * sx, ys.mean() * sy, float(k) * sz))
    return points


def extract_landmarks(labels: LabelVolume) -> LandmarkSet:
    """Apex/mid/base centroids of LV and RV cavities, in millimeters."""
    if not isinstance(labels, LabelVolume):
        raise ValidationError("extract_landmarks expects a LabelVolume")
    points = []
    for class_id in LANDMARK_CLASSES:
        points.extend(
            _slice_centroids(labels.voxels == class_id, labels.spacing, CLASS_NAMES[class_id])
        )
    return LandmarkSet(np.asarray(points))


def fit_rigid(moving: LandmarkSet, fixed: LandmarkSet) -> RigidTransform:
    """Least-squares rigid transform taking ``moving`` points onto ``fixed``.

    Kabsch construction: SVD of the cross-covariance of centered point sets,
    with the sign of the smallest singular direction flipped when needed so
    the result is always a proper rotation, never a reflection.
    """
    if moving.points.shape != fixed.points.shape:
        raise ValidationError("moving and fixed landmark sets differ in size")
    if moving.points.shape[0] < 3:
        raise ValidationError("rigid fit needs at least three landmarks")
    mc = moving.points.mean(axis=0)
    fc = fixed.points.mean(axis=0)
    H = (moving.points - mc).T @ (fixed.points - fc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = fc - R @ mc
    return RigidTransform(R, t)


def landmark_rms(a: LandmarkSet, b: LandmarkSet) -> float:
    """Root-mean-square distance between corresponding landmark points."""
    if a.points.shape != b.points.shape:
        raise ValidationError("landmark sets differ in size")
    return float(np.sqrt(np.mean(np.sum((a.points - b.points) ** 2, axis=1))))


def resample_rigid(volume, transform: RigidTransform, reference):
    """Resample ``volume`` onto the grid of ``reference`` through ``transform``.

    ``transform`` maps volume coordinates (mm) to reference coordinates;
    each reference voxel center is pulled back through the inverse and
    sampled from ``volume`` — trilinear for grey, nearest for labels,
    zero/background outside.
    """
    if not isinstance(volume, (GreyVolume, LabelVolume)):
        raise ValidationError("resample_rigid expects a GreyVolume or LabelVolume")
    inv = transform.inverse()
    nx, ny, nz = reference.dims
    grid = np.meshgrid(
        np.arange(nx) * reference.spacing[0],
        np.arange(ny) * reference.spacing[1],
        np.arange(nz) * reference.spacing[2],
        indexing="ij",
    )
    coords_mm = np.stack([g.ravel() for g in grid], axis=1)
    pulled = inv.apply(coords_mm)
    index_coords = [
        (pulled[:, axis] / volume.spacing[axis]).reshape(nx, ny, nz) for axis in range(3)
    ]
    if isinstance(volume, GreyVolume):
        out = ndimage.map_coordinates(
            volume.voxels.astype(np.float64), index_coords, order=1,
            mode="constant", cval=0.0,
        )
        return GreyVolume(
            np.clip(out, 0.0, 1.0).astype(np.float32),
            reference.spacing, volume.phase, volume.domain,
        )
    out = ndimage.map_coordinates(
        volume.voxels, index_coords, order=0, mode="constant", cval=0,
    )
    return LabelVolume(out, reference.spacing, volume.phase, volume.domain, volume.num_classes)
