"""Volume containers and geometry/morphology primitives.

Arrays are indexed ``[x, y, z]``; on disk NIfTI stores x fastest, which is
the Fortran order of these arrays. Binary masks are plain boolean arrays
that share the shape of the volume they describe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, GeometryMismatch

MODALITIES = ("T1w", "T1wCE", "T2w", "FLAIR")


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(s > 0 and math.isfinite(s) for s in sp):
        raise ValueError(f"spacing must be three positive finite values, got {spacing!r}")
    return sp


@dataclass(eq=False)
class Volume3D:
    """A 3D float32 scalar grid with voxel spacing (mm) and voxel->world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"Volume3D needs a rank-3 array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("Volume3D data contains NaN or Inf")
        self.data = data
        self.spacing = _as_spacing(self.spacing)
        if self.affine is None:
            self.affine = np.diag([*self.spacing, 1.0])
        else:
            self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> Volume3D:
        return Volume3D(data, self.spacing, self.affine.copy())

    def same_geometry(self, other) -> bool:
        return (
            tuple(other.extents) == self.extents
            and np.allclose(other.spacing, self.spacing)
            and np.allclose(other.affine, self.affine)
        )


@dataclass(eq=False)
class MultiModalStudy:
    """The four co-registered modalities of one case."""

    case_id: str
    volumes: Mapping[str, Volume3D] = field(default_factory=dict)

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.volumes]
        if missing:
            raise ValueError(f"study {self.case_id!r} is missing modalities {missing}")
        extra = set(self.volumes) - set(MODALITIES)
        if extra:
            raise ValueError(f"unknown modalities {sorted(extra)}")
        ref = self.volumes[MODALITIES[0]]
        for m in MODALITIES[1:]:
            if not ref.same_geometry(self.volumes[m]):
                raise GeometryMismatch(f"{self.case_id}: {m} geometry differs from {MODALITIES[0]}")
        self.volumes = {m: self.volumes[m] for m in MODALITIES}

    @property
    def reference(self) -> Volume3D:
        return self.volumes[MODALITIES[0]]

    @property
    def extents(self):
        return self.reference.extents

    @property
    def spacing(self):
        return self.reference.spacing

    @property
    def affine(self):
        return self.reference.affine

    def stack(self, modalities: Sequence[str] = MODALITIES) -> np.ndarray:
        return np.stack([self.volumes[m].data for m in modalities])


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    count: int
    sizes: np.ndarray


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    """Label maximal connected components.

    Labels are numbered by the x-fastest linear index of each component's
    first voxel. Labeling the transposed array makes scipy's raster scan run
    x-fastest, which yields exactly that order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels_t, count = ndimage.label(mask.transpose(2, 1, 0), structure=_structure(connectivity))
    labels = np.ascontiguousarray(labels_t.transpose(2, 1, 0)).astype(np.int32)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels=labels, count=int(count), sizes=sizes)


def distance_transform(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance (mm) from each voxel centre to the nearest foreground voxel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("distance transform needs at least one foreground voxel")
    return ndimage.distance_transform_edt(~mask, sampling=_as_spacing(spacing))


def morphology(mask: np.ndarray, op: str, radius_voxels: int = 1) -> np.ndarray:
    """Binary morphology with the 26-neighbourhood iterated ``radius_voxels`` times.

    Erosion treats out-of-volume voxels as foreground, so dilate-then-erode
    never removes original voxels at the border. ``close`` works on a
    zero-padded copy so that it cannot bridge the brain to the volume edge.
    """
    if radius_voxels < 0:
        raise ValueError("radius_voxels must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if op == "fill_holes":
        return ndimage.binary_fill_holes(mask)
    if radius_voxels == 0:
        return mask.copy()
    st = _structure(26)
    if op == "dilate":
        return ndimage.binary_dilation(mask, st, iterations=radius_voxels)
    if op == "erode":
        return ndimage.binary_erosion(mask, st, iterations=radius_voxels, border_value=1)
    if op == "close":
        r = radius_voxels
        padded = np.pad(mask, r)
        closed = morphology(morphology(padded, "dilate", r), "erode", r)
        return closed[r:-r, r:-r, r:-r]
    raise ValueError(f"unknown morphology op {op!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resize_array(data: np.ndarray, shape: Sequence[int], order: int = 1) -> np.ndarray:
    """Resample the last three axes onto ``shape`` keeping the field of view.

    New voxel ``j`` samples old continuous index ``(j + 0.5) * n / n' - 0.5``.
    ``order=1`` is trilinear, ``order=0`` nearest neighbour.
    """
    data = np.asarray(data)
    lead = data.shape[:-3]
    old = data.shape[-3:]
    shape = tuple(int(s) for s in shape)
    if old == shape:
        return data.copy()
    axes = [(np.arange(n_new) + 0.5) * (n_old / n_new) - 0.5 for n_old, n_new in zip(old, shape)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    flat = data.reshape((-1,) + old)
    out = np.stack(
        [ndimage.map_coordinates(ch, coords, order=order, mode="nearest") for ch in flat]
    )
    return out.reshape(lead + shape).astype(data.dtype, copy=False)


def resampled_geometry(extents, spacing, affine, new_extents):
    ratio = [n / m for n, m in zip(extents, new_extents)]
    new_spacing = tuple(s * r for s, r in zip(spacing, ratio))
    step = np.eye(4)
    for ax, r in enumerate(ratio):
        step[ax, ax] = r
        step[ax, 3] = 0.5 * r - 0.5
    return new_spacing, np.asarray(affine) @ step


def reduced_extents(extents, factor: float) -> tuple[int, int, int]:
    if factor < 1:
        raise ValueError("resample factor must be >= 1")
    return tuple(max(1, _round_half_up(n / factor)) for n in extents)


def resample(vol: Volume3D, factor: float) -> Volume3D:
    """Reduce resolution by ``factor`` while preserving the physical field of view."""
    new = reduced_extents(vol.extents, factor)
    if new == vol.extents:
        return vol.with_data(vol.data.copy())
    spacing, affine = resampled_geometry(vol.extents, vol.spacing, vol.affine, new)
    return Volume3D(resize_array(vol.data, new, order=1), spacing, affine)
