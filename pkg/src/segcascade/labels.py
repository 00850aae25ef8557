"""Tumour label codes, derived regions, and channel encodings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CodeOutOfRange, GeometryMismatch
from .volume import Volume3D, _as_spacing, reduced_extents, resampled_geometry, resize_array

BG, ET, NET, CC, ED = 0, 1, 2, 3, 4
CODES = {"BG": BG, "ET": ET, "NET": NET, "CC": CC, "ED": ED}
CODE_NAMES = {v: k for k, v in CODES.items()}

REGIONS: dict[str, frozenset[int]] = {
    "BG": frozenset({BG}),
    "ET": frozenset({ET}),
    "NET": frozenset({NET}),
    "CC": frozenset({CC}),
    "ED": frozenset({ED}),
    "TC": frozenset({ET, NET, CC}),
    "WT": frozenset({ET, NET, CC, ED}),
    "ST": frozenset({ET, NET}),
}
# Challenge tables call the non-enhancing region "NETC".
REGION_ALIASES = {"NETC": "NET"}

EVAL_REGIONS = ("ET", "NET", "CC", "ED", "TC", "WT")


def region_codes(region: str) -> frozenset[int]:
    name = REGION_ALIASES.get(region, region)
    try:
        return REGIONS[name]
    except KeyError:
        raise ValueError(f"unknown region {region!r}") from None


@dataclass(eq=False)
class LabelVolume:
    codes: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 3:
            raise ValueError(f"LabelVolume needs a rank-3 array, got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() > ED):
            raise CodeOutOfRange(f"codes outside 0..4: {sorted(set(np.unique(codes)) - set(CODES.values()))}")
        self.codes = codes.astype(np.uint8)
        self.spacing = _as_spacing(self.spacing)
        self.affine = (
            np.diag([*self.spacing, 1.0])
            if self.affine is None
            else np.asarray(self.affine, dtype=np.float64).reshape(4, 4)
        )

    @property
    def extents(self):
        return tuple(int(n) for n in self.codes.shape)

    def counts(self) -> dict[str, int]:
        hist = np.bincount(self.codes.ravel(), minlength=5)
        return {CODE_NAMES[c]: int(hist[c]) for c in range(1, 5)}

    def to_volume(self) -> Volume3D:
        return Volume3D(self.codes.astype(np.float32), self.spacing, self.affine)

    @classmethod
    def from_volume(cls, vol: Volume3D, label_map: Mapping[int, int] | None = None) -> LabelVolume:
        """Convert a decoded label image, remapping foreign codes through ``label_map``."""
        raw = np.rint(vol.data).astype(np.int64)
        if not np.array_equal(raw, vol.data):
            raise CodeOutOfRange("label image holds non-integer values")
        if label_map:
            out = raw.copy()
            for src, dst in label_map.items():
                out[raw == int(src)] = int(dst)
            raw = out
        return cls(raw, vol.spacing, vol.affine)


@dataclass(eq=False)
class ChannelStack:
    """Named channels sharing one grid; ``data`` has shape (channels, x, y, z)."""

    names: tuple[str, ...]
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.names = tuple(self.names)
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != len(self.names):
            raise ValueError(f"{len(self.names)} names for data of shape {self.data.shape}")
        self.spacing = _as_spacing(self.spacing)
        if self.affine is None:
            self.affine = np.diag([*self.spacing, 1.0])

    @property
    def extents(self):
        return tuple(int(n) for n in self.data.shape[1:])

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]


def check_geometry(a, b) -> None:
    if tuple(a.extents) != tuple(b.extents):
        raise GeometryMismatch(f"extents {a.extents} != {b.extents}")


def derive_region(lv: LabelVolume, region: str) -> np.ndarray:
    return np.isin(lv.codes, sorted(region_codes(region)))


def to_channels(lv: LabelVolume, label_set: Sequence[str]) -> ChannelStack:
    data = np.stack([derive_region(lv, name) for name in label_set]).astype(np.float32)
    if not len(label_set):
        data = np.zeros((0,) + lv.extents, np.float32)
    return ChannelStack(tuple(label_set), data, lv.spacing, lv.affine)


def argmax_labels(probs: ChannelStack, code_map: Sequence[int]) -> LabelVolume:
    """Per-voxel code of the most probable channel; ties go to the lowest channel index."""
    if len(code_map) != probs.data.shape[0]:
        raise GeometryMismatch(f"{len(code_map)} codes for {probs.data.shape[0]} channels")
    idx = np.argmax(probs.data, axis=0)
    codes = np.asarray(code_map, dtype=np.uint8)[idx]
    return LabelVolume(codes, probs.spacing, probs.affine)


def restrict(lv: LabelVolume, allowed: Sequence[int]) -> LabelVolume:
    """Map every code outside ``allowed`` to background."""
    keep = np.isin(lv.codes, list(allowed))
    return LabelVolume(np.where(keep, lv.codes, BG), lv.spacing, lv.affine)


def merge_stage_outputs(out_2a: LabelVolume, out_2b: LabelVolume) -> LabelVolume:
    """Combine the ET/NET and CC/ED refinements; non-background 2b voxels win.

    2a codes are only validated where they survive the overwrite, which keeps
    ``merge(merge(a, b), b) == merge(a, b)``.
    """
    check_geometry(out_2a, out_2b)
    bad_a = ~np.isin(out_2a.codes, [BG, ET, NET]) & (out_2b.codes == BG)
    bad_b = ~np.isin(out_2b.codes, [BG, CC, ED])
    if bad_a.any():
        raise CodeOutOfRange("stage 2a emitted codes outside {BG, ET, NET}")
    if bad_b.any():
        raise CodeOutOfRange("stage 2b emitted codes outside {BG, CC, ED}")
    merged = np.where(out_2b.codes != BG, out_2b.codes, out_2a.codes)
    return LabelVolume(merged, out_2a.spacing, out_2a.affine)


def resample_labels(lv: LabelVolume, factor: float) -> LabelVolume:
    new = reduced_extents(lv.extents, factor)
    if new == lv.extents:
        return LabelVolume(lv.codes.copy(), lv.spacing, lv.affine)
    spacing, affine = resampled_geometry(lv.extents, lv.spacing, lv.affine, new)
    return LabelVolume(resize_array(lv.codes, new, order=0), spacing, affine)
