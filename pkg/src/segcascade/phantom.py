"""Synthetic multi-modal brain-tumour phantoms.

A case is an ellipsoidal brain holding an ellipsoidal tumour core (TC):
an enhancing rim (ET) around a non-enhancing core (NET), an optional
cystic pocket (CC) inside the core, and an optional oedema shell (ED)
around the core. Regions are painted with per-modality mean intensities
and Gaussian noise is added inside the brain. Geometry is given as
fractions of the grid extents so any grid size works.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecGeometryError
from .labels import CC, ED, ET, NET, LabelVolume
from .volume import MODALITIES, MultiModalStudy, Volume3D, distance_transform

# region -> modality -> mean intensity (arbitrary scanner units)
DEFAULT_CONTRAST = {
    "brain": {"T1w": 300.0, "T1wCE": 320.0, "T2w": 200.0, "FLAIR": 250.0},
    "ET": {"T1w": 270.0, "T1wCE": 600.0, "T2w": 260.0, "FLAIR": 320.0},
    "NET": {"T1w": 240.0, "T1wCE": 330.0, "T2w": 300.0, "FLAIR": 340.0},
    "CC": {"T1w": 120.0, "T1wCE": 130.0, "T2w": 460.0, "FLAIR": 180.0},
    "ED": {"T1w": 260.0, "T1wCE": 320.0, "T2w": 340.0, "FLAIR": 420.0},
}


@dataclass
class PhantomSpec:
    extents: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_radii: tuple[float, float, float] = (0.42, 0.45, 0.40)  # fraction of extents
    tumor_offset: float = 0.08  # max |centre jitter| as a fraction of extents
    tumor_radii: tuple[float, float, float] = (0.2, 0.19, 0.18)
    radius_jitter: float = 0.15  # relative
    rim_fraction: float = 0.35  # outer fraction of the core radius that enhances
    cc_radius: float = 0.55  # relative to the core radii
    ed_shell_mm: float = 2.5
    contrast: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONTRAST.items()})
    noise_sigma: float = 12.0
    p_cc: float = 0.4
    p_ed: float = 0.75

    def __post_init__(self):
        self.extents = tuple(int(n) for n in self.extents)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("p_cc", "p_ed"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for region in ("brain", "ET", "NET", "CC", "ED"):
            row = self.contrast.get(region, {})
            missing = [m for m in MODALITIES if m not in row]
            if missing:
                raise ValueError(f"contrast table lacks {region}/{missing}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class PhantomCase:
    study: MultiModalStudy
    truth: LabelVolume
    has_cc: bool
    has_ed: bool
    seed: int = 0


def _ellipsoid_radius(grid, center, radii):
    """Normalised ellipsoidal radius; <= 1 inside."""
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)))


def generate_phantom(spec: PhantomSpec, seed: int, case_id: str | None = None) -> PhantomCase:
    rng = np.random.default_rng(seed)
    ext = np.array(spec.extents, dtype=np.float64)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.extents], indexing="ij")
    centre = (ext - 1) / 2

    brain = _ellipsoid_radius(grid, centre, np.array(spec.brain_radii) * ext) <= 1.0
    t_centre = centre + rng.uniform(-1, 1, 3) * spec.tumor_offset * ext
    t_radii = np.array(spec.tumor_radii) * ext * (1 + rng.uniform(-1, 1, 3) * spec.radius_jitter)
    t_radii = np.maximum(t_radii, 1.5)
    r_core = _ellipsoid_radius(grid, t_centre, t_radii)
    tc = r_core <= 1.0
    if not tc.any():
        raise SpecGeometryError("tumour core rasterises to no voxels")
    if (tc & ~brain).any():
        raise SpecGeometryError("tumour core extends outside the brain")

    codes = np.zeros(spec.extents, dtype=np.uint8)
    codes[tc] = NET
    codes[tc & (r_core > 1.0 - spec.rim_fraction)] = ET

    has_cc = bool(rng.random() < spec.p_cc)
    has_ed = bool(rng.random() < spec.p_ed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    if has_cc:
        cc_centre = t_centre + direction * 0.3 * t_radii
        cc = (_ellipsoid_radius(grid, cc_centre, spec.cc_radius * t_radii) <= 1.0) & tc
        codes[cc] = CC
    if has_ed:
        near = distance_transform(tc, spec.spacing) <= spec.ed_shell_mm
        codes[near & ~tc & brain] = ED

    noise = {m: rng.normal(0.0, spec.noise_sigma, spec.extents) for m in MODALITIES}
    volumes = {}
    region_masks = {"ET": codes == ET, "NET": codes == NET, "CC": codes == CC, "ED": codes == ED}
    for m in MODALITIES:
        img = np.zeros(spec.extents)
        img[brain] = spec.contrast["brain"][m]
        for region, mask in region_masks.items():
            img[mask] = spec.contrast[region][m]
        img[brain] += noise[m][brain]
        img[brain] = np.maximum(img[brain], 1.0)
        volumes[m] = Volume3D(img.astype(np.float32), spec.spacing)
    truth = LabelVolume(codes, spec.spacing)
    counts = truth.counts()
    return PhantomCase(
        study=MultiModalStudy(case_id or f"phantom-{seed}", volumes),
        truth=truth,
        has_cc=counts["CC"] > 0,
        has_ed=counts["ED"] > 0,
        seed=seed,
    )


def case_seeds(n: int, seed: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_cohort(spec: PhantomSpec, n: int, seed: int, prefix: str = "case") -> list[PhantomCase]:
    if n < 1:
        raise ValueError("n must be >= 1")
    width = max(3, len(str(n - 1)))
    return [
        generate_phantom(spec, s, f"{prefix}-{i:0{width}d}")
        for i, s in enumerate(case_seeds(n, seed))
    ]
