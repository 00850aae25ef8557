"""Per-case intensity normalisation anchored on the dominant tissue peak.

Each modality is divided by twice the mean of a Gaussian fitted to the
greatest peak of its in-brain histogram, which moves that peak to 0.5.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateDistribution, EmptyVolume
from .volume import MultiModalStudy, Volume3D, connected_components, morphology

log = logging.getLogger(__name__)

DEFAULT_BINS = 256


@dataclass
class GaussianPeakFit:
    mean: float
    sigma: float
    amplitude: float
    bin_width: float
    window: tuple[int, int]
    residual: float
    fallback: str | None = None  # "window_too_narrow", "non_concave", "degenerate"


@dataclass
class NormalizationRecord:
    case_id: str
    modality: str
    divisor: float
    fit: GaussianPeakFit
    mask_voxels: int

    def to_json(self) -> dict:
        out = asdict(self)
        out["fit"]["window"] = list(self.fit.window)
        return out


def otsu_threshold(values: np.ndarray, n_bins: int = 256) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        raise EmptyVolume("constant volume has no Otsu threshold")
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    w1 = counts.sum() - w0
    s0 = np.cumsum(counts * centers)[:-1]
    m0 = s0 / np.maximum(w0, 1)
    m1 = (np.sum(counts * centers) - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    # threshold sits on the upper edge of the last "low" bin
    return float(edges[1 + int(np.argmax(between))])


def compute_brain_mask(vol: Volume3D) -> np.ndarray:
    """Simplified skull-stripped brain mask.

    Otsu threshold, keep the largest 26-connected component, close with
    radius 2, then fill interior holes.
    """
    data = vol.data
    if not (data > 0).any() or data.max() == data.min():
        raise EmptyVolume("volume has no positive voxels or is constant")
    fg = data > otsu_threshold(data)
    cc = connected_components(fg, 26)
    if cc.count == 0:
        raise EmptyVolume("no voxels above the Otsu threshold")
    largest = 1 + int(np.argmax(cc.sizes))
    mask = cc.labels == largest
    mask = morphology(mask, "close", 2)
    return morphology(mask, "fill_holes", 0)


def fit_gaussian_peak(intensities, n_bins: int = DEFAULT_BINS) -> GaussianPeakFit:
    """Fit a Gaussian to the greatest histogram peak.

    The fit is a least-squares parabola on log-counts over the contiguous
    run of bins around the peak whose counts are at least half the peak
    count. Fewer than three such bins, or a non-concave parabola, falls back
    to the peak bin centre and records why in ``fallback``.
    """
    x = np.asarray(intensities, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError(f"need >= 100 samples, got {x.size}")
    if n_bins < 16:
        raise ValueError("n_bins must be >= 16")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        raise DegenerateDistribution(f"all {x.size} samples equal {lo}")
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    width = (hi - lo) / n_bins
    centers = 0.5 * (edges[:-1] + edges[1:])
    peak = int(np.argmax(counts))  # first maximum = lowest intensity on ties
    half = counts[peak] / 2.0
    a = b = peak
    while a > 0 and counts[a - 1] >= half:
        a -= 1
    while b < n_bins - 1 and counts[b + 1] >= half:
        b += 1

    def fallback(reason):
        return GaussianPeakFit(
            mean=float(centers[peak]),
            sigma=width,
            amplitude=float(counts[peak]),
            bin_width=width,
            window=(a, b),
            residual=0.0,
            fallback=reason,
        )

    if b - a + 1 < 3:
        return fallback("window_too_narrow")
    t = np.arange(a, b + 1) - peak  # bin units, centred on the peak for conditioning
    y = np.log(counts[a : b + 1])
    c2, c1, c0 = np.polyfit(t, y, 2)
    if c2 >= 0:
        return fallback("non_concave")
    vertex = -c1 / (2 * c2)
    mean = float(centers[peak] + vertex * width)
    if not lo <= mean <= hi:
        return fallback("non_concave")
    resid = y - np.polyval([c2, c1, c0], t)
    return GaussianPeakFit(
        mean=mean,
        sigma=float(width * np.sqrt(-1.0 / (2 * c2))),
        amplitude=float(np.exp(c0 - c1 * c1 / (4 * c2))),
        bin_width=width,
        window=(a, b),
        residual=float(np.sqrt(np.mean(resid**2))),
    )


def _peak_of(samples: np.ndarray, n_bins: int) -> GaussianPeakFit:
    try:
        return fit_gaussian_peak(samples, n_bins)
    except DegenerateDistribution:
        value = float(samples[0])
        return GaussianPeakFit(value, 0.0, float(samples.size), 0.0, (0, 0), 0.0, "degenerate")


def normalize_volume(vol: Volume3D, n_bins: int = DEFAULT_BINS, case_id="", modality=""):
    mask = compute_brain_mask(vol)
    samples = vol.data[mask]
    fit = _peak_of(samples, n_bins)
    divisor = 2.0 * fit.mean
    if not divisor > 0:
        raise DegenerateDistribution(f"peak mean {fit.mean} is not positive")
    out = vol.with_data((vol.data.astype(np.float64) / divisor).astype(np.float32))
    return out, NormalizationRecord(case_id, modality, divisor, fit, int(mask.sum()))


def normalize_study(study: MultiModalStudy, n_bins: int = DEFAULT_BINS):
    """Normalise every modality of ``study`` independently.

    Returns the normalised study and one record per modality. Errors are
    re-raised with the offending modality prefixed to the message.
    """
    volumes, records = {}, []
    for modality, vol in study.volumes.items():
        try:
            volumes[modality], rec = normalize_volume(vol, n_bins, study.case_id, modality)
        except (EmptyVolume, DegenerateDistribution, ValueError) as exc:
            raise type(exc)(f"{study.case_id}/{modality}: {exc}") from exc
        if rec.fit.fallback:
            log.warning("%s/%s: peak fit fell back (%s)", study.case_id, modality, rec.fit.fallback)
        records.append(rec)
    return MultiModalStudy(study.case_id, volumes), records
