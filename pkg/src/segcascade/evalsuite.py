"""Challenge-style segmentation metrics and cohort summaries.

Empty-mask conventions: Dice is 1 when both masks are empty and 0 when
exactly one is. HD95 is 0 when both are empty and undefined (NaN) when
exactly one is; undefined values are reported but left out of means.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatch
from .labels import EVAL_REGIONS, LabelVolume, derive_region
from .volume import connected_components, distance_transform, morphology

HD95_UNDEFINED = float("nan")

# Table column order used in the cohort summary; NETC is the NET region.
TABLE_COLUMNS = {"ET": "ET", "TC": "TC", "WT": "WT", "NETC": "NET", "CC": "CC", "ED": "ED"}


@dataclass(frozen=True)
class LesionMatchParams:
    connectivity: int = 26
    gt_dilation_voxels: int = 3

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")
        if self.gt_dilation_voxels < 0:
            raise ValueError("gt_dilation_voxels must be >= 0")


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise GeometryMismatch(f"pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def dice(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total


def lesionwise_dice(pred, truth, params: LesionMatchParams = LesionMatchParams()) -> float:
    """Mean per-lesion Dice with unmatched predicted components scored 0.

    Each truth component, dilated by ``gt_dilation_voxels``, claims every
    predicted component it overlaps; its Dice is taken against the union of
    those components.
    """
    pred, truth = _pair(pred, truth)
    if not pred.any() and not truth.any():
        return 1.0
    gt = connected_components(truth, params.connectivity)
    pr = connected_components(pred, params.connectivity)
    scores = []
    matched = np.zeros(pr.count + 1, dtype=bool)
    for lesion in range(1, gt.count + 1):
        region = gt.labels == lesion
        grown = morphology(region, "dilate", params.gt_dilation_voxels)
        hits = np.unique(pr.labels[grown])
        hits = hits[hits > 0]
        matched[hits] = True
        scores.append(dice(np.isin(pr.labels, hits), region))
    scores.extend(0.0 for _ in range(int((~matched[1:]).sum())))
    return math.fsum(scores) / len(scores)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, ndimage.generate_binary_structure(3, 1), border_value=0)
    return mask & ~inner


def surface_distances(pred, truth, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    ps, ts = surface(pred), surface(truth)
    d_to_t = distance_transform(ts, spacing)[ps]
    d_to_p = distance_transform(ps, spacing)[ts]
    return np.concatenate([d_to_t, d_to_p])


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of symmetric surface distances in mm."""
    pred, truth = _pair(pred, truth)
    p_any, t_any = pred.any(), truth.any()
    if not p_any and not t_any:
        return 0.0
    if p_any != t_any:
        return HD95_UNDEFINED
    return float(np.percentile(surface_distances(pred, truth, spacing), 95))


@dataclass
class RegionScores:
    dice: float
    lesionwise_dice: float
    hd95_mm: float
    pred_empty: bool
    truth_empty: bool


@dataclass
class EvalReport:
    case_id: str
    regions: dict[str, RegionScores]


def evaluate_case(
    pred: LabelVolume,
    truth: LabelVolume,
    params: LesionMatchParams = LesionMatchParams(),
    case_id: str = "",
) -> EvalReport:
    if pred.extents != truth.extents:
        raise GeometryMismatch(f"pred {pred.extents} vs truth {truth.extents}")
    regions = {}
    for name in EVAL_REGIONS:
        p, t = derive_region(pred, name), derive_region(truth, name)
        regions[name] = RegionScores(
            dice=dice(p, t),
            lesionwise_dice=lesionwise_dice(p, t, params),
            hd95_mm=hd95(p, t, truth.spacing),
            pred_empty=not p.any(),
            truth_empty=not t.any(),
        )
    return EvalReport(case_id, regions)


@dataclass
class RegionSummary:
    mean_dice: float
    mean_lesionwise_dice: float
    mean_hd95_mm: float  # NaN when no case has a defined value
    hd95_defined: int
    pred_empty_count: int
    truth_empty_count: int


@dataclass
class CohortSummary:
    n_cases: int
    regions: dict[str, RegionSummary] = field(default_factory=dict)

    def to_json(self) -> dict:
        """Table-shaped summary: columns ET, TC, WT, NETC, CC, ED."""
        out = {"n_cases": self.n_cases, "columns": {}}
        for column, region in TABLE_COLUMNS.items():
            s = self.regions[region]
            out["columns"][column] = {
                "mean_dice": s.mean_dice,
                "mean_lesionwise_dice": s.mean_lesionwise_dice,
                "mean_hd95_mm": None if math.isnan(s.mean_hd95_mm) else s.mean_hd95_mm,
                "hd95_defined": s.hd95_defined,
                "pred_empty": s.pred_empty_count,
                "truth_empty": s.truth_empty_count,
            }
        return out


def aggregate(reports: Sequence[EvalReport]) -> CohortSummary:
    if not reports:
        raise ValueError("need at least one report")
    summary = CohortSummary(n_cases=len(reports))
    for name in reports[0].regions:
        rows = [r.regions[name] for r in reports]
        hds = [r.hd95_mm for r in rows if not math.isnan(r.hd95_mm)]
        summary.regions[name] = RegionSummary(
            mean_dice=float(np.mean([r.dice for r in rows])),
            mean_lesionwise_dice=float(np.mean([r.lesionwise_dice for r in rows])),
            mean_hd95_mm=float(np.mean(hds)) if hds else float("nan"),
            hd95_defined=len(hds),
            pred_empty_count=sum(r.pred_empty for r in rows),
            truth_empty_count=sum(r.truth_empty for r in rows),
        )
    return summary


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "region", "dice", "lesionwise_dice", "hd95_mm", "pred_empty", "truth_empty"])
    for rep in reports:
        for name, s in rep.regions.items():
            hd = "NA" if math.isnan(s.hd95_mm) else repr(s.hd95_mm)
            w.writerow([rep.case_id, name, repr(s.dice), repr(s.lesionwise_dice), hd,
                        int(s.pred_empty), int(s.truth_empty)])
    return buf.getvalue()


def empties_table(pred_empty: dict[str, int], truth_empty: dict[str, int], n_cases: int,
                  regions: Sequence[str] = EVAL_REGIONS) -> str:
    """Empty-mask rates as ``k/n`` per region, predicted then truth."""
    lines = ["region pred_empty truth_empty"]
    for name in regions:
        lines.append(f"{name} {pred_empty[name]}/{n_cases} {truth_empty[name]}/{n_cases}")
    return "\n".join(lines) + "\n"
