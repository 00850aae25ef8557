"""Stage orchestration: the single-model baselines and the two-stage cascade.

Stage 1 segments ET/NET/CC/ED from all four modalities. Stage 2a refines
ET vs NET from T1w and T1wCE plus the stage-1 ET and NET masks; stage 2b
refines CC vs ED from T2w and FLAIR plus the stage-1 solid-tumour (ET+NET),
CC and ED masks. Priors enter only as extra input channels, never as
spatial masks. Stage-2b foreground overwrites stage 2a.

Anything with a ``predict(inputs) -> probabilities`` method (and optionally
a ``config``) can serve as a fold model, which lets tests plug in oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import CodeOutOfRange, GeometryMismatch, MissingPrior
from .labels import (
    BG,
    CODES,
    ChannelStack,
    LabelVolume,
    argmax_labels,
    derive_region,
    merge_stage_outputs,
    to_channels,
)
from .tinyunet import NetworkConfig
from .trainer import ensemble_probs
from .volume import MODALITIES, MultiModalStudy, resample, resize_array

STAGE_LAYOUT = {
    "stage1": (MODALITIES, (), ("ET", "NET", "CC", "ED")),
    "stage2a": (("T1w", "T1wCE"), ("ET", "NET"), ("ET", "NET")),
    "stage2b": (("T2w", "FLAIR"), ("ST", "CC", "ED"), ("CC", "ED")),
}
LOWRES_FACTOR = 1.5


@dataclass(frozen=True)
class StageSpec:
    name: str
    modalities: tuple[str, ...]
    prior_channels: tuple[str, ...]
    out_labels: tuple[str, ...]
    net_config: NetworkConfig

    def __post_init__(self):
        if self.name not in STAGE_LAYOUT:
            raise ValueError(f"unknown stage {self.name!r}")
        mods, priors, outs = STAGE_LAYOUT[self.name]
        if (tuple(self.modalities), tuple(self.prior_channels), tuple(self.out_labels)) != (mods, priors, outs):
            raise ValueError(f"{self.name} must use modalities {mods}, priors {priors}, outputs {outs}")
        if self.net_config.in_channels != len(mods) + len(priors):
            raise ValueError(f"{self.name}: in_channels must be {len(mods) + len(priors)}")
        if self.net_config.out_classes != len(outs) + 1:
            raise ValueError(f"{self.name}: out_classes must be {len(outs) + 1}")

    @classmethod
    def default(cls, name: str, depth=3, base_width=8, residual_encoder=None) -> StageSpec:
        mods, priors, outs = STAGE_LAYOUT[name]
        if residual_encoder is None:
            # stage 1 is the residual-encoder model, refinement stages use the plain U-Net
            residual_encoder = name == "stage1"
        cfg = NetworkConfig(len(mods) + len(priors), len(outs) + 1, depth, base_width, residual_encoder)
        return cls(name, mods, priors, outs, cfg)

    @property
    def class_codes(self) -> tuple[int, ...]:
        return (BG,) + tuple(CODES[label] for label in self.out_labels)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return ("BG",) + self.out_labels


@dataclass(frozen=True)
class CascadePlan:
    stage1: StageSpec
    stage2a: StageSpec
    stage2b: StageSpec
    merge_policy: str = "overwrite_2b_over_2a"

    def __post_init__(self):
        for name in ("stage1", "stage2a", "stage2b"):
            if getattr(self, name).name != name:
                raise ValueError(f"plan slot {name} holds a {getattr(self, name).name} spec")
        if self.merge_policy != "overwrite_2b_over_2a":
            raise ValueError(f"unsupported merge policy {self.merge_policy!r}")

    @classmethod
    def default(cls, depth=3, base_width=8) -> CascadePlan:
        return cls(*(StageSpec.default(n, depth, base_width) for n in ("stage1", "stage2a", "stage2b")))

    @property
    def stages(self) -> tuple[StageSpec, StageSpec, StageSpec]:
        return (self.stage1, self.stage2a, self.stage2b)


def baseline_config(arch: str, depth=3, base_width=8) -> NetworkConfig:
    if arch not in ("resenc", "default", "lowres"):
        raise ValueError(f"unknown baseline architecture {arch!r}")
    return NetworkConfig(4, 5, depth, base_width, residual_encoder=arch == "resenc")


def stage_for_arch(arch: str, depth=3, base_width=8) -> StageSpec:
    """A stage-1 shaped spec carrying the baseline's network config."""
    spec = StageSpec.default("stage1", depth, base_width)
    return replace(spec, net_config=baseline_config(arch, depth, base_width))


def build_stage_inputs(spec: StageSpec, study: MultiModalStudy, prior: LabelVolume | None = None) -> np.ndarray:
    """Channels: the stage's modalities, then its prior label masks."""
    if spec.prior_channels and prior is None:
        raise MissingPrior(f"{spec.name} needs a prior label volume")
    channels = [study.volumes[m].data for m in spec.modalities]
    if spec.prior_channels:
        if prior.extents != study.extents:
            raise GeometryMismatch(f"prior {prior.extents} vs study {study.extents}")
        channels.extend(to_channels(prior, spec.prior_channels).data)
    return np.stack(channels).astype(np.float32)


def _check_nets(spec: StageSpec, nets) -> None:
    if not nets:
        raise ValueError(f"{spec.name}: no fold models given")
    for net in nets:
        cfg = getattr(net, "config", None)
        if cfg is not None and cfg != spec.net_config:
            raise ValueError(f"{spec.name}: model config {cfg} does not match {spec.net_config}")


def predict_stack(nets: Sequence, inputs: np.ndarray, names, spacing, affine) -> ChannelStack:
    """Fold-ensembled probabilities for one input array."""
    stacks = [ChannelStack(names, net.predict(inputs), spacing, affine) for net in nets]
    return ensemble_probs(stacks)


def run_stage(spec: StageSpec, nets: Sequence, study: MultiModalStudy, prior: LabelVolume | None = None):
    _check_nets(spec, nets)
    x = build_stage_inputs(spec, study, prior)
    probs = predict_stack(nets, x, spec.channel_names, study.spacing, study.affine)
    return probs, argmax_labels(probs, spec.class_codes)


def run_cascade(plan: CascadePlan, nets: Mapping[str, Sequence], study: MultiModalStudy):
    """Stage 1, then 2a and 2b on stage-1 priors, then the overwrite merge."""
    _, l1 = run_stage(plan.stage1, nets["stage1"], study)
    _, l2a = run_stage(plan.stage2a, nets["stage2a"], study, l1)
    _, l2b = run_stage(plan.stage2b, nets["stage2b"], study, l1)
    final = merge_stage_outputs(l2a, l2b)
    if not np.isin(final.codes, list(CODES.values())).all():
        raise CodeOutOfRange("cascade produced an unknown code")
    provenance = {
        "case_id": study.case_id,
        "merge_policy": plan.merge_policy,
        "stages": {
            "stage1": l1.counts(),
            "stage2a": l2a.counts(),
            "stage2b": l2b.counts(),
        },
        "st_prior_voxels": int(derive_region(l1, "ST").sum()),
        "final": final.counts(),
        "folds": {name: len(nets[name]) for name in ("stage1", "stage2a", "stage2b")},
    }
    return final, provenance


def resample_study(study: MultiModalStudy, factor: float) -> MultiModalStudy:
    return MultiModalStudy(study.case_id, {m: resample(v, factor) for m, v in study.volumes.items()})


def baseline_stack(arch: str, nets: Sequence, study: MultiModalStudy, lowres_factor=LOWRES_FACTOR) -> ChannelStack:
    """Fold-ensembled full-grid probabilities of one baseline configuration."""
    spec = StageSpec.default("stage1")
    names = spec.channel_names
    if arch == "lowres":
        small = resample_study(study, lowres_factor)
        coarse = predict_stack(nets, small.stack(), names, small.spacing, small.affine)
        up = resize_array(coarse.data, study.extents, order=1)
        up = up / up.sum(axis=0, keepdims=True)
        return ChannelStack(names, up, study.spacing, study.affine)
    return predict_stack(nets, study.stack(), names, study.spacing, study.affine)


def run_baseline(arch: str, nets, study: MultiModalStudy, lowres_factor=LOWRES_FACTOR) -> LabelVolume:
    """Single-configuration or multi-configuration ensemble prediction.

    ``nets`` is a list of fold models, or for ``multi_ensemble`` a mapping
    ``{"default": [...], "lowres": [...], "resenc": [...]}``.
    """
    codes = StageSpec.default("stage1").class_codes
    if arch == "multi_ensemble":
        stacks = [baseline_stack(a, nets[a], study, lowres_factor) for a in ("default", "lowres", "resenc")]
        return argmax_labels(ensemble_probs(stacks), codes)
    return argmax_labels(baseline_stack(arch, nets, study, lowres_factor), codes)
