"""Run configuration: one YAML file captures an experiment and its seeds."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cascade import CascadePlan, StageSpec
from .errors import ConfigError
from .evalsuite import LesionMatchParams
from .phantom import PhantomSpec
from .trainer import TrainConfig

ARCHITECTURES = ("resenc", "default", "lowres", "multi_ensemble", "cascade")
ENSEMBLE_MEMBERS = ("default", "lowres", "resenc")
STAGES = ("stage1", "stage2a", "stage2b")


@dataclass
class CohortConfig:
    n_train: int = 40
    n_val: int = 15


@dataclass
class NetworkSection:
    depth: int = 3
    base_width: int = 8


@dataclass
class CascadeSection:
    stage1_residual: bool = True
    stage2_residual: bool = False
    merge_policy: str = "overwrite_2b_over_2a"


@dataclass
class RunConfig:
    data_dir: Path
    output_dir: Path
    seed: int = 0
    folds: int = 5
    architecture: str = "cascade"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)
    eval: LesionMatchParams = field(default_factory=LesionMatchParams)
    lowres_factor: float = 1.5
    n_bins: int = 256

    def members(self) -> tuple[str, ...]:
        """Model groups trained for the selected architecture."""
        if self.architecture == "cascade":
            return STAGES
        if self.architecture == "multi_ensemble":
            return ENSEMBLE_MEMBERS
        return (self.architecture,)

    def plan(self) -> CascadePlan:
        d, w, c = self.network.depth, self.network.base_width, self.cascade
        return CascadePlan(
            StageSpec.default("stage1", d, w, c.stage1_residual),
            StageSpec.default("stage2a", d, w, c.stage2_residual),
            StageSpec.default("stage2b", d, w, c.stage2_residual),
            c.merge_policy,
        )

    def stage_spec(self, member: str) -> StageSpec:
        """The stage spec whose network config a member's checkpoints must carry."""
        if member in STAGES:
            return getattr(self.plan(), member)
        from .cascade import stage_for_arch

        return stage_for_arch(member, self.network.depth, self.network.base_width)


def _build(cls, section, name):
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    allowed = {"paths", "seed", "folds", "architecture", "phantom", "cohort", "train",
               "network", "cascade", "eval", "lowres_factor", "n_bins"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    paths = raw.get("paths") or {}
    if "data_dir" not in paths or "output_dir" not in paths:
        raise ConfigError("paths.data_dir and paths.output_dir are required")
    arch = raw.get("architecture", "cascade")
    if arch not in ARCHITECTURES:
        raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {arch!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    train_section = dict(raw.get("train") or {})
    train_section.setdefault("seed", seed)
    phantom_section = raw.get("phantom") or {}
    if "contrast" in phantom_section:
        base = PhantomSpec().contrast
        for region, row in phantom_section["contrast"].items():
            base.setdefault(region, {}).update(row)
        phantom_section = {**phantom_section, "contrast": base}
    cfg = RunConfig(
        data_dir=(base_dir / paths["data_dir"]).resolve(),
        output_dir=(base_dir / paths["output_dir"]).resolve(),
        seed=seed,
        folds=int(raw.get("folds", 5)),
        architecture=arch,
        phantom=_build(PhantomSpec, phantom_section, "phantom"),
        cohort=_build(CohortConfig, raw.get("cohort"), "cohort"),
        train=_build(TrainConfig, train_section, "train"),
        network=_build(NetworkSection, raw.get("network"), "network"),
        cascade=_build(CascadeSection, raw.get("cascade"), "cascade"),
        eval=_build(LesionMatchParams, raw.get("eval"), "eval"),
        lowres_factor=float(raw.get("lowres_factor", 1.5)),
        n_bins=int(raw.get("n_bins", 256)),
    )
    if cfg.folds < 2:
        raise ConfigError("folds must be >= 2")
    if cfg.cohort.n_train < cfg.folds:
        raise ConfigError("cohort.n_train must be >= folds")
    if cfg.cohort.n_val < 0:
        raise ConfigError("cohort.n_val must be >= 0")
    if cfg.lowres_factor < 1:
        raise ConfigError("lowres_factor must be >= 1")
    try:
        cfg.plan()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return parse_config(raw, path.parent)


def config_dict(cfg: RunConfig) -> dict:
    """Plain-data view used for manifests and provenance."""
    out = dataclasses.asdict(cfg)
    out["data_dir"] = str(cfg.data_dir)
    out["output_dir"] = str(cfg.output_dir)
    out["phantom"]["extents"] = list(cfg.phantom.extents)
    out["phantom"]["spacing"] = list(cfg.phantom.spacing)
    return out
