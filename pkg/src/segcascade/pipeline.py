"""Command implementations behind the CLI.

Layout on disk (all paths in manifests are relative to the manifest):

    data_dir/manifest.json                  cohort: ids, split, seeds, flags, files
    data_dir/raw/<case>/<modality>.nii      generated images and truth.nii
    data_dir/normalized/<case>/...          normalized copies
    data_dir/normalized/records.jsonl       one normalization record per modality
    output_dir/checkpoints/<arch>/split.json
    output_dir/checkpoints/<arch>/<member>/fold<i>/{final,best}.ckpt, history.csv
    output_dir/predictions/<arch>/...       labels, provenance, manifest.json
    output_dir/eval/<arch>/...              per_case.csv, summary.json, empties.txt
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nifti_io
from .cascade import build_stage_inputs, resample_study, run_baseline, run_cascade, run_stage
from .config import RunConfig, config_dict
from .errors import CheckpointMismatch, MissingArtifact
from .evalsuite import aggregate, empties_table, evaluate_case, reports_csv
from .labels import EVAL_REGIONS, LabelVolume, derive_region, resample_labels
from .normalize import normalize_study
from .phantom import case_seeds, generate_cohort
from .tinyunet import build_network, load_checkpoint
from .trainer import kfold_split, train
from .volume import MODALITIES, MultiModalStudy

log = logging.getLogger(__name__)

MEMBER_INDEX = {"resenc": 0, "default": 1, "lowres": 2, "stage1": 3, "stage2a": 4, "stage2b": 5}


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def read_json(path: Path, what: str):
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return json.loads(path.read_text())


def _rel(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


def _map(fn, items, jobs: int):
    """Ordered map, fanned out to worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


# ---------------------------------------------------------------- generate


def generate(cfg: RunConfig) -> dict:
    n = cfg.cohort.n_train + cfg.cohort.n_val
    cases = generate_cohort(cfg.phantom, n, cfg.seed)
    seeds = case_seeds(n, cfg.seed)
    root = cfg.data_dir
    entries = []
    for i, (case, seed) in enumerate(zip(cases, seeds)):
        cid = case.study.case_id
        folder = root / "raw" / cid
        files = {}
        for m in MODALITIES:
            nifti_io.save(case.study.volumes[m], folder / f"{m}.nii")
            files[m] = _rel(folder / f"{m}.nii", root)
        nifti_io.save(case.truth.to_volume(), folder / "truth.nii")
        entries.append({
            "case_id": cid,
            "split": "train" if i < cfg.cohort.n_train else "val",
            "seed": seed,
            "has_cc": case.has_cc,
            "has_ed": case.has_ed,
            "files": files,
            "truth": _rel(folder / "truth.nii", root),
        })
    manifest = {"seed": cfg.seed, "phantom": config_dict(cfg)["phantom"], "cases": entries}
    write_json(root / "manifest.json", manifest)
    return manifest


def load_manifest(cfg: RunConfig) -> dict:
    return read_json(cfg.data_dir / "manifest.json", "cohort manifest (run generate)")


def load_study(cfg: RunConfig, entry: dict, kind: str = "normalized") -> MultiModalStudy:
    files = entry.get(kind) if kind == "normalized" else entry["files"]
    if files is None:
        raise MissingArtifact(f"{entry['case_id']}: no normalized images (run normalize)")
    vols = {}
    for m in MODALITIES:
        path = cfg.data_dir / files[m]
        if not path.exists():
            raise MissingArtifact(f"missing image {path}")
        vols[m] = nifti_io.load(path)
    return MultiModalStudy(entry["case_id"], vols)


def load_labels(path: Path, label_map=None) -> LabelVolume:
    if not path.exists():
        raise MissingArtifact(f"missing label file {path}")
    return LabelVolume.from_volume(nifti_io.load(path), label_map)


# ---------------------------------------------------------------- normalize


def _normalize_case(cfg: RunConfig, entry: dict):
    study = load_study(cfg, entry, "raw")
    out, records = normalize_study(study, cfg.n_bins)
    folder = cfg.data_dir / "normalized" / entry["case_id"]
    files = {}
    for m in MODALITIES:
        nifti_io.save(out.volumes[m], folder / f"{m}.nii")
        files[m] = _rel(folder / f"{m}.nii", cfg.data_dir)
    return files, [r.to_json() for r in records]


def normalize(cfg: RunConfig, jobs: int = 1) -> dict:
    manifest = load_manifest(cfg)
    results = _map(_normalize_case, [(cfg, e) for e in manifest["cases"]], jobs)
    lines = []
    for entry, (files, records) in zip(manifest["cases"], results):
        entry["normalized"] = files
        lines.extend(json.dumps(r, sort_keys=True) for r in records)
    (cfg.data_dir / "normalized" / "records.jsonl").write_text("\n".join(lines) + "\n")
    write_json(cfg.data_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- train


def derived_seed(cfg: RunConfig, member: str, fold: int) -> int:
    ss = np.random.SeedSequence([cfg.seed, MEMBER_INDEX[member], fold])
    return int(ss.generate_state(1)[0])


def checkpoint_root(cfg: RunConfig) -> Path:
    return cfg.output_dir / "checkpoints" / cfg.architecture


def fold_dir(cfg: RunConfig, member: str, fold: int) -> Path:
    return checkpoint_root(cfg) / member / f"fold{fold}"


def _member_example(cfg: RunConfig, member: str, study: MultiModalStudy, truth: LabelVolume, prior=None):
    if member == "lowres":
        study = resample_study(study, cfg.lowres_factor)
        truth = resample_labels(truth, cfg.lowres_factor)
    spec = cfg.stage_spec(member)
    return build_stage_inputs(spec, study, prior), truth


def _train_fold(cfg: RunConfig, member: str, fold: int, dataset):
    spec = cfg.stage_spec(member)
    seed = derived_seed(cfg, member, fold)
    net = build_network(spec.net_config, seed)
    tcfg = replace(cfg.train, seed=seed)
    result = train(net, dataset, tcfg, spec.class_codes, fold_dir(cfg, member, fold))
    return [(r.epoch, r.lr, r.loss) for r in result.history]


def _train_member(cfg, member, split, examples, jobs):
    jobs_args = []
    for fold in range(split.k):
        ids = split.training(fold)
        jobs_args.append((cfg, member, fold, [examples[c] for c in ids]))
    return _map(_train_fold, jobs_args, jobs)


def _oof_priors(cfg: RunConfig, split, studies: dict) -> dict[str, LabelVolume]:
    """Stage-1 predictions for every training case from the fold model that never saw it."""
    spec = cfg.stage_spec("stage1")
    priors = {}
    for fold in range(split.k):
        net = _load_member_fold(cfg, "stage1", fold)
        for cid in split.fold(fold):
            _, priors[cid] = run_stage(spec, [net], studies[cid])
    return priors


def train_command(cfg: RunConfig, jobs: int = 1, label_map=None) -> dict:
    manifest = load_manifest(cfg)
    entries = [e for e in manifest["cases"] if e["split"] == "train"]
    ids = [e["case_id"] for e in entries]
    split = kfold_split(ids, cfg.folds, cfg.seed)
    write_json(checkpoint_root(cfg) / "split.json",
               {"k": split.k, "seed": cfg.seed, "assignments": split.assignments})
    studies = {e["case_id"]: load_study(cfg, e) for e in entries}
    truths = {e["case_id"]: load_labels(cfg.data_dir / e["truth"], label_map) for e in entries}
    summary = {"architecture": cfg.architecture, "folds": split.k, "members": {}}
    first = [m for m in cfg.members() if m not in ("stage2a", "stage2b")]
    for member in first:
        examples = {c: _member_example(cfg, member, studies[c], truths[c]) for c in ids}
        _train_member(cfg, member, split, examples, jobs)
        summary["members"][member] = split.k
    if cfg.architecture == "cascade":
        priors = _oof_priors(cfg, split, studies)
        oof_dir = checkpoint_root(cfg) / "stage1_oof"
        for cid in ids:
            nifti_io.save(priors[cid].to_volume(), oof_dir / f"{cid}.nii")
        for member in ("stage2a", "stage2b"):
            examples = {c: _member_example(cfg, member, studies[c], truths[c], priors[c]) for c in ids}
            _train_member(cfg, member, split, examples, jobs)
            summary["members"][member] = split.k
    write_json(checkpoint_root(cfg) / "train_summary.json", summary)
    return summary


# ---------------------------------------------------------------- predict


def _load_member_fold(cfg: RunConfig, member: str, fold: int):
    path = fold_dir(cfg, member, fold) / "final.ckpt"
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found (run train)")
    net, _ = load_checkpoint(path)
    expected = cfg.stage_spec(member).net_config
    if net.config != expected:
        raise CheckpointMismatch(f"{path}: checkpoint config {net.config} != configured {expected}")
    return net


def load_members(cfg: RunConfig) -> dict[str, list]:
    return {m: [_load_member_fold(cfg, m, f) for f in range(cfg.folds)] for m in cfg.members()}


def _predict_case(cfg: RunConfig, nets: dict, entry: dict):
    study = load_study(cfg, entry)
    if cfg.architecture == "cascade":
        final, prov = run_cascade(cfg.plan(), nets, study)
        prov["stage2_training_priors"] = "stage1_cross_validated"
    else:
        arg = nets if cfg.architecture == "multi_ensemble" else nets[cfg.architecture]
        final = run_baseline(cfg.architecture, arg, study, cfg.lowres_factor)
        prov = {"case_id": study.case_id, "final": final.counts(),
                "folds": {m: len(v) for m, v in nets.items()}}
    prov["architecture"] = cfg.architecture
    return final, prov


def predictions_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "predictions" / cfg.architecture


def predict(cfg: RunConfig, jobs: int = 1, split: str = "val") -> dict:
    manifest = load_manifest(cfg)
    entries = [e for e in manifest["cases"] if e["split"] == split]
    if not entries:
        raise MissingArtifact(f"no {split} cases in the cohort manifest")
    nets = load_members(cfg)
    results = _map(_predict_case, [(cfg, nets, e) for e in entries], jobs)
    out = predictions_dir(cfg)
    rows = []
    for entry, (labels, prov) in zip(entries, results):
        cid = entry["case_id"]
        nifti_io.save(labels.to_volume(), out / "labels" / f"{cid}.nii")
        write_json(out / "provenance" / f"{cid}.json", prov)
        rows.append({
            "case_id": cid,
            "pred": _rel(out / "labels" / f"{cid}.nii", out),
            "truth": _rel(cfg.data_dir / entry["truth"], out),
        })
    pred_manifest = {"architecture": cfg.architecture, "cases": rows}
    write_json(out / "manifest.json", pred_manifest)
    return pred_manifest


# ---------------------------------------------------------------- evaluate


def _pairs(cfg: RunConfig, manifest_path):
    path = Path(manifest_path) if manifest_path else predictions_dir(cfg) / "manifest.json"
    manifest = read_json(path, "prediction manifest (run predict)")
    base = path.parent
    return [(row["case_id"], base / row["pred"], base / row["truth"]) for row in manifest["cases"]]


def _evaluate_pair(cfg: RunConfig, cid, pred_path, truth_path, label_map):
    pred = load_labels(pred_path, label_map)
    truth = load_labels(truth_path, label_map)
    return evaluate_case(pred, truth, cfg.eval, cid)


def eval_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "eval" / cfg.architecture


def evaluate(cfg: RunConfig, manifest_path=None, jobs: int = 1, label_map=None) -> dict:
    pairs = _pairs(cfg, manifest_path)
    reports = _map(_evaluate_pair, [(cfg, c, p, t, label_map) for c, p, t in pairs], jobs)
    out = eval_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_case.csv").write_text(reports_csv(reports))
    summary = aggregate(reports).to_json()
    summary["architecture"] = cfg.architecture
    write_json(out / "summary.json", summary)
    return summary


def report_empties(cfg: RunConfig, manifest_path=None, label_map=None) -> str:
    pairs = _pairs(cfg, manifest_path)
    pred_empty = dict.fromkeys(EVAL_REGIONS, 0)
    truth_empty = dict.fromkeys(EVAL_REGIONS, 0)
    for _, pred_path, truth_path in pairs:
        pred = load_labels(pred_path, label_map)
        truth = load_labels(truth_path, label_map)
        for region in EVAL_REGIONS:
            pred_empty[region] += not derive_region(pred, region).any()
            truth_empty[region] += not derive_region(truth, region).any()
    table = empties_table(pred_empty, truth_empty, len(pairs))
    out = eval_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "empties.txt").write_text(table)
    return table
