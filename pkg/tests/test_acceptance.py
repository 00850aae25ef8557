"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import json
import logging
import math
import time

import numpy as np
import yaml

from conftest import ACCEPTANCE_LINES
from oracles import brute_dice, brute_hd95, brute_lesionwise, fd_check, make_nifti
from segcascade import nifti_io
from segcascade.cascade import CascadePlan, build_stage_inputs, run_cascade
from segcascade.cli import main
from segcascade.evalsuite import dice, evaluate_case, hd95, lesionwise_dice
from segcascade.labels import BG, CC, ED, ET, EVAL_REGIONS, NET, LabelVolume, derive_region, merge_stage_outputs
from segcascade.normalize import compute_brain_mask, fit_gaussian_peak, normalize_study, normalize_volume
from segcascade.phantom import PhantomSpec, generate_phantom
from segcascade.tinyunet import Batch, NetworkConfig, build_network, forward, soft_dice_per_class
from segcascade.trainer import (
    OptimizerState,
    TrainConfig,
    kfold_split,
    poly_lr,
    sgd_nesterov_step,
    to_class_indices,
    train,
)
from segcascade.volume import MODALITIES, Volume3D


def report(number, name, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
    assert ok, detail


def test_01_nifti_round_trip():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    failures = 0
    for _ in range(100):
        shape = tuple(int(n) for n in rng.integers(1, 33, 3))
        spacing = tuple(float(s) for s in rng.choice([0.5, 0.75, 1.0, 1.5, 2.0], 3))
        data = rng.normal(scale=100, size=shape).astype(np.float32)
        vol = Volume3D(data, spacing)
        _, back = nifti_io.read_nifti(nifti_io.write_nifti(vol))
        _, big = nifti_io.read_nifti(make_nifti(data, spacing, endian=">"))
        ok = (back.data.tobytes() == data.tobytes() and big.data.tobytes() == data.tobytes()
              and back.spacing == vol.spacing and big.spacing == vol.spacing)
        failures += not ok
    elapsed = time.perf_counter() - start
    report(1, "NIfTI round-trip", failures == 0 and elapsed < 10,
           f"{100 - failures}/100 bit-exact (little and big endian), {elapsed:.2f}s < 10s")


def test_02_metric_oracles():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    bad = {"dice": 0, "hd95": 0, "lesionwise": 0}
    worst_hd = 0.0
    for _ in range(500):
        shape = tuple(int(n) for n in rng.integers(1, 9, 3))
        pa, pb = rng.uniform(0, 0.5, 2)
        a, b = rng.random(shape) < pa, rng.random(shape) < pb
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 2.0], 3))
        bad["dice"] += dice(a, b) != brute_dice(a, b)
        got, ref = hd95(a, b, spacing), brute_hd95(a, b, spacing)
        if math.isnan(ref) or math.isnan(got):
            bad["hd95"] += int(math.isnan(ref) != math.isnan(got))
        else:
            worst_hd = max(worst_hd, abs(got - ref))
            bad["hd95"] += int(abs(got - ref) > 1e-9)
        bad["lesionwise"] += lesionwise_dice(a, b) != brute_lesionwise(a, b)
    elapsed = time.perf_counter() - start
    report(2, "metric oracles", not any(bad.values()) and elapsed < 60,
           f"mismatches {bad} over 500 pairs, max |hd95 err| {worst_hd:.1e} mm, {elapsed:.1f}s < 60s")


def test_03_empty_mask_conventions():
    shape = (8, 8, 8)
    empty = LabelVolume(np.zeros(shape, np.uint8))
    codes = np.zeros(shape, np.uint8)
    codes[1:3, 1:3, 1:3], codes[4, 4, 4], codes[5:7, 1:3, 1:3], codes[1:3, 5:7, 5:7] = ET, NET, CC, ED
    full = LabelVolume(codes)
    both = evaluate_case(empty, empty)
    miss = evaluate_case(empty, full)
    extra = evaluate_case(full, empty)
    ok = all(both.regions[r].dice == 1.0 and miss.regions[r].dice == 0.0 and extra.regions[r].dice == 0.0
             for r in EVAL_REGIONS)
    ok &= all(both.regions[r].hd95_mm == 0.0 and math.isnan(miss.regions[r].hd95_mm) for r in EVAL_REGIONS)
    report(3, "empty-mask conventions", ok,
           f"both-empty Dice 1.0, one-empty Dice 0.0 for {', '.join(EVAL_REGIONS)}")


def test_04_normalization():
    logging.disable(logging.WARNING)
    try:
        start = time.perf_counter()
        worst_peak, worst_rel = 0.0, 0.0
        rng = np.random.default_rng(4)
        for seed in range(20):
            case = generate_phantom(PhantomSpec(), seed)
            out, _ = normalize_study(case.study)
            for m in MODALITIES:
                vol = case.study.volumes[m]
                mask = compute_brain_mask(vol)
                worst_peak = max(worst_peak, abs(fit_gaussian_peak(out.volumes[m].data[mask]).mean - 0.5))
                c = np.float32(rng.uniform(0.1, 10))
                scaled, _ = normalize_volume(vol.with_data(vol.data * c))
                a = out.volumes[m].data
                worst_rel = max(worst_rel, float(np.max(np.abs(scaled.data - a) / np.maximum(np.abs(a), 1e-6))))
        elapsed = time.perf_counter() - start
    finally:
        logging.disable(logging.NOTSET)
    report(4, "normalization", worst_peak <= 0.01 and worst_rel < 1e-4 and elapsed < 30,
           f"20 phantoms x 4 modalities: max |peak - 0.5| {worst_peak:.1e}, "
           f"scale equivariance {worst_rel:.1e} < 1e-4, {elapsed:.1f}s < 30s")


def test_05_gradient_check():
    start = time.perf_counter()
    parts = []
    ok = True
    for residual in (False, True):
        cfg = NetworkConfig(2, 3, 2, 4, residual)
        rng = np.random.default_rng(5)
        batch = Batch(rng.normal(size=(2, 2, 8, 8, 8)), rng.integers(0, 3, size=(2, 8, 8, 8)))
        errors, _ = fd_check(build_network(cfg, 3), batch, n_coords=25, h=1e-3, seed=7)
        ok &= len(errors) >= 20 and max(errors) < 1e-4
        parts.append(f"{'residual' if residual else 'plain'} {len(errors)} coords max rel err {max(errors):.1e}")
    elapsed = time.perf_counter() - start
    report(5, "gradient correctness", ok and elapsed < 120, f"{'; '.join(parts)}, {elapsed:.1f}s < 120s")


def test_06_optimizer_and_schedule():
    cfg = TrainConfig()
    lrs = [poly_lr(e, cfg) for e in range(cfg.epochs + 1)]
    monotone = all(a > b for a, b in zip(lrs, lrs[1:]))
    p, s = sgd_nesterov_step({"w": 1.0}, {"w": 1.0}, OptimizerState({"w": 0.0}), 0.1, 0.99)
    nesterov = abs(p["w"] - 0.801) <= 1e-12 and abs(s.velocity["w"] + 0.1) <= 1e-12
    rng = np.random.default_rng(6)
    theta, g = rng.normal(size=50), rng.normal(size=50)
    plain, _ = sgd_nesterov_step({"w": theta}, {"w": g}, OptimizerState({"w": rng.normal(size=50)}), 0.03, 0.0)
    vanilla = np.array_equal(plain["w"], theta - 0.03 * g)
    report(6, "optimizer/schedule", lrs[0] == 0.01 and monotone and nesterov and vanilla,
           f"poly_lr(0)={lrs[0]!r}, strictly decreasing={monotone}, Nesterov example={nesterov}, "
           f"momentum 0 is SGD={vanilla}")


def test_07_overfit_smoke():
    logging.disable(logging.WARNING)
    try:
        start = time.perf_counter()
        spec = PhantomSpec(extents=(16, 16, 16), tumor_radii=(0.32, 0.3, 0.3), cc_radius=0.6,
                           ed_shell_mm=1.5, p_cc=1.0, p_ed=1.0)
        case = generate_phantom(spec, 11)
        study, _ = normalize_study(case.study)
        x = study.stack()
        net = build_network(NetworkConfig(4, 5, 3, 8, True), 0)
        cfg = TrainConfig(epochs=200, batch_size=1, lr0=0.01, momentum=0.99, augmentation="none")
        res = train(net, [(x, case.truth)], cfg)
        probs = forward(res.net, x[None])
        per_class = soft_dice_per_class(probs, to_class_indices(case.truth, (0, 1, 2, 3, 4))[None])
        score = float(per_class.mean())
        elapsed = time.perf_counter() - start
    finally:
        logging.disable(logging.NOTSET)
    report(7, "overfit smoke", score > 0.9 and elapsed < 600,
           f"foreground soft Dice {score:.3f} > 0.9 after {cfg.epochs} epochs "
           f"(per class {np.round(per_class, 3).tolist()}), {elapsed:.0f}s < 600s")


class _Oracle:
    def __init__(self, codes, class_codes):
        self.probs = np.stack([codes == c for c in class_codes]).astype(np.float64)

    def predict(self, inputs):
        return self.probs


def test_08_cascade_mechanics():
    plan = CascadePlan.default(depth=2, base_width=4)
    case = generate_phantom(PhantomSpec(extents=(16, 16, 16), tumor_radii=(0.3, 0.28, 0.26), p_cc=1.0,
                                        p_ed=1.0, cc_radius=0.5, ed_shell_mm=1.5), 8)
    codes = case.truth.codes
    nets = {
        "stage1": [_Oracle(codes, plan.stage1.class_codes)],
        "stage2a": [_Oracle(np.where(np.isin(codes, [ET, NET]), codes, BG), plan.stage2a.class_codes)],
        "stage2b": [_Oracle(np.where(np.isin(codes, [CC, ED]), codes, BG), plan.stage2b.class_codes)],
    }
    final, _ = run_cascade(plan, nets, case.study)
    exact = np.array_equal(final.codes, codes)
    a = LabelVolume(np.array([ET, ET, NET, BG, NET], np.uint8).reshape(5, 1, 1))
    b = LabelVolume(np.array([CC, ED, BG, ED, BG], np.uint8).reshape(5, 1, 1))
    merged = merge_stage_outputs(a, b).codes.ravel().tolist()
    merge_ok = merged == [CC, ED, NET, ED, NET]
    channels = tuple(build_stage_inputs(s, case.study, case.truth).shape[0] for s in plan.stages)
    report(8, "cascade mechanics", exact and merge_ok and channels == (4, 4, 5),
           f"oracle cascade exact={exact}, merge ET+CC->CC voxelwise={merge_ok}, input channels {channels}")


# Desk-scale end-to-end run: reduced grid and epochs so both architectures
# train five folds within the time budget on one CPU core.
E2E_CONFIG = {
    "paths": {"data_dir": "data", "output_dir": "out"},
    "seed": 2024,
    "folds": 5,
    "phantom": {"extents": [24, 24, 24], "p_cc": 0.4},
    "cohort": {"n_train": 40, "n_val": 15},
    "train": {"epochs": 40},
}


def _cli(*argv):
    assert main(list(argv)) == 0, argv


def test_09_end_to_end_phantom_experiment(tmp_path, capsys):
    # the budget is CPU time; every command runs in this process with --jobs 1
    start, cpu_start = time.perf_counter(), time.process_time()
    means = {}
    for arch in ("resenc", "cascade"):
        cfg = tmp_path / f"{arch}.yaml"
        cfg.write_text(yaml.safe_dump({**E2E_CONFIG, "architecture": arch}))
        if arch == "resenc":
            _cli("generate", "--config", str(cfg))
            _cli("normalize", "--config", str(cfg))
        for cmd in ("train", "predict", "evaluate"):
            _cli(cmd, "--config", str(cfg))
        summary = json.loads((tmp_path / "out" / "eval" / arch / "summary.json").read_text())
        means[arch] = {c: summary["columns"][c]["mean_dice"] for c in ("CC", "ED")}
    capsys.readouterr()
    _cli("report-empties", "--config", str(tmp_path / "cascade.yaml"))
    table = capsys.readouterr().out
    elapsed, cpu = time.perf_counter() - start, time.process_time() - cpu_start

    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    val = [e for e in manifest["cases"] if e["split"] == "val"]
    n = len(val)
    pred_dir = tmp_path / "out" / "predictions" / "cascade" / "labels"
    expected = ["region pred_empty truth_empty"]
    for region in EVAL_REGIONS:
        truth_empty = pred_empty = 0
        for e in val:
            truth = LabelVolume.from_volume(nifti_io.load(tmp_path / "data" / e["truth"]))
            pred = LabelVolume.from_volume(nifti_io.load(pred_dir / f"{e['case_id']}.nii"))
            truth_empty += not derive_region(truth, region).any()
            pred_empty += not derive_region(pred, region).any()
        expected.append(f"{region} {pred_empty}/{n} {truth_empty}/{n}")
    rows = {line.split()[0]: line.split()[1:] for line in table.splitlines()[1:]}
    flags_ok = (rows["CC"][1] == f"{sum(not e['has_cc'] for e in val)}/{n}"
                and rows["ED"][1] == f"{sum(not e['has_ed'] for e in val)}/{n}")
    table_ok = table.splitlines() == expected and flags_ok

    base = (means["resenc"]["CC"] + means["resenc"]["ED"]) / 2
    casc = (means["cascade"]["CC"] + means["cascade"]["ED"]) / 2
    ok = casc >= base - 0.05 and table_ok and cpu < 3600
    ACCEPTANCE_LINES.append("      report-empties:\n" + "\n".join("        " + ln for ln in table.splitlines()))
    report(9, "end-to-end phantom experiment", ok,
           f"CC+ED mean Dice cascade {casc:.3f} vs resenc {base:.3f} (need >= {base - 0.05:.3f}); "
           f"per region cascade {means['cascade']}, resenc {means['resenc']}; "
           f"report-empties exact={table_ok}; {cpu / 60:.1f} CPU min < 60 ({elapsed / 60:.1f} min wall)")


def test_10_determinism(tmp_path):
    tiny = {
        "paths": {"data_dir": "data", "output_dir": "out"},
        "seed": 10, "folds": 2, "architecture": "cascade",
        "phantom": {"extents": [16, 16, 16], "p_cc": 0.5},
        "cohort": {"n_train": 4, "n_val": 2},
        "train": {"epochs": 2, "batch_size": 2},
        "network": {"depth": 2, "base_width": 4},
    }
    trees = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        (root / "run.yaml").write_text(yaml.safe_dump(tiny))
        for cmd in ("generate", "normalize", "train", "predict", "evaluate", "report-empties"):
            _cli(cmd, "--config", str(root / "run.yaml"))
        trees.append({str(p.relative_to(root)): p.read_bytes() for p in root.rglob("*") if p.is_file()})
    a, b = trees
    kinds = {"checkpoints": 0, "predictions": 0, "eval": 0}
    for key in a:
        for kind in kinds:
            kinds[kind] += f"/{kind}/" in f"/{key}"
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing and all(kinds.values())
    report(10, "determinism", ok,
           f"{len(a)} files bit-identical across reruns (checkpoints {kinds['checkpoints']}, "
           f"predictions {kinds['predictions']}, reports {kinds['eval']}); differing {differing}")


def test_11_kfold_partition():
    rng = np.random.default_rng(11)
    failures = 0
    for _ in range(200):
        n = int(rng.integers(1, 300))
        k = int(rng.integers(1, n + 1))
        seed = int(rng.integers(2**32))
        ids = [f"c{i}" for i in range(n)]
        split = kfold_split(ids, k, seed)
        folds = [split.fold(i) for i in range(k)]
        flat = [c for f in folds for c in f]
        sizes = split.sizes()
        failures += not (sorted(flat) == sorted(ids) and len(set(flat)) == n and max(sizes) - min(sizes) <= 1)
    sizes = sorted(kfold_split([f"c{i}" for i in range(261)], 5, 0).sizes(), reverse=True)
    report(11, "k-fold partition", failures == 0 and sizes == [53, 52, 52, 52, 52],
           f"{200 - failures}/200 random (n, k, seed) partitions valid; n=261, k=5 sizes {sizes}")
