"""Optimisation loop, cross-validation splits and probability ensembling."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import GeometryMismatch, NonFiniteLoss, NonFiniteUpdate, TooFewCases
from .labels import ChannelStack, LabelVolume, derive_region
from .tinyunet import Batch, Network, loss_and_gradients, save_checkpoint, stack_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.99
    poly_exponent: float = 0.9
    seed: int = 0
    augmentation: str = "minimal"
    presence_filter: tuple[str, ...] | None = None
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (dice, cross-entropy)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.augmentation not in ("none", "minimal"):
            raise ValueError(f"unknown augmentation mode {self.augmentation!r}")
        if self.presence_filter is not None:
            self.presence_filter = tuple(self.presence_filter)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * (1 - epoch / cfg.epochs) ** cfg.poly_exponent


@dataclass
class OptimizerState:
    velocity: dict
    epoch: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> OptimizerState:
        return cls({k: v * 0 for k, v in params.items()})


def sgd_nesterov_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float):
    """One Nesterov step in look-ahead form.

    ``v <- mu * v - lr * g`` then ``theta <- theta + mu * v - lr * g``.
    Works on any mapping of arrays, tensors or floats; inputs are not mutated.
    """
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        g = grads[name]
        v = momentum * state.velocity[name] - lr * g
        new_params[name] = theta + momentum * v - lr * g
        new_velocity[name] = v
    for name, value in new_params.items():
        ok = torch.isfinite(value).all() if torch.is_tensor(value) else np.isfinite(value).all()
        if not ok:
            raise NonFiniteUpdate(f"parameter {name} became non-finite")
    return new_params, OptimizerState(new_velocity, state.epoch)


def augment_batch(batch: Batch, mode: str, seed) -> Batch:
    """Per-sample random axis flips (p=0.5 each, image and target jointly) and
    additive Gaussian noise (sigma 0.02) on the image only."""
    if mode == "none":
        return batch
    if mode != "minimal":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for x, y in zip(batch.inputs, batch.targets):
        flips = [ax for ax in range(3) if rng.random() < 0.5]
        if flips:
            x = np.flip(x, axis=[a + 1 for a in flips])
            y = np.flip(y, axis=flips)
        x = x + rng.normal(0.0, 0.02, size=x.shape).astype(x.dtype)
        xs.append(np.ascontiguousarray(x))
        ys.append(np.ascontiguousarray(y))
    return Batch(np.stack(xs), np.stack(ys))


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int]

    def fold(self, index: int) -> list[str]:
        return [c for c, f in self.assignments.items() if f == index]

    def training(self, index: int) -> list[str]:
        return [c for c, f in self.assignments.items() if f != index]

    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]


def kfold_split(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle followed by round-robin fold assignment."""
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("case ids must be unique")
    if k < 1 or len(case_ids) < k:
        raise TooFewCases(f"{len(case_ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    assignments = {case_ids[i]: pos % k for pos, i in enumerate(order)}
    return FoldSplit(k, {c: assignments[c] for c in case_ids})


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    net: Network
    history: list[EpochRecord]
    best_net: Network
    best_epoch: int
    steps: int = 0
    n_cases: int = 0


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "loss"])
    for rec in history:
        writer.writerow([rec.epoch, repr(rec.lr), repr(rec.loss)])
    return buf.getvalue()


def to_class_indices(lv: LabelVolume, class_codes: Sequence[int]) -> np.ndarray:
    """Map label codes to class indices; codes not listed become class 0."""
    lut = np.zeros(256, dtype=np.int64)
    for idx, code in enumerate(class_codes):
        lut[code] = idx
    return lut[lv.codes]


def filter_present(dataset, regions) -> list:
    """Keep cases whose truth contains at least one of ``regions``."""
    if not regions:
        return list(dataset)
    return [item for item in dataset if any(derive_region(item[1], r).any() for r in regions)]


def train(
    net: Network,
    dataset: Sequence[tuple[np.ndarray, LabelVolume]],
    cfg: TrainConfig,
    class_codes: Sequence[int] = (0, 1, 2, 3, 4),
    checkpoint_dir=None,
) -> TrainResult:
    """Fit ``net`` on (inputs, truth) pairs.

    Each epoch visits the (filtered) cases in a seeded order in batches of
    ``cfg.batch_size``; the learning rate follows ``poly_lr``. Returns the
    final and the lowest-epoch-loss networks; both are checkpointed when
    ``checkpoint_dir`` is given.
    """
    data = filter_present(dataset, cfg.presence_filter)
    if not data:
        raise TooFewCases("no training cases left after presence filtering")
    if len(class_codes) != net.config.out_classes:
        raise ValueError(f"{len(class_codes)} class codes for {net.config.out_classes} outputs")
    samples = [(np.asarray(x, np.float32), to_class_indices(lv, class_codes)) for x, lv in data]
    params = {k: v.detach().clone() for k, v in net.params.items()}
    state = OptimizerState.zeros_like(params)
    history: list[EpochRecord] = []
    best, best_loss, best_epoch = None, math.inf, -1
    steps = 0
    divisor = net.config.divisor
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = stack_batch([samples[i] for i in idx], divisor)
            batch = augment_batch(batch, cfg.augmentation, [cfg.seed, epoch, start])
            current = Network(net.config, params, net.seed)
            try:
                value, grads = loss_and_gradients(current, batch, cfg.loss_weights)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch}: {exc}", history) from exc
            params, state = sgd_nesterov_step(params, grads, state, lr, cfg.momentum)
            losses.append(value)
            steps += 1
        state.epoch = epoch + 1
        mean_loss = float(np.mean(losses))
        history.append(EpochRecord(epoch, lr, mean_loss))
        log.debug("epoch %d lr %.5f loss %.4f", epoch, lr, mean_loss)
        if mean_loss < best_loss:
            best_loss, best_epoch = mean_loss, epoch
            best = {k: v.clone() for k, v in params.items()}
    final = Network(net.config, params, net.seed)
    best_net = Network(net.config, best, net.seed)
    if checkpoint_dir is not None:
        out = Path(checkpoint_dir)
        save_checkpoint(final, out / "final.ckpt", epoch=cfg.epochs)
        save_checkpoint(best_net, out / "best.ckpt", epoch=best_epoch + 1)
        (out / "history.csv").write_text(history_csv(history))
    return TrainResult(final, history, best_net, best_epoch, steps, len(samples))


def ensemble_probs(stacks: Sequence[ChannelStack]) -> ChannelStack:
    """Voxelwise mean of probability stacks, renormalised to sum to one."""
    if not stacks:
        raise ValueError("need at least one stack")
    first = stacks[0]
    for s in stacks[1:]:
        if s.names != first.names or s.data.shape != first.data.shape:
            raise GeometryMismatch("stacks differ in channels or extents")
    if len(stacks) == 1:
        return ChannelStack(first.names, first.data.copy(), first.spacing, first.affine)
    mean = np.mean([s.data.astype(np.float64) for s in stacks], axis=0)
    mean /= mean.sum(axis=0, keepdims=True)
    return ChannelStack(first.names, mean.astype(first.data.dtype), first.spacing, first.affine)
