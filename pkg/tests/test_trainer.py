import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segcascade.errors import GeometryMismatch, NonFiniteLoss, NonFiniteUpdate, TooFewCases
from segcascade.labels import CC, ET, ChannelStack, LabelVolume
from segcascade.tinyunet import Batch, NetworkConfig, build_network, load_checkpoint
from segcascade.trainer import (
    OptimizerState,
    TrainConfig,
    augment_batch,
    ensemble_probs,
    kfold_split,
    poly_lr,
    sgd_nesterov_step,
    train,
)


def test_poly_lr_examples():
    cfg = TrainConfig()
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(250, cfg) == 0.0
    assert poly_lr(125, cfg) == pytest.approx(0.005359, abs=5e-7)
    with pytest.raises(ValueError):
        poly_lr(251, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(0.1, 3.0))
def test_poly_lr_strictly_decreasing(epochs, exponent):
    cfg = TrainConfig(epochs=epochs, poly_exponent=exponent)
    lrs = [poly_lr(e, cfg) for e in range(epochs + 1)]
    assert lrs[0] == cfg.lr0
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(momentum=1.0), dict(lr0=0.0),
                                    dict(augmentation="heavy"), dict(batch_size=0)])
def test_train_config_invariants(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_nesterov_hand_example():
    params, state = sgd_nesterov_step({"w": 1.0}, {"w": 1.0}, OptimizerState({"w": 0.0}), 0.1, 0.99)
    assert abs(state.velocity["w"] - (-0.1)) <= 1e-12
    assert abs(params["w"] - 0.801) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
def test_zero_momentum_is_plain_sgd(seed, lr):
    rng = np.random.default_rng(seed)
    theta, g = rng.normal(size=5), rng.normal(size=5)
    state = OptimizerState({"w": rng.normal(size=5)})
    new, _ = sgd_nesterov_step({"w": theta}, {"w": g}, state, lr, 0.0)
    assert np.array_equal(new["w"], theta - lr * g)


def test_zero_gradient_fixed_point_and_tensors():
    p = {"w": torch.arange(3.0)}
    new, state = sgd_nesterov_step(p, {"w": torch.zeros(3)}, OptimizerState.zeros_like(p), 0.1, 0.99)
    assert torch.equal(new["w"], p["w"])
    with pytest.raises(NonFiniteUpdate):
        sgd_nesterov_step(p, {"w": torch.full((3,), float("inf"))}, state, 0.1, 0.9)


def make_batch(seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(2, 3, 6, 5, 4)).astype(np.float32), rng.integers(0, 4, size=(2, 6, 5, 4)))


def test_augment_none_is_identity():
    b = make_batch()
    assert augment_batch(b, "none", 1) is b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_preserves_class_counts_and_is_seeded(seed):
    b = make_batch(seed % 7)
    a1 = augment_batch(b, "minimal", seed)
    a2 = augment_batch(b, "minimal", seed)
    assert np.array_equal(a1.inputs, a2.inputs) and np.array_equal(a1.targets, a2.targets)
    for t0, t1 in zip(b.targets, a1.targets):
        assert np.array_equal(np.bincount(t0.ravel(), minlength=4), np.bincount(t1.ravel(), minlength=4))


def test_augment_flip_is_joint_and_noise_small():
    b = make_batch()
    a = augment_batch(b, "minimal", 3)
    for x0, y0, x1, y1 in zip(b.inputs, b.targets, a.inputs, a.targets):
        matched = False
        for flips in [(), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]:
            fx = np.flip(x0, [f + 1 for f in flips]) if flips else x0
            fy = np.flip(y0, list(flips)) if flips else y0
            if np.array_equal(fy, y1) and np.abs(fx - x1).max() < 0.2:
                matched = True
                assert 0.01 < np.std(x1 - fx) < 0.03
        assert matched


def test_kfold_261_cases_into_five_folds():
    split = kfold_split([f"c{i}" for i in range(261)], 5, 0)
    assert sorted(split.sizes(), reverse=True) == [53, 52, 52, 52, 52]


def test_kfold_leave_one_out_and_errors():
    ids = list("abcdef")
    split = kfold_split(ids, 6, 1)
    assert split.sizes() == [1] * 6
    with pytest.raises(TooFewCases):
        kfold_split(ids, 7)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 80).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))), st.integers(0, 2**32 - 1))
def test_kfold_partition_property(nk, seed):
    n, k = nk
    ids = [f"id{i}" for i in range(n)]
    split = kfold_split(ids, k, seed)
    folds = [set(split.fold(i)) for i in range(k)]
    assert set().union(*folds) == set(ids)
    assert sum(map(len, folds)) == n
    assert max(split.sizes()) - min(split.sizes()) <= 1
    assert split.assignments == kfold_split(ids, k, seed).assignments
    for i in range(k):
        assert set(split.training(i)) == set(ids) - folds[i]


def tiny_dataset(n, with_cc, size=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        codes = np.zeros((size,) * 3, np.uint8)
        codes[2:5, 2:5, 2:5] = ET
        if i in with_cc:
            codes[3, 3, 3] = CC
        x = rng.normal(size=(4, size, size, size)).astype(np.float32) + codes[None]
        out.append((x, LabelVolume(codes)))
    return out


def test_one_epoch_two_cases_is_one_step(tmp_path):
    net = build_network(NetworkConfig(4, 5, 2, 4), 0)
    res = train(net, tiny_dataset(2, ()), TrainConfig(epochs=1, batch_size=2), checkpoint_dir=tmp_path)
    assert res.steps == 1 and len(res.history) == 1
    assert {p.name for p in tmp_path.iterdir()} == {"final.ckpt", "best.ckpt", "history.csv"}
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "epoch,lr,loss"
    back, header = load_checkpoint(tmp_path / "final.ckpt")
    assert back.checksum() == res.net.checksum() and header["epoch"] == 1


def test_presence_filter_keeps_cases_with_region():
    net = build_network(NetworkConfig(4, 5, 2, 4), 0)
    data = tiny_dataset(10, {1, 4, 6, 9})
    res = train(net, data, TrainConfig(epochs=1, batch_size=2, presence_filter=("CC",)))
    assert res.n_cases == 4 and res.steps == 2
    with pytest.raises(TooFewCases):
        train(net, tiny_dataset(3, ()), TrainConfig(epochs=1, presence_filter=("CC",)))


def test_training_is_bit_reproducible_and_moves_parameters():
    data = tiny_dataset(3, {0})
    cfg = TrainConfig(epochs=3, batch_size=2, seed=5)
    net = build_network(NetworkConfig(4, 5, 2, 4, True), 1)
    a = train(net, data, cfg)
    b = train(net, data, cfg)
    assert a.net.checksum() == b.net.checksum()
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    assert a.net.checksum() != net.checksum()
    assert [r.lr for r in a.history] == [poly_lr(e, cfg) for e in range(3)]


def test_non_finite_loss_keeps_partial_history():
    data = tiny_dataset(2, ())
    data[1] = (np.full_like(data[1][0], np.nan), data[1][1])
    net = build_network(NetworkConfig(4, 5, 2, 4), 0)
    with pytest.raises(NonFiniteLoss) as info:
        train(net, data, TrainConfig(epochs=2, batch_size=1))
    assert info.value.history == []


def stack(values, names=("BG", "ET")):
    return ChannelStack(names, np.asarray(values, dtype=np.float64))


def test_ensemble_examples():
    a = stack(np.full((2, 2, 2, 2), 0.5))
    assert np.array_equal(ensemble_probs([a]).data, a.data)
    p1 = np.stack([np.full((1, 1, 1), 0.8), np.full((1, 1, 1), 0.2)])
    p2 = np.stack([np.full((1, 1, 1), 0.6), np.full((1, 1, 1), 0.4)])
    assert ensemble_probs([stack(p1), stack(p2)]).data[1, 0, 0, 0] == pytest.approx(0.3)
    with pytest.raises(GeometryMismatch):
        ensemble_probs([stack(p1), stack(p2, ("BG", "NET"))])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_ensemble_stays_normalised(n, seed):
    rng = np.random.default_rng(seed)
    stacks = []
    for _ in range(n):
        raw = rng.random((3, 4, 4, 4)) + 1e-3
        stacks.append(stack(raw / raw.sum(0), ("BG", "ET", "NET")))
    out = ensemble_probs(stacks)
    assert np.abs(out.data.sum(0) - 1).max() < 1e-5
    assert np.allclose(out.data, np.mean([s.data for s in stacks], 0), atol=1e-9)
