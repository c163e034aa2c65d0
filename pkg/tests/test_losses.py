"""Cross-entropy, soft Dice, and deep-supervision combination against formula oracles."""

import math

import numpy as np
import pytest

from gcaseg import tensor as T
from gcaseg.losses import (
    LossConfig,
    combined_loss,
    cross_entropy,
    downsample_labels,
    one_hot,
    soft_dice_loss,
)
from gcaseg.tensor import ShapeError, Tensor


def _ce_oracle(logits, labels):
    """Per-voxel log-sum-exp evaluation, plain python accumulation."""
    total = 0.0
    b, c = logits.shape[:2]
    for bi in range(b):
        for z in range(logits.shape[2]):
            for y in range(logits.shape[3]):
                for x in range(logits.shape[4]):
                    row = logits[bi, :, z, y, x]
                    m = row.max()
                    lse = m + math.log(np.exp(row - m).sum())
                    total += lse - row[labels[bi, z, y, x]]
    return total / labels.size


def _dice_oracle(probs, target, eps, mean_batch):
    b, c = probs.shape[:2]
    p = probs.reshape(b, c, -1)
    t = target.reshape(b, c, -1)
    inter = (p * t).sum(axis=2)
    ps, ts = p.sum(axis=2), t.sum(axis=2)
    if not mean_batch:
        inter, ps, ts = inter.sum(axis=0), ps.sum(axis=0), ts.sum(axis=0)
    return float(np.mean(1.0 - (2.0 * inter + eps) / (ps + ts + eps)))


# ---------------------------------------------------------------------------
# cross-entropy

def test_zero_logits_two_classes_is_ln2():
    logits = T.tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
    labels = np.zeros((1, 2, 2, 2), dtype=np.int64)
    assert abs(float(cross_entropy(logits, labels).data) - math.log(2.0)) < 1e-6


def test_saturated_logits_give_negligible_loss():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    logits = 20.0 * one_hot(labels, 3, dtype=np.float32)
    assert float(cross_entropy(T.tensor(logits), labels).data) < 1e-8


def test_cross_entropy_matches_direct_evaluation():
    rng = np.random.default_rng(1)
    logits = rng.uniform(-3, 3, (2, 4, 3, 2, 2))
    labels = rng.integers(0, 4, size=(2, 3, 2, 2))
    got = float(cross_entropy(T.tensor(logits, dtype=np.float64), labels).data)
    assert abs(got - _ce_oracle(logits, labels)) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    logits = T.tensor(np.zeros((1, 3, 2, 2, 2), dtype=np.float32))
    good = np.zeros((1, 2, 2, 2), dtype=np.int64)
    with pytest.raises(ValueError, match="labels span"):
        cross_entropy(logits, good + 3)
    with pytest.raises(ValueError, match="labels span"):
        cross_entropy(logits, good - 1)
    with pytest.raises(ShapeError, match="shape"):
        cross_entropy(logits, np.zeros((1, 2, 2), dtype=np.int64))
    with pytest.raises(ShapeError, match="integers"):
        cross_entropy(logits, good.astype(np.float32))


def test_raising_true_logit_never_raises_loss():
    rng = np.random.default_rng(2)
    base = rng.uniform(-2, 2, (1, 3, 2, 2, 2))
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    true_class = labels[0, 1, 0, 1]
    prev = np.inf
    for delta in (0.0, 0.1, 0.5, 2.0, 10.0):
        bumped = base.copy()
        bumped[0, true_class, 1, 0, 1] += delta
        got = float(cross_entropy(T.tensor(bumped, dtype=np.float64), labels).data)
        assert got <= prev + 1e-15
        prev = got


# ---------------------------------------------------------------------------
# soft dice

def test_crisp_perfect_prediction_has_zero_dice_loss():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, size=(2, 2, 2, 2))
    target = one_hot(labels, 4, dtype=np.float32)
    got = soft_dice_loss(T.tensor(target), Tensor(target), LossConfig())
    assert abs(float(got.data)) < 1e-4


def test_uniform_probs_single_class_target_formula():
    # every voxel labeled class 1, probabilities uniform 0.25 on a 2^3 volume
    cfg = LossConfig()
    probs = np.full((1, 4, 2, 2, 2), 0.25, dtype=np.float64)
    labels = np.ones((1, 2, 2, 2), dtype=np.int64)
    target = one_hot(labels, 4, dtype=np.float64)
    got = float(soft_dice_loss(T.tensor(probs, dtype=np.float64), Tensor(target), cfg).data)
    expected = _dice_oracle(probs, target, cfg.dice_eps, cfg.mean_batch)
    assert abs(got - expected) < 1e-12
    # the labeled class alone contributes about 1 - 4/10
    eps = cfg.dice_eps
    target_term = 1.0 - (2 * 0.25 * 8 + eps) / (0.25 * 8 + 8 + eps)
    assert abs(target_term - 0.6) < 1e-5


def test_class_absent_from_both_contributes_nothing():
    cfg = LossConfig()
    probs = np.zeros((1, 2, 2, 2, 2), dtype=np.float64)
    probs[0, 0] = 1.0  # all mass on class 0, class 1 empty in probs and target
    target = one_hot(np.zeros((1, 2, 2, 2), dtype=np.int64), 2, dtype=np.float64)
    got = float(soft_dice_loss(T.tensor(probs, dtype=np.float64), Tensor(target), cfg).data)
    assert abs(got) < 1e-9


@pytest.mark.parametrize("mean_batch", [True, False])
def test_soft_dice_matches_formula_oracle(mean_batch):
    rng = np.random.default_rng(4)
    raw = rng.uniform(-2, 2, (3, 4, 2, 3, 2))
    probs = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
    labels = rng.integers(0, 4, size=(3, 2, 3, 2))
    target = one_hot(labels, 4, dtype=np.float64)
    cfg = LossConfig(mean_batch=mean_batch)
    got = float(soft_dice_loss(T.tensor(probs, dtype=np.float64), Tensor(target), cfg).data)
    assert abs(got - _dice_oracle(probs, target, cfg.dice_eps, mean_batch)) < 1e-12


def test_soft_dice_rejects_shape_mismatch():
    cfg = LossConfig()
    probs = T.tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        soft_dice_loss(probs, Tensor(np.zeros((1, 3, 2, 2, 2), dtype=np.float32)), cfg)


# ---------------------------------------------------------------------------
# combination and deep supervision

def test_single_stage_combination_reduces_to_weighted_sum():
    rng = np.random.default_rng(5)
    logits = T.tensor(rng.uniform(-2, 2, (1, 3, 2, 2, 2)), dtype=np.float64)
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    cfg = LossConfig(w_ce=0.7, w_dice=1.3)
    got = float(combined_loss(logits, [], labels, cfg).data)
    ce = float(cross_entropy(logits, labels).data)
    dice = float(soft_dice_loss(
        T.softmax(logits, axis=1), Tensor(one_hot(labels, 3, dtype=np.float64)), cfg).data)
    assert abs(got - (0.7 * ce + 1.3 * dice)) < 1e-12


def test_two_stage_weighted_sum_matches_componentwise_script():
    rng = np.random.default_rng(6)
    main = T.tensor(rng.uniform(-2, 2, (1, 3, 2, 2, 2)), dtype=np.float64)
    aux = T.tensor(rng.uniform(-2, 2, (1, 3, 1, 1, 1)), dtype=np.float64)
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    cfg = LossConfig(w_ce=1.0, w_dice=1.0, deep_sup_weights=(2 / 3, 1 / 3))
    got = float(combined_loss(main, [aux], labels, cfg).data)
    expected = 0.0
    for stage, weight in ((main, 2 / 3), (aux, 1 / 3)):
        target = downsample_labels(labels, stage.data.shape[2:])
        ce = float(cross_entropy(stage, target).data)
        dice = float(soft_dice_loss(
            T.softmax(stage, axis=1),
            Tensor(one_hot(target, 3, dtype=np.float64)), cfg).data)
        expected += weight * (ce + dice)
    assert abs(got - expected) < 1e-7


def test_default_stage_weights_halve_then_normalize():
    cfg = LossConfig()
    np.testing.assert_allclose(
        cfg.resolved_weights(3), np.array([1.0, 0.5, 0.25]) / 1.75, atol=1e-15)
    np.testing.assert_allclose(cfg.resolved_weights(1), [1.0])
    custom = LossConfig(deep_sup_weights=(3.0, 1.0))
    np.testing.assert_allclose(custom.resolved_weights(2), [0.75, 0.25])
    with pytest.raises(ValueError, match="deep_sup_weights"):
        custom.resolved_weights(3)


def test_loss_is_permutation_invariant():
    rng = np.random.default_rng(7)
    logits = rng.uniform(-2, 2, (1, 3, 2, 2, 2))
    labels = rng.integers(0, 3, size=(1, 2, 2, 2))
    cfg = LossConfig()
    base = float(combined_loss(T.tensor(logits, dtype=np.float64), [], labels, cfg).data)
    for seed in range(10):
        perm = np.random.default_rng(seed).permutation(8)
        lp = logits.reshape(1, 3, 8)[:, :, perm].reshape(logits.shape)
        yp = labels.reshape(1, 8)[:, perm].reshape(labels.shape)
        got = float(combined_loss(T.tensor(lp, dtype=np.float64), [], yp, cfg).data)
        assert abs(got - base) < 1e-12


def test_perfect_prediction_at_all_stages():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 3, size=(1, 4, 4, 4))
    main = T.tensor(20.0 * one_hot(labels, 3, dtype=np.float32))
    aux_labels = downsample_labels(labels, (2, 2, 2))
    aux = T.tensor(20.0 * one_hot(aux_labels, 3, dtype=np.float32))
    got = float(combined_loss(main, [aux], labels, LossConfig()).data)
    assert got < 1e-4


def test_downsample_labels_stride_semantics():
    labels = np.arange(16).reshape(1, 1, 4, 4)
    got = downsample_labels(labels, (1, 2, 2))
    assert np.array_equal(got, [[[[0, 2], [8, 10]]]])
    with pytest.raises(ShapeError, match="divisible"):
        downsample_labels(labels, (1, 3, 3))


def test_loss_config_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        LossConfig(w_ce=-1.0).validate()
    with pytest.raises(ValueError, match="both zero"):
        LossConfig(w_ce=0.0, w_dice=0.0).validate()
    with pytest.raises(ValueError, match="dice_eps"):
        LossConfig(dice_eps=0.0).validate()
    with pytest.raises(ValueError, match="deep_sup_weights"):
        LossConfig(deep_sup_weights=(-1.0, 2.0)).validate()
