"""Training losses: voxelwise cross-entropy, soft Dice, and their weighted sum.

Cross-entropy is evaluated in log space. Soft Dice runs per class and batch
item with an epsilon in numerator and denominator, so a class absent from
both prediction and target contributes zero loss. Deep supervision weights
the main head and each auxiliary head, with label targets stride-sampled to
each head's resolution (nearest-neighbor with corner alignment: categorical
labels cannot be interpolated).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "LossConfig",
    "one_hot",
    "downsample_labels",
    "cross_entropy",
    "soft_dice_loss",
    "combined_loss",
]


@dataclass
class LossConfig:
    w_ce: float = 1.0
    w_dice: float = 1.0
    dice_eps: float = 1e-5
    mean_batch: bool = True
    deep_sup_weights: tuple = None  # None -> halve per coarser stage, normalized

    def validate(self):
        if self.w_ce < 0 or self.w_dice < 0:
            raise ValueError(
                f"LossConfig: loss weights must be nonnegative, got "
                f"w_ce={self.w_ce}, w_dice={self.w_dice}")
        if self.w_ce == 0 and self.w_dice == 0:
            raise ValueError("LossConfig: w_ce and w_dice are both zero")
        if self.dice_eps <= 0:
            raise ValueError(f"LossConfig: dice_eps must be positive, got {self.dice_eps}")
        if self.deep_sup_weights is not None:
            ws = np.asarray(self.deep_sup_weights, dtype=np.float64)
            if ws.ndim != 1 or ws.size == 0 or (ws < 0).any() or ws.sum() == 0:
                raise ValueError(
                    f"LossConfig: deep_sup_weights must be nonnegative with a positive "
                    f"sum, got {self.deep_sup_weights}")

    def resolved_weights(self, n_stages):
        """Per-stage weights summing to 1; stage 0 is the main head."""
        if self.deep_sup_weights is None:
            ws = 0.5 ** np.arange(n_stages)
        else:
            ws = np.asarray(self.deep_sup_weights, dtype=np.float64)
            if ws.size != n_stages:
                raise ValueError(
                    f"LossConfig: {ws.size} deep_sup_weights for {n_stages} stages")
        return ws / ws.sum()


def one_hot(labels, n_classes, dtype=np.float32):
    """Labels [B, D, H, W] -> indicator volume [B, n_classes, D, H, W]."""
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ShapeError(f"one_hot: labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"one_hot: labels span [{labels.min()}, {labels.max()}], "
            f"expected [0, {n_classes})")
    planes = np.eye(n_classes, dtype=dtype)[labels]
    return np.ascontiguousarray(np.moveaxis(planes, -1, 1))


def downsample_labels(labels, spatial):
    """Stride-sample categorical labels [B, D, H, W] down to `spatial`."""
    labels = np.asarray(labels)
    if labels.ndim != 4:
        raise ShapeError(f"downsample_labels: expected [B, D, H, W], got {labels.shape}")
    full = labels.shape[1:]
    if any(f % t for f, t in zip(full, spatial)):
        raise ShapeError(
            f"downsample_labels: extents {full} not divisible by target {tuple(spatial)}")
    fz, fy, fx = (f // t for f, t in zip(full, spatial))
    return labels[:, ::fz, ::fy, ::fx]


def _check_labels(logits_shape, labels, n_classes):
    expected = logits_shape[:1] + logits_shape[2:]
    if labels.shape != expected:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits_shape} "
            f"(expected {expected})")
    if labels.dtype.kind not in "iu":
        raise ShapeError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"labels span [{labels.min()}, {labels.max()}], expected [0, {n_classes})")


def cross_entropy(logits, labels):
    """Mean over batch and voxels of -log softmax(logits)[label], in log space."""
    labels = np.asarray(labels)
    n_classes = logits.data.shape[1]
    _check_labels(logits.data.shape, labels, n_classes)
    lsm = T.log_softmax(logits, axis=1)
    mask = Tensor(one_hot(labels, n_classes, dtype=logits.data.dtype))
    return T.scale(T.tsum(T.mul(lsm, mask)), -1.0 / labels.size)


def soft_dice_loss(probs, target_onehot, cfg):
    """Mean over classes (and batch) of 1 - (2 sum(p t) + eps)/(sum p + sum t + eps).

    With mean_batch the ratio is taken per (batch item, class) and averaged
    batch-then-class; without it the sums pool the whole batch per class.
    """
    t_data = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot)
    pd = probs.data
    if t_data.shape != pd.shape:
        raise ShapeError(f"soft_dice_loss: probs {pd.shape} vs target {t_data.shape}")
    if t_data.dtype != pd.dtype:
        t_data = t_data.astype(pd.dtype)
    b, c = pd.shape[0], pd.shape[1]
    n = int(np.prod(pd.shape[2:]))
    p = T.reshape(probs, (b, c, n))
    t = Tensor(t_data.reshape(b, c, n))

    inter = T.tsum(T.mul(p, t), axis=2)        # [b, c]
    psum = T.tsum(p, axis=2)
    tsum = Tensor(t.data.sum(axis=2))
    if not cfg.mean_batch:
        inter = T.tsum(inter, axis=0)
        psum = T.tsum(psum, axis=0)
        tsum = Tensor(tsum.data.sum(axis=0))

    eps = float(cfg.dice_eps)
    score = T.div(T.add(T.scale(inter, 2.0), eps), T.add(T.add(psum, tsum), eps))
    return T.tmean(T.add(T.neg(score), 1.0))


def combined_loss(logits, aux_logits, labels, cfg):
    """Deep-supervision weighted sum of w_ce * CE + w_dice * Dice per stage.

    Stage 0 is the main head; every auxiliary head's target is the label
    volume stride-sampled to its resolution.
    """
    cfg.validate()
    labels = np.asarray(labels)
    stages = [logits, *aux_logits]
    weights = cfg.resolved_weights(len(stages))
    total = None
    for stage, w_stage in zip(stages, weights):
        target = downsample_labels(labels, stage.data.shape[2:])
        term = None
        if cfg.w_ce:
            term = T.scale(cross_entropy(stage, target), cfg.w_ce)
        if cfg.w_dice:
            probs = T.softmax(stage, axis=1)
            onehot = one_hot(target, stage.data.shape[1], dtype=stage.data.dtype)
            dice = T.scale(soft_dice_loss(probs, Tensor(onehot), cfg), cfg.w_dice)
            term = dice if term is None else T.add(term, dice)
        term = T.scale(term, float(w_stage))
        total = term if total is None else T.add(total, term)
    return total
