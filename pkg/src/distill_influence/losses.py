"""Supervised, distillation and validation losses.

Cross-entropy takes the *target* distribution first: ``ce_soft(p, q)`` is
``-sum p log q``. Which side carries gradient is decided by the caller,
which passes detached tensors for the frozen side.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor
from .errors import DistributionError, LabelError, ShapeError
from .models import Classifier, predict_probs

REDUCTIONS = ("mean", "none")
VARIANTS = ("ce", "mse")


def _reduce(per_row: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_row.mean()
    if reduction == "none":
        return per_row
    raise ValueError(f"unknown reduction {reduction!r}; use one of {REDUCTIONS}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ce_hard(labels, probs: Tensor, reduction: str = "mean") -> Tensor:
    """``-log probs[i, labels[i]]`` with probabilities floored at 1e-12."""
    if probs.value.ndim != 2 or len(labels) != probs.shape[0]:
        raise ShapeError(f"labels of length {len(labels)} vs probs {probs.shape}")
    return _reduce(ad.xent_rows(one_hot(labels, probs.shape[1]), probs), reduction)


def _check_stochastic(t: Tensor, name: str):
    v = t.value
    if v.size and (np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-6) or np.any(v < 0)):
        raise DistributionError(f"{name} rows are not probability distributions")


def ce_soft(target_probs: Tensor, probs: Tensor, reduction: str = "mean") -> Tensor:
    target_probs, probs = ad.as_tensor(target_probs), ad.as_tensor(probs)
    if target_probs.shape != probs.shape:
        raise ShapeError(f"shape mismatch {target_probs.shape} vs {probs.shape}")
    _check_stochastic(target_probs, "target")
    _check_stochastic(probs, "prediction")
    return _reduce(ad.xent_rows(target_probs, probs), reduction)


def mse_soft(target_probs: Tensor, probs: Tensor, reduction: str = "mean") -> Tensor:
    """Per row, the mean over classes of the squared probability difference."""
    target_probs, probs = ad.as_tensor(target_probs), ad.as_tensor(probs)
    if target_probs.shape != probs.shape or probs.value.ndim != 2:
        raise ShapeError(f"shape mismatch {target_probs.shape} vs {probs.shape}")
    diff = target_probs - probs
    return _reduce((diff * diff).mean(axis=1), reduction)


def distill(target_probs: Tensor, probs: Tensor, variant: str = "ce", reduction: str = "mean") -> Tensor:
    if variant == "ce":
        return ce_soft(target_probs, probs, reduction)
    if variant == "mse":
        return mse_soft(target_probs, probs, reduction)
    raise ValueError(f"unknown distillation variant {variant!r}")


def entropy(probs) -> np.ndarray:
    """Row-wise Shannon entropy in nats (plain numpy; 0 log 0 = 0)."""
    p = probs.value if isinstance(probs, Tensor) else np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def student_loss(student: Classifier, teacher: Classifier, batch, alpha: float = 0.6,
                 temperature: float = 1.0, variant: str = "ce", reduction: str = "mean") -> Tensor:
    """``alpha * CE(y, S) + (1 - alpha) * distill(T, S)`` with the teacher frozen."""
    _check_alpha(alpha)
    s = predict_probs(student, batch.features, temperature)
    hard = ce_hard(batch.labels, s, "none")
    if alpha == 1.0:
        return _reduce(hard, reduction)
    t = predict_probs(teacher.detached(), batch.features, temperature)
    soft = distill(t, s, variant, "none")
    return _reduce(alpha * hard + (1.0 - alpha) * soft, reduction)


def teacher_loss_aux(teacher: Classifier, student: Classifier, batch, alpha: float = 0.6,
                     temperature: float = 1.0, variant: str = "ce", reduction: str = "mean") -> Tensor:
    """``alpha * CE(y, T) + (1 - alpha) * distill(T, S)`` with the student frozen.

    The teacher sits in the target slot of the distillation term, so its
    gradient flows through the first argument.
    """
    _check_alpha(alpha)
    t = predict_probs(teacher, batch.features, temperature)
    hard = ce_hard(batch.labels, t, "none")
    if alpha == 1.0:
        return _reduce(hard, reduction)
    s = predict_probs(student.detached(), batch.features, temperature)
    soft = distill(t, s, variant, "none")
    return _reduce(alpha * hard + (1.0 - alpha) * soft, reduction)


def val_loss(student: Classifier, val_batch, reduction: str = "mean") -> Tensor:
    return ce_hard(val_batch.labels, predict_probs(student, val_batch.features), reduction)
