"""Per-sample distillation influence and the teacher gradients built from it.

Two routes produce the influence-weighted teacher gradient:

* the oracle route computes one student gradient per training sample,
  dots each with the validation gradient at the lookahead student, and
  reweights the teacher's per-sample distillation losses by the result;
* the finite-difference route (``influence_teacher_grad_fda``) perturbs the
  student by ``+/- eps`` along the validation gradient and differentiates the
  difference of two distillation losses w.r.t. the teacher. It needs two
  student forwards and one teacher backward regardless of batch size.

``influence_teacher_grad_mixed_exact`` computes, without finite differences,
the mixed second derivative that the finite-difference route converges to.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GradVector, ParamVector, axpy_params, backward, per_sample_grads, sgd_step
from .errors import DataError, DegenerateEpsilonError
from .losses import distill, student_loss, val_loss
from .models import Classifier, predict_probs


@dataclass(frozen=True)
class EpsilonRule:
    """``fixed``: eps = value. ``grad-scaled``: eps = value / ||g_val||."""

    mode: str = "grad-scaled"
    value: float = 0.01

    def __post_init__(self):
        if self.mode not in ("fixed", "grad-scaled"):
            raise ValueError(f"unknown epsilon mode {self.mode!r}")
        if not self.value > 0:
            raise ValueError("epsilon value must be positive")

    def resolve(self, val_grad: GradVector) -> float:
        if self.mode == "fixed":
            return self.value
        return self.value / val_grad.norm()


@dataclass(frozen=True)
class InfluenceRecord:
    step: int
    sample_id: int
    influence: float
    t_prob: float
    s_prob: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def _distill_rows(teacher: Classifier, student: Classifier, batch, temperature, variant):
    t = predict_probs(teacher, batch.features, temperature)
    s = predict_probs(student, batch.features, temperature)
    return distill(t, s, variant, "none")


def lookahead_student(student: Classifier, teacher: Classifier, batch, alpha: float, lr: float,
                      temperature: float = 1.0, variant: str = "ce") -> ParamVector:
    """One SGD step of the student on its distillation objective; ``student`` is untouched."""
    if lr < 0:
        raise ValueError("student learning rate must be non-negative")
    loss = student_loss(student, teacher, batch, alpha, temperature, variant)
    return sgd_step(student.params, backward(loss, student.params), lr)


def val_grad_at_lookahead(student: Classifier, lookahead_params: ParamVector, val_batch) -> GradVector:
    """Gradient of the validation cross-entropy at the lookahead parameters."""
    if len(val_batch) == 0:
        raise DataError("empty validation batch")
    s = student.with_params(lookahead_params)
    return backward(val_loss(s, val_batch), lookahead_params)


def per_sample_distill_grads(student: Classifier, teacher: Classifier, batch,
                             temperature: float = 1.0, variant: str = "ce") -> list[GradVector]:
    frozen = teacher.detached()
    return per_sample_grads(
        lambda b: _distill_rows(frozen, student, b, temperature, variant), batch, student.params
    )


def distillation_influence_exact(student: Classifier, lookahead_params: ParamVector, teacher: Classifier,
                                 batch, val_batch, *, temperature: float = 1.0, variant: str = "ce",
                                 val_grad: Optional[GradVector] = None) -> np.ndarray:
    """Influence of each training sample: its distillation gradient dotted with ``g_val``.

    Oracle path: one student backward per sample.
    """
    g_val = val_grad if val_grad is not None else val_grad_at_lookahead(student, lookahead_params, val_batch)
    grads = per_sample_distill_grads(student, teacher, batch, temperature, variant)
    return np.array([g.dot(g_val) for g in grads])


def influence_weighted_teacher_grad_exact(teacher: Classifier, student: Classifier,
                                          lookahead_params: ParamVector, batch, val_batch, *,
                                          temperature: float = 1.0, variant: str = "ce",
                                          weights: Optional[np.ndarray] = None,
                                          val_grad: Optional[GradVector] = None) -> GradVector:
    """Teacher gradient of ``mean_i w_i * distill(T(x_i), S(x_i))`` with ``w_i`` held constant."""
    if weights is None:
        weights = distillation_influence_exact(student, lookahead_params, teacher, batch, val_batch,
                                               temperature=temperature, variant=variant, val_grad=val_grad)
    rows = _distill_rows(teacher, student.detached(), batch, temperature, variant)
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w):
        return GradVector.zeros_like(teacher.params)
    return backward((rows * w).mean(), teacher.params)


@dataclass(frozen=True)
class FDAResult:
    grad: GradVector
    influences: np.ndarray  # per-sample finite-difference influence values
    eps: float
    teacher_true_prob: np.ndarray


def fda_influence(teacher: Classifier, student: Classifier, lookahead_params: ParamVector, batch,
                  val_batch, eps_rule: EpsilonRule = EpsilonRule(), *, temperature: float = 1.0,
                  variant: str = "ce", val_grad: Optional[GradVector] = None,
                  clip: Optional[float] = None) -> FDAResult:
    """Finite-difference influence loss and its teacher gradient.

    ``clip`` caps each sample's finite-difference term at ``clip`` in
    magnitude (by a constant rescale); off by default.
    """
    g_val = val_grad if val_grad is not None else val_grad_at_lookahead(student, lookahead_params, val_batch)
    n = len(batch)
    if n == 0:
        raise DataError("empty training batch")
    if g_val.is_zero():
        t_true = predict_probs(teacher.detached(), batch.features, temperature).value[np.arange(n), batch.labels]
        return FDAResult(GradVector.zeros_like(teacher.params), np.zeros(n), float("nan"), t_true)
    eps = eps_rule.resolve(g_val)
    plus = axpy_params(student.params, g_val, eps).detached()
    minus = axpy_params(student.params, g_val, -eps).detached()
    if plus.bit_equal(minus):
        raise DegenerateEpsilonError(f"eps={eps:g} leaves the student unperturbed in float64")

    t = predict_probs(teacher, batch.features, temperature)
    s_plus = predict_probs(student.with_params(plus), batch.features, temperature)
    s_minus = predict_probs(student.with_params(minus), batch.features, temperature)
    diff = (distill(t, s_plus, variant, "none") - distill(t, s_minus, variant, "none")) * (0.5 / eps)
    per_sample = diff.value.copy()
    if clip is not None:
        diff = diff * np.minimum(1.0, clip / np.maximum(np.abs(per_sample), 1e-300))
    t_true = t.value[np.arange(n), batch.labels]
    grad = backward(diff.mean(), teacher.params)
    return FDAResult(grad, per_sample, eps, t_true)


def influence_teacher_grad_fda(teacher: Classifier, student: Classifier, lookahead_params: ParamVector,
                               batch, val_batch, eps_rule: EpsilonRule = EpsilonRule(), *,
                               temperature: float = 1.0, variant: str = "ce",
                               val_grad: Optional[GradVector] = None) -> GradVector:
    return fda_influence(teacher, student, lookahead_params, batch, val_batch, eps_rule,
                         temperature=temperature, variant=variant, val_grad=val_grad).grad


def student_prob_jvp(student: Classifier, batch, direction: GradVector, temperature: float = 1.0) -> np.ndarray:
    """Directional derivative of every student probability along ``direction``.

    Returns a ``(B, C)`` array, built from one reverse pass per entry.
    """
    n, c = len(batch), student.spec.num_classes
    out = np.empty((n, c))
    for i in range(n):
        row = batch.subset([i])
        for k in range(c):
            q = predict_probs(student, row.features, temperature)
            pick = np.zeros((1, c))
            pick[0, k] = 1.0
            out[i, k] = backward((q * pick).sum(), student.params).dot(direction)
    return out


def influence_teacher_grad_mixed_exact(teacher: Classifier, student: Classifier,
                                       lookahead_params: ParamVector, batch, val_batch, *,
                                       temperature: float = 1.0, variant: str = "ce",
                                       val_grad: Optional[GradVector] = None) -> GradVector:
    """Exact ``grad_t mean_i <grad_s distill_i, g_val>``, the limit of the FDA as eps -> 0.

    The inner directional derivative is linear in the teacher probabilities
    ``p``: ``sum_c dL/dq_c(p, q) * (J_q g)_c``. ``J_q g`` is computed exactly
    by reverse mode, then the teacher is differentiated through ``p`` alone.
    """
    g_val = val_grad if val_grad is not None else val_grad_at_lookahead(student, lookahead_params, val_batch)
    if g_val.is_zero():
        return GradVector.zeros_like(teacher.params)
    v = student_prob_jvp(student, batch, g_val, temperature)
    q = predict_probs(student.detached(), batch.features, temperature).value
    p = predict_probs(teacher, batch.features, temperature)
    if variant == "ce":
        coef = np.where(q < ad.PROB_FLOOR, 0.0, -v / np.maximum(q, ad.PROB_FLOOR))
    elif variant == "mse":
        coef = -2.0 * v / q.shape[1]
    else:
        raise ValueError(f"unknown distillation variant {variant!r}")
    return backward((p * coef).sum(axis=1).mean(), teacher.params)


def tracin_influence(student: Classifier, params_before: ParamVector, params_after: ParamVector,
                     probe_batch) -> float:
    """Reduction in probe-batch cross-entropy from ``params_before`` to ``params_after``."""
    before = val_loss(student.with_params(params_before.detached()), probe_batch).item()
    after = val_loss(student.with_params(params_after.detached()), probe_batch).item()
    return before - after


def meta_hypergradient_scalar(student: Classifier, lookahead_params: ParamVector, teacher: Classifier,
                              batch, val_batch, *, temperature: float = 1.0, variant: str = "ce",
                              val_grad: Optional[GradVector] = None) -> float:
    """``h``: the batch distillation gradient of the student dotted with ``g_val``."""
    g_val = val_grad if val_grad is not None else val_grad_at_lookahead(student, lookahead_params, val_batch)
    loss = _distill_rows(teacher.detached(), student, batch, temperature, variant).mean()
    return backward(loss, student.params).dot(g_val)
