"""Closed-form trace of one LGTM step for 2-parameter linear teacher and student.

Both models are ``ClassifierSpec(1, (), 2, bias=False)``: logits are ``x * w``
for a weight row ``w`` of length 2. Every gradient is written out by hand
from softmax / cross-entropy calculus, independently of the autodiff engine.
"""
import numpy as np

from .autodiff import ParamVector, axpy_params
from .data import Batch
from .influence import fda_influence, lookahead_student, val_grad_at_lookahead
from .models import Classifier, ClassifierSpec
from .trainers import DistillConfig, TrainState, _aux_grad, lgtm_step


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def probs(w, x):
    return softmax(x * w)


def trace(w_t, w_s, xs, ys, xv, yv, *, alpha, lr_s, lr_t, eps_scale=0.01, ascend=True):
    eye = np.eye(2)
    n = len(xs)

    def student_grad(w_teacher, w_student):
        g = np.zeros(2)
        for x, y in zip(xs, ys):
            p, q = probs(w_teacher, x), probs(w_student, x)
            g += x * (q - (alpha * eye[y] + (1 - alpha) * p))
        return g / n

    out = {}
    out["lookahead"] = w_s - lr_s * student_grad(w_t, w_s)

    g_val = np.zeros(2)
    for x, y in zip(xv, yv):
        g_val += x * (probs(out["lookahead"], x) - eye[y])
    g_val /= len(xv)
    out["g_val"] = g_val

    eps = eps_scale / np.linalg.norm(g_val)
    out["eps"] = eps
    out["plus"], out["minus"] = w_s + eps * g_val, w_s - eps * g_val

    # d/dw_t sum_c p_c l_c with p = softmax(x w_t) is x * p * (l - p.l)
    fda = np.zeros(2)
    infl = []
    for x in xs:
        p = probs(w_t, x)
        d = np.log(probs(out["minus"], x)) - np.log(probs(out["plus"], x))
        infl.append(p @ d / (2 * eps))
        fda += x * p * (d - p @ d) / (2 * eps)
    out["fda_grad"] = fda / n
    out["influences"] = np.array(infl)

    aux = np.zeros(2)
    for x, y in zip(xs, ys):
        p, q = probs(w_t, x), probs(w_s, x)
        ell = -np.log(q)
        aux += x * (alpha * (p - eye[y]) + (1 - alpha) * p * (ell - p @ ell))
    aux /= n
    out["aux_grad"] = aux

    out["teacher_grad"] = (-out["fda_grad"] if ascend else out["fda_grad"]) + aux
    out["teacher"] = w_t - lr_t * out["teacher_grad"]
    out["student"] = w_s - lr_s * student_grad(out["teacher"], w_s)
    return out


def engine_trace(w_t, w_s, xs, ys, xv, yv, *, alpha, lr_s, lr_t, ascend=True):
    """The same quantities produced by the package, plus the final state of ``lgtm_step``."""
    spec = ClassifierSpec(1, (), 2, bias=False)
    teacher = Classifier(spec, ParamVector([("head.weight", np.array([w_t]))], "teacher"), "teacher")
    student = Classifier(spec, ParamVector([("head.weight", np.array([w_s]))], "student"), "student")
    batch = Batch(np.array(xs, float)[:, None], np.array(ys), np.arange(len(xs)))
    val = Batch(np.array(xv, float)[:, None], np.array(yv), np.arange(100, 100 + len(xv)))
    cfg = DistillConfig(trainer_kind="lgtm", alpha=alpha, lr_student=lr_s, lr_teacher=lr_t,
                        influence_direction="ascend" if ascend else "descend")

    look = lookahead_student(student, teacher, batch, alpha, lr_s)
    g_val = val_grad_at_lookahead(student, look, val)
    eps = cfg.eps_rule.resolve(g_val)
    res = fda_influence(teacher, student, look, batch, val, cfg.eps_rule, val_grad=g_val)
    aux = _aux_grad(teacher, student, batch, cfg)
    final = lgtm_step(TrainState(0, teacher, student, cfg), batch, val)
    row = lambda v: np.asarray(v.flatten())
    return {
        "lookahead": row(look),
        "g_val": row(g_val),
        "eps": eps,
        "plus": row(axpy_params(student.params, g_val, eps)),
        "minus": row(axpy_params(student.params, g_val, -eps)),
        "fda_grad": row(res.grad),
        "influences": res.influences,
        "aux_grad": row(aux),
        "teacher_grad": row((res.grad.scale(-1.0) if ascend else res.grad) + aux),
        "teacher": row(final.teacher.params),
        "student": row(final.student.params),
    }


TOY = dict(w_t=np.array([0.9, -0.4]), w_s=np.array([-0.2, 0.35]), xs=[1.2, -0.7], ys=[0, 1],
           xv=[0.5, -1.5, 2.0], yv=[1, 0, 0], alpha=0.6, lr_s=0.1, lr_t=0.05)


def max_discrepancy(ascend=True):
    """Largest abs difference over every intermediate of the hand trace vs the engine."""
    want = trace(**TOY, ascend=ascend)
    got = engine_trace(**TOY, ascend=ascend)
    return {k: float(np.max(np.abs(np.asarray(got[k]) - np.asarray(want[k])))) for k in want}
