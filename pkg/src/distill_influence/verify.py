"""Oracle checks shared by ``distill-influence verify`` and the acceptance tests.

Each ``check_*`` function returns a :class:`Check`. Non-gating checks are
reported but never change the verdict.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import handtrace
from .autodiff import ParamVector, backward, mean_grads, sgd_step
from .data import Batch
from .gradcheck import cosine, numeric_grad, rel_error
from .influence import (
    EpsilonRule,
    distillation_influence_exact,
    fda_influence,
    influence_teacher_grad_fda,
    influence_teacher_grad_mixed_exact,
    influence_weighted_teacher_grad_exact,
    lookahead_student,
    meta_hypergradient_scalar,
    per_sample_distill_grads,
    val_grad_at_lookahead,
)
from .losses import ce_hard, ce_soft, mse_soft, val_loss
from .metrics import cohort_window_mean
from .models import ClassifierSpec, build_classifier, predict_probs


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    gating: bool = True
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    @property
    def status(self) -> str:
        if not self.gating:
            return "info"
        return "PASS" if self.passed else "FAIL"


def _timed(fn: Callable[..., Check]) -> Callable[..., Check]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out.seconds = time.perf_counter() - t0
        return out

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _rand_batch(rng, n, dim, c, offset=0) -> Batch:
    return Batch(rng.standard_normal((n, dim)), rng.integers(0, c, n), np.arange(offset, offset + n))


def _pair(seed, dim=4, classes=3, t_hidden=(8,), s_hidden=(5,), activation="tanh"):
    t = build_classifier(ClassifierSpec(dim, t_hidden, classes, activation), seed, "teacher")
    s = build_classifier(ClassifierSpec(dim, s_hidden, classes, activation), seed + 10_000, "student")
    return t, s


# --------------------------------------------------------------------------
# gradients


def _layer_cases(rng):
    """(name, params, scalar function of the params' leaves) for every layer kind."""
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    target = rng.dirichlet(np.ones(3), size=5)

    def P(*shapes):
        return ParamVector([(f"p{i}", rng.standard_normal(s)) for i, s in enumerate(shapes)], "p")

    mix = rng.standard_normal((5, 3))
    return [
        ("dense", P((4, 3), (3,)), lambda t: ((ad.Tensor(x) @ t[0] + t[1]) * mix).sum()),
        ("relu", P((5, 3)), lambda t: (ad.relu(t[0]) * mix).sum()),
        ("tanh", P((5, 3)), lambda t: (ad.tanh(t[0]) * mix).sum()),
        ("softmax", P((5, 3)), lambda t: (ad.softmax(t[0]) * mix).sum()),
        ("ce-hard", P((5, 3)), lambda t: ce_hard(y, ad.softmax(t[0]))),
        ("ce-soft-pred", P((5, 3)), lambda t: ce_soft(target, ad.softmax(t[0]))),
        ("ce-soft-target", P((5, 3)), lambda t: ce_soft(ad.softmax(t[0]), target)),
        ("mse-soft", P((5, 3)), lambda t: mse_soft(ad.softmax(t[0]), target)),
        ("mlp-relu", P((4, 6), (6,), (6, 3), (3,)),
         lambda t: ce_hard(y, ad.softmax(ad.relu(ad.Tensor(x) @ t[0] + t[1]) @ t[2] + t[3]))),
        ("mlp-tanh", P((4, 6), (6,), (6, 3), (3,)),
         lambda t: ce_hard(y, ad.softmax(ad.tanh(ad.Tensor(x) @ t[0] + t[1]) @ t[2] + t[3]))),
    ]


@_timed
def check_gradients(seeds=range(100), tol=1e-5, h=1e-5) -> Check:
    """Backward vs central differences for every layer kind over many seeds."""
    worst, worst_at = 0.0, ""
    for seed in seeds:
        for name, params, fn in _layer_cases(np.random.default_rng(seed)):
            g = backward(fn(params.leaves()), params)
            err = rel_error(g, numeric_grad(lambda q: fn(q.leaves()).item(), params, h))
            if err > worst:
                worst, worst_at = err, f"{name}@seed{seed}"
    n = len(list(seeds))
    return Check("autodiff vs central differences", worst <= tol,
                 f"max rel err {worst:.2e} ({worst_at}) over {n} seeds x 10 layers, tol {tol:g}",
                 data={"max_rel_err": worst})


# --------------------------------------------------------------------------
# influence


def first_order_ratio(seed: int, eta: float = 0.02) -> float:
    """Residual ratio at ``eta`` vs ``eta / 2`` for one random (net, sample) instance.

    The student steps on one sample's distillation loss; the validation-loss
    change minus ``-eta * I`` should shrink about fourfold when ``eta`` halves.
    """
    rng = np.random.default_rng([seed, 7])
    dim, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    t, s = _pair(seed, dim, c, (int(rng.integers(3, 9)),), (int(rng.integers(2, 7)),))
    b = _rand_batch(rng, 1, dim, c)
    vb = _rand_batch(rng, 16, dim, c, offset=100)
    g_i = per_sample_distill_grads(s, t, b)[0]
    base = val_loss(s.detached(), vb).item()

    def residual(step):
        after = sgd_step(s.params, g_i, step)
        infl = distillation_influence_exact(s, after, t, b, vb)[0]
        return val_loss(s.with_params(after.detached()), vb).item() - base + step * infl

    return residual(eta) / residual(eta / 2)


@_timed
def check_first_order(instances: int = 200, lo: float = 3.0, hi: float = 5.0, quorum: float = 0.95) -> Check:
    ratios = np.array([first_order_ratio(k) for k in range(instances)])
    frac = float(np.mean((ratios >= lo) & (ratios <= hi)))
    return Check("influence first-order law", frac >= quorum,
                 f"{frac:.1%} of {instances} instances have residual ratio in [{lo:g},{hi:g}] "
                 f"(median {np.median(ratios):.3f}); need {quorum:.0%}",
                 data={"fraction": frac, "ratios": ratios})


def _fda_instance(seed):
    rng = np.random.default_rng([seed, 3])
    dim, c = 6, 3
    t, s = _pair(seed, dim, c, (24, 16), (12,))
    n = int(rng.integers(4, 17))
    b = _rand_batch(rng, n, dim, c)
    vb = _rand_batch(rng, 16, dim, c, offset=100)
    look = lookahead_student(s, t, b, 0.6, 0.1)
    return t, s, b, vb, look


@_timed
def check_fda_vs_fixed_weight(seeds=range(20), eps_value: float = 0.01, gating: bool = True) -> Check:
    """FDA teacher gradient against the oracle that holds the influence weights fixed."""
    cos, rel = [], []
    for seed in seeds:
        t, s, b, vb, look = _fda_instance(seed)
        g_val = val_grad_at_lookahead(s, look, vb)
        fda = influence_teacher_grad_fda(t, s, look, b, vb, EpsilonRule("grad-scaled", eps_value), val_grad=g_val)
        ref = influence_weighted_teacher_grad_exact(t, s, look, b, vb, val_grad=g_val)
        cos.append(cosine(fda, ref))
        rel.append(abs(fda.norm() - ref.norm()) / ref.norm())
    ok = min(cos) >= 0.99 and max(rel) <= 0.05
    return Check("FDA vs fixed-weight oracle", ok,
                 f"cosine min {min(cos):.3f} median {np.median(cos):.3f}; "
                 f"magnitude err max {max(rel):.2f} (need cos>=0.99, err<=5%)",
                 gating=gating, data={"cosine": cos, "magnitude_error": rel})


@_timed
def check_fda_vs_mixed(seeds=range(20), eps_value: float = 0.01) -> Check:
    """FDA teacher gradient against the exact mixed second derivative it approximates."""
    cos, rel = [], []
    for seed in seeds:
        t, s, b, vb, look = _fda_instance(seed)
        g_val = val_grad_at_lookahead(s, look, vb)
        fda = influence_teacher_grad_fda(t, s, look, b, vb, EpsilonRule("grad-scaled", eps_value), val_grad=g_val)
        ref = influence_teacher_grad_mixed_exact(t, s, look, b, vb, val_grad=g_val)
        cos.append(cosine(fda, ref))
        rel.append(rel_error(fda, ref))
    ok = min(cos) >= 0.99 and max(rel) <= 0.05
    return Check("FDA vs exact mixed derivative", ok,
                 f"cosine min {min(cos):.6f}; rel err max {max(rel):.2e} (eps scale {eps_value:g})",
                 data={"cosine": cos, "rel_error": rel})


@_timed
def check_fda_calls(eps_value: float = 0.01) -> Check:
    t, s, b, vb, look = _fda_instance(0)
    g_val = val_grad_at_lookahead(s, look, vb)
    with ad.count_calls() as calls:
        fda_influence(t, s, look, b, vb, EpsilonRule("grad-scaled", eps_value), val_grad=g_val)
    want = {("forward", "student"): 2, ("forward", "teacher"): 1, ("backward", "teacher"): 1}
    got = dict(calls)
    return Check("FDA call structure", got == want,
                 f"student fwd {got.get(('forward', 'student'), 0)}, "
                 f"student bwd {got.get(('backward', 'student'), 0)}, "
                 f"teacher fwd {got.get(('forward', 'teacher'), 0)}, "
                 f"teacher bwd {got.get(('backward', 'teacher'), 0)}")


@_timed
def check_fda_speedup(batch_size: int = 64, calls: int = 10, min_speedup: float = 5.0) -> Check:
    """Wall clock of the FDA teacher gradient vs the per-sample oracle on the default nets."""
    rng = np.random.default_rng(0)
    dim, c = 10, 2
    t = build_classifier(ClassifierSpec(dim, (64, 64), c), 1, "teacher")
    s = build_classifier(ClassifierSpec(dim, (16,), c), 2, "student")
    b = _rand_batch(rng, batch_size, dim, c)
    vb = _rand_batch(rng, 32, dim, c, offset=1000)
    look = lookahead_student(s, t, b, 0.6, 0.1)

    def clock(fn):
        fn()  # warm-up
        t0 = time.perf_counter()
        for _ in range(calls):
            fn()
        return (time.perf_counter() - t0) / calls

    fast = clock(lambda: influence_teacher_grad_fda(t, s, look, b, vb))
    slow = clock(lambda: influence_weighted_teacher_grad_exact(t, s, look, b, vb))
    ratio = slow / fast
    return Check("FDA speedup over per-sample oracle", ratio >= min_speedup,
                 f"{ratio:.1f}x at B={batch_size} ({fast * 1e3:.2f} ms vs {slow * 1e3:.2f} ms); need {min_speedup:g}x",
                 data={"speedup": ratio})


@_timed
def check_h_consistency(seeds=range(20), tol: float = 1e-10) -> Check:
    worst_direct, worst_mean = 0.0, 0.0
    for seed in seeds:
        t, s, b, vb, look = _fda_instance(seed)
        h = meta_hypergradient_scalar(s, look, t, b, vb)
        # independent recomputation: mean of per-sample grads, and val grad rebuilt by hand
        g_val = backward(ce_hard(vb.labels, predict_probs(s.with_params(look), vb.features)), look)
        direct = mean_grads(per_sample_distill_grads(s, t, b)).dot(g_val)
        infl = distillation_influence_exact(s, look, t, b, vb, val_grad=g_val)
        worst_direct = max(worst_direct, abs(h - direct))
        worst_mean = max(worst_mean, abs(h - float(np.mean(infl))))
    return Check("meta scalar h consistency", max(worst_direct, worst_mean) <= tol,
                 f"|h - <batch grad, g_val>| max {worst_direct:.1e}; |h - mean influence| max {worst_mean:.1e}")


@_timed
def check_hand_trace(tol: float = 1e-8) -> Check:
    worst = {**{f"ascend:{k}": v for k, v in handtrace.max_discrepancy(True).items()},
             **{f"descend:{k}": v for k, v in handtrace.max_discrepancy(False).items()}}
    key = max(worst, key=worst.get)
    return Check("LGTM step vs hand trace", worst[key] <= tol,
                 f"max abs diff {worst[key]:.1e} at {key} over {len(worst)} intermediates",
                 data=worst)


# --------------------------------------------------------------------------
# end-to-end trainer comparison


def run_trainer_battery(seeds=range(5), max_steps: int = 1500, kinds=("vanilla", "meta", "lgtm"),
                        overrides: Optional[dict] = None):
    """Run each trainer kind on each seed; returns {(kind, seed): (summary, sink)}."""
    from .metrics import MemorySink
    from .trainers import DistillConfig, make_datasets, run_experiment

    out = {}
    for seed in seeds:
        for kind in kinds:
            cfg = DistillConfig(trainer_kind=kind, seed=seed, max_steps=max_steps, **(overrides or {}))
            train, val = make_datasets(cfg)
            sink = MemorySink()
            summary = run_experiment(cfg, train, val, sink)
            out[(kind, seed)] = (summary, sink, train)
    return out


def _mean_curve(results, kind, seeds):
    curves = np.array([[v for _, v in results[(kind, s)][0].val_loss_curve] for s in seeds])
    steps = [st for st, _ in results[(kind, seeds[0])][0].val_loss_curve]
    return steps, curves.mean(axis=0)


def check_ordering(results, seeds=range(5)) -> Check:
    seeds = list(seeds)
    acc = {k: float(np.mean([results[(k, s)][0].student_val_accuracy for s in seeds]))
           for k in ("vanilla", "meta", "lgtm")}
    steps, lg = _mean_curve(results, "lgtm", seeds)
    _, me = _mean_curve(results, "meta", seeds)
    lg_min, me_min = steps[int(np.argmin(lg))], steps[int(np.argmin(me))]
    ok = acc["lgtm"] >= acc["vanilla"] and lg_min >= me_min and lg[-1] < me[-1]
    return Check("LGTM vs vanilla / meta ordering", ok,
                 f"acc lgtm {acc['lgtm']:.4f} vanilla {acc['vanilla']:.4f}; min-loss step lgtm {lg_min} "
                 f"meta {me_min}; terminal loss lgtm {lg[-1]:.4f} meta {me[-1]:.4f}",
                 data={"accuracy": acc, "min_step": (lg_min, me_min), "terminal": (lg[-1], me[-1])})


def check_cohorts(results, seeds=range(5), max_steps: int = 1500, quorum: int = 4) -> Check:
    lo, hi = max_steps // 3, 2 * max_steps // 3
    wins, gaps = 0, []
    for s in seeds:
        _, sink, train = results[("lgtm", s)]
        noisy = set(train.ids[train.noise_mask].tolist())
        w = cohort_window_mean(sink.influence, noisy, lo, hi)
        gaps.append(w["noisy"] - w["clean"])
        wins += w["noisy"] < w["clean"]
    return Check("noisy cohort influence below clean", wins >= quorum,
                 f"{wins}/{len(gaps)} seeds over steps [{lo},{hi}); noisy-clean "
                 + ", ".join(f"{g:+.3f}" for g in gaps),
                 data={"wins": wins})


# --------------------------------------------------------------------------


SCALES = {
    "small": dict(grad_seeds=10, first_order=40, fda_seeds=5),
    "full": dict(grad_seeds=100, first_order=200, fda_seeds=20),
}


def run_battery(scale: str = "small", eps_value: float = 0.01) -> list[Check]:
    """The oracle battery used by ``verify``; ``eps_value`` exists to sabotage-test it."""
    p = SCALES[scale]
    checks = [
        check_gradients(range(p["grad_seeds"])),
        check_first_order(p["first_order"]),
        check_fda_vs_mixed(range(p["fda_seeds"]), eps_value),
        check_fda_vs_fixed_weight(range(p["fda_seeds"]), eps_value, gating=False),
        check_fda_calls(eps_value),
        check_h_consistency(range(p["fda_seeds"])),
        check_hand_trace(),
    ]
    if scale == "full":
        checks.append(check_fda_speedup())
        t0 = time.perf_counter()
        results = run_trainer_battery()
        for c in (check_ordering(results), check_cohorts(results)):
            c.seconds = time.perf_counter() - t0
            checks.append(c)
    return checks


def format_table(checks: list[Check]) -> str:
    w = max(len(c.name) for c in checks)
    lines = [f"{'check':<{w}}  status  time    detail", "-" * (w + 40)]
    for c in checks:
        lines.append(f"{c.name:<{w}}  {c.status:<6}  {c.seconds:5.2f}s  {c.detail}")
    return "\n".join(lines)
