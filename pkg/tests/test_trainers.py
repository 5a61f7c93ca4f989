import json
from dataclasses import replace

import numpy as np
import pytest

import distill_influence.trainers as tr
from distill_influence.autodiff import GradVector, backward
from distill_influence.data import make_gaussian_task
from distill_influence.errors import ConfigError, DataError
from distill_influence.gradcheck import cosine
from distill_influence.losses import ce_hard, distill
from distill_influence.metrics import MemorySink, accuracy, entropy_gap
from distill_influence.models import ClassifierSpec, build_classifier, predict_probs
from distill_influence.trainers import (
    DistillConfig,
    TrainState,
    config_from_dict,
    finetune_teacher,
    init_state,
    lgtm_step,
    load_config,
    make_datasets,
    meta_step,
    meta_teacher_grad,
    online_step,
    run_experiment,
    vanilla_step,
)

from distill_influence import handtrace
from conftest import random_batch

SMALL = dict(teacher_hidden=(8,), student_hidden=(4,), batch_size=8, val_batch_size=8, finetune_epochs=1,
             log_every=5)


def small_cfg(**kw):
    data = kw.pop("data", {"n_train": 48, "n_val": 24, "dim": 4})
    return DistillConfig(**{**SMALL, **kw}, data=tr.DataConfig(**data))


@pytest.fixture
def state(toy_task):
    def _make(kind="lgtm", **kw):
        cfg = small_cfg(trainer_kind=kind, **kw)
        return init_state(cfg, toy_task[0])

    return _make


def train_batches(seed=0, n=8):
    return random_batch(n, 4, 2, seed=seed), random_batch(n, 4, 2, seed=seed + 1, id_offset=500)


# --- ordering contracts


@pytest.mark.parametrize("step_fn,kind", [(online_step, "online"), (lgtm_step, "lgtm")])
@pytest.mark.parametrize("order,expected", [
    ("teacher-first", [("teacher", 0, 0), ("student", 1, 0)]),
    ("student-first", [("student", 0, 0), ("teacher", 0, 1)]),
    ("simultaneous", [("teacher", 0, 0), ("student", 0, 0)]),
])
def test_update_order_events(state, step_fn, kind, order, expected):
    st = state(kind, update_order=order)
    b, vb = train_batches()
    nxt = step_fn(st, b) if kind == "online" else step_fn(st, b, vb)
    assert list(nxt.events) == expected
    assert (nxt.step, nxt.teacher_version, nxt.student_version) == (1, 1, 1)


@pytest.mark.parametrize("order", ["teacher-first", "student-first", "simultaneous"])
def test_student_update_uses_expected_teacher(state, order):
    st = state("online", update_order=order)
    b, _ = train_batches()
    nxt = online_step(st, b)
    cfg = st.config
    teacher_seen = nxt.teacher if order == "teacher-first" else st.teacher
    g = backward(tr.student_loss(st.student, teacher_seen, b, cfg.alpha), st.student.params)
    want = st.student.params.flatten() - cfg.lr_student * g.flatten()
    np.testing.assert_array_equal(nxt.student.params.flatten(), want)


def test_meta_events(state):
    st = state("meta")
    nxt = meta_step(st, *train_batches())
    assert list(nxt.events) == [("student", 0, 0), ("teacher", 0, 1)]


# --- vanilla


def test_vanilla_freezes_teacher(state):
    st = state("vanilla")
    b, _ = train_batches()
    nxt = vanilla_step(st, b)
    assert nxt.teacher.params.bit_equal(st.teacher.params)
    assert not nxt.student.params.bit_equal(st.student.params)


def test_vanilla_alpha_one_is_supervised(state):
    st = state("vanilla", alpha=1.0)
    s = st.student
    for seed in range(5):
        b, _ = train_batches(seed)
        st = vanilla_step(st, b)
        g = backward(ce_hard(b.labels, predict_probs(s, b.features)), s.params)
        s = s.with_params(tr.sgd_step(s.params, g, st.config.lr_student))
    assert st.student.params.bit_equal(s.params)


def test_vanilla_loss_decreases(toy_task):
    train, _ = toy_task
    st = init_state(small_cfg(trainer_kind="vanilla"), train)
    full = train.as_batch()
    start = tr.student_loss(st.student, st.teacher, full).item()
    stream = tr.BatchStream(train, 8, 0)
    for _ in range(50):
        st = vanilla_step(st, next(stream))
    assert tr.student_loss(st.student, st.teacher, full).item() < start


# --- online


def test_online_alpha_one_decouples(toy_task):
    train, _ = toy_task
    a = init_state(small_cfg(trainer_kind="online", alpha=1.0), train)
    other = build_classifier(a.teacher.spec, 99, "teacher")
    b = replace(a, teacher=other)
    for seed in range(5):
        batch, _ = train_batches(seed)
        a, b = online_step(a, batch), online_step(b, batch)
    assert a.student.params.bit_equal(b.student.params)
    assert not a.teacher.params.bit_equal(b.teacher.params)


def test_online_entropy_gap_shrinks(toy_task):
    train, val = toy_task
    cfg = DistillConfig(trainer_kind="online", teacher_init="fresh", batch_size=8)
    st = init_state(cfg, train)
    start = abs(entropy_gap(st.teacher, st.student, val))
    stream = tr.BatchStream(train, 8, 1)
    for _ in range(600):
        st = online_step(st, next(stream))
    assert abs(entropy_gap(st.teacher, st.student, val)) < 0.5 * start


# --- meta


def test_meta_zero_h_leaves_teacher(state, monkeypatch):
    monkeypatch.setattr(tr, "meta_hypergradient_scalar", lambda *a, **k: 0.0)
    st = state("meta")
    nxt = meta_step(st, *train_batches())
    assert nxt.teacher.params.bit_equal(st.teacher.params)


def test_meta_grad_is_collinear(state):
    st = state("meta")
    b, vb = train_batches(3)
    cfg = st.config
    look = tr.lookahead_student(st.student, st.teacher, b, cfg.alpha, cfg.lr_student)
    g, h = meta_teacher_grad(st.teacher, st.student, look, b, vb, cfg)
    ref = backward(distill(predict_probs(st.teacher, b.features), predict_probs(st.student.detached(), b.features)),
                   st.teacher.params)
    assert h != 0
    assert abs(abs(cosine(g, ref)) - 1.0) <= 1e-9
    assert g.norm() == pytest.approx(cfg.lr_student * (1 - cfg.alpha) * abs(h) * ref.norm(), rel=1e-12)


@pytest.mark.slow
def test_meta_student_overfits_noisy_labels():
    cfg = DistillConfig(trainer_kind="meta", alpha=0.6, seed=0, max_steps=1500)
    summary = run_experiment(cfg, *make_datasets(cfg))
    assert summary.min_val_loss_step < cfg.max_steps
    assert summary.terminal_val_loss > min(v for _, v in summary.val_loss_curve)


# --- LGTM


@pytest.mark.parametrize("ascend", [True, False])
def test_lgtm_hand_trace(ascend):
    worst = handtrace.max_discrepancy(ascend)
    assert max(worst.values()) <= 1e-8, worst


def test_lgtm_zero_val_grad_is_aux_only(state, monkeypatch):
    monkeypatch.setattr(tr, "val_grad_at_lookahead", lambda s, p, vb: GradVector.zeros_like(p))
    st = state("lgtm")
    b, vb = train_batches()
    nxt = lgtm_step(st, b, vb)
    aux = tr._aux_grad(st.teacher, st.student, b, st.config)
    want = st.teacher.params.flatten() - st.config.lr_teacher * aux.flatten()
    np.testing.assert_array_equal(nxt.teacher.params.flatten(), want)


def test_lgtm_student_sees_new_teacher(state):
    st = state("lgtm")
    b, vb = train_batches(2)
    nxt = lgtm_step(st, b, vb)
    g = backward(tr.student_loss(st.student, nxt.teacher, b, st.config.alpha), st.student.params)
    want = st.student.params.flatten() - st.config.lr_student * g.flatten()
    np.testing.assert_array_equal(nxt.student.params.flatten(), want)


def test_lgtm_empty_val_batch(state):
    b, vb = train_batches()
    with pytest.raises(DataError):
        lgtm_step(state("lgtm"), b, vb.subset([]))


def test_lgtm_records(state):
    st = state("lgtm")
    b, vb = train_batches()
    nxt = lgtm_step(st, b, vb)
    assert [r.sample_id for r in nxt.records] == b.ids.tolist()
    assert all(np.isfinite(r.influence) and 0 <= r.t_prob <= 1 and 0 <= r.s_prob <= 1 for r in nxt.records)


def test_lgtm_frozen_teacher_reproduces_vanilla(toy_task):
    train, val = toy_task
    common = dict(alpha=0.6, seed=4, max_steps=40, teacher_init="finetuned")
    van = run_experiment(small_cfg(trainer_kind="vanilla", **common), train, val)
    lg = run_experiment(small_cfg(trainer_kind="lgtm", lr_teacher=0.0, **common), train, val)
    assert lg.final_state.student.params.bit_equal(van.final_state.student.params)
    assert lg.val_loss_curve == van.val_loss_curve


# --- fine-tuning


def test_finetune_separable():
    train = make_gaussian_task(2, 4, 6.0, 0.0, 400, seed=0)
    t = build_classifier(ClassifierSpec(4, (16,), 2), 0)
    t = finetune_teacher(t, train, epochs=50, lr=0.1, batch_size=32, seed=0, max_steps=200)
    assert accuracy(t, train) >= 0.99


def test_finetune_zero_epochs_and_determinism(toy_task):
    train, _ = toy_task
    t = build_classifier(ClassifierSpec(4, (8,), 2), 0)
    assert finetune_teacher(t, train, 0, 0.1).params.bit_equal(t.params)
    a = finetune_teacher(t, train, 2, 0.1, seed=3)
    assert a.params.bit_equal(finetune_teacher(t, train, 2, 0.1, seed=3).params)


def test_finetune_empty():
    t = build_classifier(ClassifierSpec(4, (8,), 2), 0)
    empty = make_gaussian_task(2, 4, 1.0, 0.0, 4, seed=0).subset([])
    with pytest.raises(DataError):
        finetune_teacher(t, empty, 1, 0.1)


# --- initialisation and the driver


def test_teacher_init_modes(toy_task):
    train, _ = toy_task
    same = init_state(small_cfg(teacher_init="same-as-student"), train)
    x = train.features[:5]
    np.testing.assert_array_equal(predict_probs(same.teacher, x).value, predict_probs(same.student, x).value)
    assert small_cfg(trainer_kind="vanilla").resolved_teacher_init == "finetuned"
    assert small_cfg(trainer_kind="lgtm").resolved_teacher_init == "fresh"


def test_zero_steps(toy_task):
    sink = MemorySink()
    s = run_experiment(small_cfg(max_steps=0), *toy_task, sink)
    assert s.final_state.step == 0
    assert s.val_loss_curve and s.val_loss_curve[0][0] == 0
    assert sink.influence == []


@pytest.mark.parametrize("kind", ["vanilla", "online", "meta", "lgtm"])
def test_runs_deterministic_and_finite(toy_task, kind):
    cfg = small_cfg(trainer_kind=kind, max_steps=30)
    a, b = MemorySink(), MemorySink()
    sa = run_experiment(cfg, *toy_task, a)
    run_experiment(cfg, *toy_task, b)
    assert a.metrics == b.metrics and a.influence == b.influence
    assert all(np.isfinite(r.loss) for r in a.metrics)
    assert sa.final_state.step == 30
    assert (len(a.influence) > 0) == (kind == "lgtm")


def test_make_datasets_gaussian():
    cfg = small_cfg()
    train, val = make_datasets(cfg)
    assert len(train) == 48 and len(val) == 24
    assert set(train.ids.tolist()).isdisjoint(val.ids.tolist())
    assert not val.noise_mask.any()


# --- configuration


def test_missing_alpha_named():
    with pytest.raises(ConfigError, match="alpha") as exc:
        config_from_dict({"trainer_kind": "lgtm", "max_steps": 1, "seed": 0})
    assert exc.value.field == "alpha"


def test_unknown_key():
    with pytest.raises(ConfigError, match="learning_rate"):
        config_from_dict({"trainer_kind": "lgtm", "alpha": 0.5, "max_steps": 1, "seed": 0, "learning_rate": 1})


@pytest.mark.parametrize("key,value", [
    ("alpha", 1.5), ("alpha", "high"), ("temperature", 0), ("lr_student", 0.0), ("lr_teacher", -1.0),
    ("trainer_kind", "mutual"), ("update_order", "random"), ("teacher_init", "pretrained"),
    ("eps_mode", "adaptive"), ("loss_variant", "kl"), ("max_steps", 1.5), ("batch_size", 0),
    ("influence_direction", "sideways"),
])
def test_invalid_fields(key, value):
    raw = {"trainer_kind": "lgtm", "alpha": 0.5, "max_steps": 1, "seed": 0, key: value}
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.field == key


def test_invalid_nested_field():
    raw = {"trainer_kind": "lgtm", "alpha": 0.5, "max_steps": 1, "seed": 0, "data": {"label_noise": 1.0}}
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.field == "data.label_noise"


def test_load_toml_and_json(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('trainer_kind = "meta"\nalpha = 0.4\nmax_steps = 7\nseed = 3\n'
                    'teacher_hidden = [8]\n[data]\nn_train = 50\n')
    cfg = load_config(toml)
    assert (cfg.trainer_kind, cfg.alpha, cfg.max_steps, cfg.teacher_hidden, cfg.data.n_train) == \
           ("meta", 0.4, 7, (8,), 50)
    js = tmp_path / "c.json"
    js.write_text(json.dumps(cfg.to_dict()))
    assert load_config(js) == cfg


def test_load_config_parse_error(tmp_path):
    bad = tmp_path / "c.toml"
    bad.write_text("alpha = = 1")
    with pytest.raises(ConfigError):
        load_config(bad)
