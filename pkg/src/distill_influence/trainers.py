"""Vanilla, online, meta and LGTM distillation loops.

Every step function is pure: it takes a ``TrainState`` and returns a new one.
All optimisation is plain SGD. Each state carries ``events``: for the step
that produced it, the ordered list of parameter updates together with the
teacher/student versions each update read, so ordering contracts can be
checked without timing.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import GradVector, backward, sgd_step
from .data import BatchStream, Dataset, batches
from .errors import ConfigError, DataError
from .influence import (
    EpsilonRule,
    InfluenceRecord,
    fda_influence,
    lookahead_student,
    meta_hypergradient_scalar,
    val_grad_at_lookahead,
)
from .losses import ce_hard, distill, student_loss, teacher_loss_aux
from .metrics import MemorySink, accuracy, evaluate
from .models import Classifier, ClassifierSpec, build_classifier, predict_probs

TRAINER_KINDS = ("vanilla", "online", "meta", "lgtm")
UPDATE_ORDERS = ("teacher-first", "student-first", "simultaneous")
TEACHER_INITS = ("finetuned", "same-as-student", "fresh")

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    source: str = "gaussian"
    num_classes: int = 2
    dim: int = 10
    separation: float = 2.0
    label_noise: float = 0.1
    n_train: int = 400
    n_val: int = 400
    data_seed: Optional[int] = None  # defaults to the run seed
    csv_path: Optional[str] = None
    csv_val_path: Optional[str] = None
    label_column: str = "label"
    split_mode: str = "provided-val"
    carve_fraction: float = 0.1


@dataclass(frozen=True)
class DistillConfig:
    trainer_kind: str = "lgtm"
    alpha: float = 0.6
    temperature: float = 1.0
    lr_student: float = 0.1
    lr_teacher: float = 0.03
    eps_mode: str = "grad-scaled"
    eps_value: float = 0.01
    loss_variant: str = "ce"
    max_steps: int = 1500
    batch_size: int = 32
    val_batch_size: int = 32
    update_order: str = "teacher-first"
    teacher_init: Optional[str] = None  # None: finetuned for vanilla/meta, fresh otherwise
    seed: int = 0
    teacher_hidden: tuple = (64, 64)
    student_hidden: tuple = (16,)
    activation: str = "relu"
    zeros_head: bool = False
    finetune_epochs: int = 6
    finetune_lr: float = 0.1
    influence_clip: Optional[float] = None
    influence_direction: str = "ascend"
    log_every: int = 10
    influence_every: int = 1
    flush_every: int = 100
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        for name in ("teacher_hidden", "student_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if isinstance(self.data, dict):
            object.__setattr__(self, "data", _build(DataConfig, self.data, "data."))

    @property
    def eps_rule(self) -> EpsilonRule:
        return EpsilonRule(self.eps_mode, self.eps_value)

    @property
    def resolved_teacher_init(self) -> str:
        if self.teacher_init is not None:
            return self.teacher_init
        return "finetuned" if self.trainer_kind in ("vanilla", "meta") else "fresh"

    def validate(self) -> "DistillConfig":
        def bad(f, msg):
            raise ConfigError(f"{f}: {msg}", field=f)

        if self.trainer_kind not in TRAINER_KINDS:
            bad("trainer_kind", f"must be one of {TRAINER_KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            bad("alpha", "must lie in [0, 1]")
        if not self.temperature > 0:
            bad("temperature", "must be positive")
        for f in ("lr_student", "finetune_lr"):
            if not getattr(self, f) > 0:
                bad(f, "learning rates must be positive")
        if not self.lr_teacher >= 0:  # 0 freezes the teacher
            bad("lr_teacher", "must be non-negative")
        if self.eps_mode not in ("fixed", "grad-scaled"):
            bad("eps_mode", "must be 'fixed' or 'grad-scaled'")
        if not self.eps_value > 0:
            bad("eps_value", "must be positive")
        if self.loss_variant not in ("ce", "mse"):
            bad("loss_variant", "must be 'ce' or 'mse'")
        for f in ("max_steps", "finetune_epochs"):
            if getattr(self, f) < 0:
                bad(f, "must be non-negative")
        for f in ("batch_size", "val_batch_size", "log_every", "influence_every", "flush_every"):
            if getattr(self, f) <= 0:
                bad(f, "must be positive")
        if self.update_order not in UPDATE_ORDERS:
            bad("update_order", f"must be one of {UPDATE_ORDERS}")
        if self.teacher_init is not None and self.teacher_init not in TEACHER_INITS:
            bad("teacher_init", f"must be one of {TEACHER_INITS}")
        if self.activation not in ("relu", "tanh"):
            bad("activation", "must be 'relu' or 'tanh'")
        if self.influence_direction not in ("ascend", "descend"):
            bad("influence_direction", "must be 'ascend' or 'descend'")
        if self.influence_clip is not None and not self.influence_clip > 0:
            bad("influence_clip", "must be positive when set")
        d = self.data
        if d.source not in ("gaussian", "csv"):
            bad("data.source", "must be 'gaussian' or 'csv'")
        if d.source == "csv" and not d.csv_path:
            bad("data.csv_path", "required for csv source")
        if d.split_mode not in ("provided-val", "carve-from-train"):
            bad("data.split_mode", "must be 'provided-val' or 'carve-from-train'")
        if d.source == "gaussian":
            if not 0 <= d.label_noise < 1:
                bad("data.label_noise", "must lie in [0, 1)")
            if not d.separation > 0:
                bad("data.separation", "must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher_hidden"] = list(self.teacher_hidden)
        d["student_hidden"] = list(self.student_hidden)
        return d


REQUIRED_KEYS = ("trainer_kind", "alpha", "max_steps", "seed")


def _build(cls, raw: dict, prefix: str = ""):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}",
                          field=prefix + unknown[0])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(raw: dict, *, require=REQUIRED_KEYS) -> DistillConfig:
    missing = [k for k in require if k not in raw]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}", field=missing[0])
    raw = dict(raw)
    if "data" in raw and not isinstance(raw["data"], dict):
        raise ConfigError("data: must be a table/object", field="data")
    for k in ("alpha", "temperature", "lr_student", "lr_teacher", "eps_value", "finetune_lr"):
        if k in raw and (isinstance(raw[k], bool) or not isinstance(raw[k], (int, float))):
            raise ConfigError(f"{k}: must be a number", field=k)
    for k in ("max_steps", "seed", "batch_size", "val_batch_size", "finetune_epochs"):
        if k in raw and (isinstance(raw[k], bool) or not isinstance(raw[k], int)):
            raise ConfigError(f"{k}: must be an integer", field=k)
    return _build(DistillConfig, raw).validate()


def read_config_file(path) -> dict:
    """Parse a TOML or JSON file (by suffix) into a plain dict, without validation."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        raw = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return raw


def load_config(path) -> DistillConfig:
    """Read a flat TOML or JSON config (``[data]`` / ``"data"`` nests DataConfig)."""
    return config_from_dict(read_config_file(path))


# --------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class TrainState:
    step: int
    teacher: Classifier
    student: Classifier
    config: DistillConfig
    teacher_version: int = 0
    student_version: int = 0
    events: tuple = ()
    records: tuple = ()

    def _updated(self, teacher=None, student=None, events=(), records=()) -> "TrainState":
        tv = self.teacher_version + (teacher is not None)
        sv = self.student_version + (student is not None)
        return replace(self, step=self.step + 1,
                       teacher=self.teacher if teacher is None else teacher,
                       student=self.student if student is None else student,
                       teacher_version=tv, student_version=sv,
                       events=tuple(events), records=tuple(records))


def _sgd(model: Classifier, grad: GradVector, lr: float) -> Classifier:
    return model.with_params(sgd_step(model.params, grad, lr))


def _student_grad(student, teacher, batch, cfg: DistillConfig) -> GradVector:
    loss = student_loss(student, teacher, batch, cfg.alpha, cfg.temperature, cfg.loss_variant)
    return backward(loss, student.params)


def _aux_grad(teacher, student, batch, cfg: DistillConfig) -> GradVector:
    loss = teacher_loss_aux(teacher, student, batch, cfg.alpha, cfg.temperature, cfg.loss_variant)
    return backward(loss, teacher.params)


# --------------------------------------------------------------------------
# teacher fine-tuning


def finetune_teacher(teacher: Classifier, train_data: Dataset, epochs: int, lr: float, *,
                     batch_size: int = 32, seed: int = 0, max_steps: Optional[int] = None) -> Classifier:
    """Plain cross-entropy SGD on the labels; returns the trained teacher."""
    if len(train_data) == 0:
        raise DataError("cannot fine-tune on an empty dataset")
    steps = 0
    for epoch in range(epochs):
        for b in batches(train_data, batch_size, seed, epoch):
            if max_steps is not None and steps >= max_steps:
                return teacher
            loss = ce_hard(b.labels, predict_probs(teacher, b.features))
            teacher = _sgd(teacher, backward(loss, teacher.params), lr)
            steps += 1
    return teacher


# --------------------------------------------------------------------------
# step functions


def vanilla_step(state: TrainState, batch) -> TrainState:
    """Student SGD against a frozen teacher."""
    cfg = state.config
    g = _student_grad(state.student, state.teacher, batch, cfg)
    ev = [("student", state.teacher_version, state.student_version)]
    return state._updated(student=_sgd(state.student, g, cfg.lr_student), events=ev)


def online_step(state: TrainState, batch) -> TrainState:
    """Teacher on its supervised + agreement loss, student on the distillation loss."""
    cfg = state.config
    t, s = state.teacher, state.student
    tv, sv = state.teacher_version, state.student_version
    order = cfg.update_order
    if order == "teacher-first":
        t_new = _sgd(t, _aux_grad(t, s, batch, cfg), cfg.lr_teacher)
        s_new = _sgd(s, _student_grad(s, t_new, batch, cfg), cfg.lr_student)
        ev = [("teacher", tv, sv), ("student", tv + 1, sv)]
    elif order == "student-first":
        s_new = _sgd(s, _student_grad(s, t, batch, cfg), cfg.lr_student)
        t_new = _sgd(t, _aux_grad(t, s_new, batch, cfg), cfg.lr_teacher)
        ev = [("student", tv, sv), ("teacher", tv, sv + 1)]
    else:
        gt = _aux_grad(t, s, batch, cfg)
        gs = _student_grad(s, t, batch, cfg)
        t_new, s_new = _sgd(t, gt, cfg.lr_teacher), _sgd(s, gs, cfg.lr_student)
        ev = [("teacher", tv, sv), ("student", tv, sv)]
    return state._updated(teacher=t_new, student=s_new, events=ev)


def meta_teacher_grad(teacher, student, lookahead_params, batch, val_batch, cfg: DistillConfig):
    """First-order meta hypergradient ``-lr_s (1 - alpha) h grad_t distill(T, S)``; returns (grad, h)."""
    h = meta_hypergradient_scalar(student, lookahead_params, teacher, batch, val_batch,
                                  temperature=cfg.temperature, variant=cfg.loss_variant)
    if h == 0.0:
        return GradVector.zeros_like(teacher.params), h
    t = predict_probs(teacher, batch.features, cfg.temperature)
    s = predict_probs(student.detached(), batch.features, cfg.temperature)
    g = backward(distill(t, s, cfg.loss_variant), teacher.params)
    return g.scale(-cfg.lr_student * (1.0 - cfg.alpha) * h), h


def meta_step(state: TrainState, batch, val_batch) -> TrainState:
    """Student SGD step, then teacher descends the student's post-step validation loss."""
    cfg = state.config
    t, s = state.teacher, state.student
    tv, sv = state.teacher_version, state.student_version
    s_new_params = sgd_step(s.params, _student_grad(s, t, batch, cfg), cfg.lr_student)
    gt, _ = meta_teacher_grad(t, s, s_new_params, batch, val_batch, cfg)
    ev = [("student", tv, sv), ("teacher", tv, sv + 1)]
    return state._updated(teacher=_sgd(t, gt, cfg.lr_teacher), student=s.with_params(s_new_params),
                          events=ev)


def _lgtm_teacher_update(t, s, batch, val_batch, cfg: DistillConfig, step: int):
    lookahead = lookahead_student(s, t, batch, cfg.alpha, cfg.lr_student, cfg.temperature, cfg.loss_variant)
    g_val = val_grad_at_lookahead(s, lookahead, val_batch)
    fda = fda_influence(t, s, lookahead, batch, val_batch, cfg.eps_rule, temperature=cfg.temperature,
                        variant=cfg.loss_variant, val_grad=g_val, clip=cfg.influence_clip)
    # ascend: raise the influence, i.e. descend the lookahead student's val loss
    g_inf = fda.grad.scale(-1.0) if cfg.influence_direction == "ascend" else fda.grad
    g_t = g_inf + _aux_grad(t, s, batch, cfg)
    records = ()
    if step % cfg.influence_every == 0:
        s_prob = predict_probs(s.detached(), batch.features, cfg.temperature).value
        s_true = s_prob[np.arange(len(batch)), batch.labels]
        records = tuple(
            InfluenceRecord(step, int(i), float(v), float(tp), float(sp))
            for i, v, tp, sp in zip(batch.ids, fda.influences, fda.teacher_true_prob, s_true)
        )
    return _sgd(t, g_t, cfg.lr_teacher), records


def lgtm_step(state: TrainState, batch, val_batch) -> TrainState:
    """One iteration of the LGTM loop.

    Teacher-first (default): lookahead student, validation gradient there,
    finite-difference influence gradient plus auxiliary loss for the teacher,
    then the original student steps against the *updated* teacher.
    """
    if len(val_batch) == 0:
        raise DataError("empty validation batch")
    cfg = state.config
    t, s = state.teacher, state.student
    tv, sv = state.teacher_version, state.student_version
    order = cfg.update_order
    if order == "teacher-first":
        t_new, records = _lgtm_teacher_update(t, s, batch, val_batch, cfg, state.step)
        s_new = _sgd(s, _student_grad(s, t_new, batch, cfg), cfg.lr_student)
        ev = [("teacher", tv, sv), ("student", tv + 1, sv)]
    elif order == "student-first":
        s_new = _sgd(s, _student_grad(s, t, batch, cfg), cfg.lr_student)
        t_new, records = _lgtm_teacher_update(t, s_new, batch, val_batch, cfg, state.step)
        ev = [("student", tv, sv), ("teacher", tv, sv + 1)]
    else:
        t_new, records = _lgtm_teacher_update(t, s, batch, val_batch, cfg, state.step)
        s_new = _sgd(s, _student_grad(s, t, batch, cfg), cfg.lr_student)
        ev = [("teacher", tv, sv), ("student", tv, sv)]
    return state._updated(teacher=t_new, student=s_new, events=ev, records=records)


STEP_FUNCS = {"vanilla": vanilla_step, "online": online_step, "meta": meta_step, "lgtm": lgtm_step}


# --------------------------------------------------------------------------
# experiment driver


def _seeds(seed: int):
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(5)]


def init_state(config: DistillConfig, train_data: Dataset) -> TrainState:
    """Build student and teacher for ``config``; fine-tunes the teacher if requested."""
    s_seed, t_seed, _, _, ft_seed = _seeds(config.seed)
    init = "zeros-head" if config.zeros_head else "seeded-he"
    s_spec = ClassifierSpec(train_data.dim, config.student_hidden, train_data.num_classes,
                            config.activation, init)
    student = build_classifier(s_spec, s_seed, "student")
    mode = config.resolved_teacher_init
    if mode == "same-as-student":
        teacher = build_classifier(replace(s_spec, init="copy-of"), 0, "teacher", copy_from=student)
    else:
        t_spec = ClassifierSpec(train_data.dim, config.teacher_hidden, train_data.num_classes,
                                config.activation, init)
        teacher = build_classifier(t_spec, t_seed, "teacher")
        if mode == "finetuned":
            teacher = finetune_teacher(teacher, train_data, config.finetune_epochs, config.finetune_lr,
                                       batch_size=config.batch_size, seed=ft_seed)
    return TrainState(0, teacher, student, config)


@dataclass
class RunSummary:
    config: DistillConfig
    final_state: TrainState
    student_val_accuracy: float
    teacher_val_accuracy: float
    val_loss_curve: list  # (step, student val loss)
    min_val_loss_step: int
    terminal_val_loss: float
    phase_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "trainer_kind": self.config.trainer_kind,
            "seed": self.config.seed,
            "steps": self.final_state.step,
            "student_val_accuracy": self.student_val_accuracy,
            "teacher_val_accuracy": self.teacher_val_accuracy,
            "min_val_loss_step": self.min_val_loss_step,
            "terminal_val_loss": self.terminal_val_loss,
        }


def run_experiment(config: DistillConfig, train_data: Dataset, val_data: Dataset, sinks=None,
                   state: Optional[TrainState] = None) -> RunSummary:
    """Train per ``config.trainer_kind`` and stream metrics/influence rows to ``sinks``.

    Metrics are evaluated on the full train and validation sets every
    ``log_every`` steps (and at step 0). Validation batches for teacher
    feedback come from a separately seeded stream.
    """
    config.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("train and validation data must be nonempty")
    sinks = sinks if sinks is not None else MemorySink()
    _, _, train_seed, val_seed, _ = _seeds(config.seed)
    t0 = time.perf_counter()
    state = state if state is not None else init_state(config, train_data)
    t_init = time.perf_counter() - t0

    step_fn = STEP_FUNCS[config.trainer_kind]
    needs_val = config.trainer_kind in ("meta", "lgtm")
    train_stream = BatchStream(train_data, config.batch_size, train_seed)
    val_stream = BatchStream(val_data, config.val_batch_size, val_seed)
    splits = {"train": train_data, "val": val_data}
    curve = []

    def log(st):
        for row in evaluate(st.step, st.teacher, st.student, splits, config.temperature):
            sinks.write_metrics(row)
            if row.split == "val" and row.model == "student":
                curve.append((st.step, row.loss))

    log(state)
    t1 = time.perf_counter()
    for _ in range(config.max_steps):
        batch = next(train_stream)
        state = step_fn(state, batch, next(val_stream)) if needs_val else step_fn(state, batch)
        for rec in state.records:
            sinks.write_influence(rec)
        if state.step % config.log_every == 0 and state.step != config.max_steps:
            log(state)
    if config.max_steps > 0:
        log(state)
    sinks.flush()
    t_train = time.perf_counter() - t1

    losses = [v for _, v in curve]
    i_min = int(np.argmin(losses))
    return RunSummary(
        config=config,
        final_state=state,
        student_val_accuracy=accuracy(state.student, val_data),
        teacher_val_accuracy=accuracy(state.teacher, val_data),
        val_loss_curve=curve,
        min_val_loss_step=curve[i_min][0],
        terminal_val_loss=losses[-1],
        phase_seconds={"init": t_init, "train": t_train},
    )


def make_datasets(config: DistillConfig):
    """Materialise (train, val) from ``config.data``."""
    from .data import FeatureStats, SplitSpec, load_csv_task, make_gaussian_task, split

    d = config.data
    seed = config.seed if d.data_seed is None else d.data_seed
    if d.source == "gaussian":
        train = make_gaussian_task(d.num_classes, d.dim, d.separation, d.label_noise, d.n_train,
                                   seed=seed * 2 + 11, means_seed=seed)
        if d.split_mode == "carve-from-train":
            return split(train, SplitSpec("carve-from-train", d.carve_fraction), seed)
        val = make_gaussian_task(d.num_classes, d.dim, d.separation, 0.0, d.n_val,
                                 seed=seed * 2 + 12, means_seed=seed, id_offset=d.n_train)
        return train, val
    train = load_csv_task(d.csv_path, d.label_column, num_classes=d.num_classes)
    if d.split_mode == "carve-from-train":
        return split(train, SplitSpec("carve-from-train", d.carve_fraction), seed)
    if not d.csv_val_path:
        raise ConfigError("data.csv_val_path: required for provided-val split", field="data.csv_val_path")
    val = load_csv_task(d.csv_val_path, d.label_column, stats=train.stats, num_classes=d.num_classes)
    val = replace(val, ids=val.ids + len(train))
    return train, val
