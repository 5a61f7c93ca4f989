"""Accuracy, entropy gap, influence cohort statistics and the metric sinks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DataError
from .influence import InfluenceRecord
from .losses import ce_hard, entropy
from .models import Classifier, predict_probs

METRICS_HEADER = ("step", "split", "model", "loss", "accuracy", "entropy_gap")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    split: str
    model: str
    loss: float
    accuracy: float
    entropy_gap: Optional[float] = None

    def cells(self):
        gap = "" if self.entropy_gap is None else repr(float(self.entropy_gap))
        return [str(self.step), self.split, self.model, repr(float(self.loss)),
                repr(float(self.accuracy)), gap]


def _frozen_probs(model: Classifier, dataset, temperature=1.0) -> np.ndarray:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    return predict_probs(model.detached(), dataset.features, temperature).value


def accuracy(model: Classifier, dataset) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs = _frozen_probs(model, dataset)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def dataset_loss(model: Classifier, dataset) -> float:
    return ce_hard(dataset.labels, predict_probs(model.detached(), dataset.features)).item()


def entropy_gap(teacher: Classifier, student: Classifier, dataset, temperature: float = 1.0,
                absolute: bool = False) -> float:
    """Mean over rows of H(student) - H(teacher), in nats."""
    gap = entropy(_frozen_probs(student, dataset, temperature)) - entropy(
        _frozen_probs(teacher, dataset, temperature))
    return float(np.mean(np.abs(gap) if absolute else gap))


def evaluate(step: int, teacher: Classifier, student: Classifier, splits: dict,
             temperature: float = 1.0) -> list[MetricsRow]:
    """Metric rows for both models on every named split; the gap rides on student rows."""
    rows = []
    for split_name, ds in splits.items():
        gap = entropy_gap(teacher, student, ds, temperature)
        for name, model in (("teacher", teacher), ("student", student)):
            rows.append(MetricsRow(step, split_name, name, dataset_loss(model, ds), accuracy(model, ds),
                                   gap if name == "student" else None))
    return rows


def influence_cohort_stats(records: Iterable[InfluenceRecord], noise_ids=None,
                           quantiles=(0.1, 0.5, 0.9)) -> dict:
    """Per-step mean and quantiles of influence, split into clean/noisy cohorts.

    ``noise_ids`` is the set of sample ids with corrupted labels (or a Dataset,
    whose ``noise_mask`` is used). Without it every record is "all".
    """
    records = list(records)
    if not records:
        raise DataError("no influence records")
    if noise_ids is not None and hasattr(noise_ids, "noise_mask"):
        ds = noise_ids
        noise_ids = set() if ds.noise_mask is None else set(ds.ids[ds.noise_mask].tolist())
    steps = np.array([r.step for r in records])
    vals = np.array([r.influence for r in records])
    if noise_ids is None:
        cohorts = {"all": np.ones(len(records), dtype=bool)}
    else:
        noisy = np.array([r.sample_id in noise_ids for r in records])
        cohorts = {"all": np.ones(len(records), dtype=bool), "clean": ~noisy, "noisy": noisy}
    out = {}
    for name, mask in cohorts.items():
        per_step = {}
        for s in np.unique(steps[mask]):
            v = vals[mask & (steps == s)]
            per_step[int(s)] = {"mean": float(v.mean()), "n": int(v.size),
                                **{f"q{q:g}": float(np.quantile(v, q)) for q in quantiles}}
        out[name] = per_step
    return out


def cohort_window_mean(records: Iterable[InfluenceRecord], noise_ids, lo: int, hi: int) -> dict:
    """Mean influence of clean and noisy records with ``lo <= step < hi``."""
    clean, noisy = [], []
    for r in records:
        if lo <= r.step < hi:
            (noisy if r.sample_id in noise_ids else clean).append(r.influence)
    return {"clean": float(np.mean(clean)) if clean else float("nan"),
            "noisy": float(np.mean(noisy)) if noisy else float("nan"),
            "n_clean": len(clean), "n_noisy": len(noisy)}


# --------------------------------------------------------------------------
# sinks


class MemorySink:
    """Keeps every metrics row and influence record in lists."""

    def __init__(self):
        self.metrics: list[MetricsRow] = []
        self.influence: list[InfluenceRecord] = []

    def write_metrics(self, row: MetricsRow):
        self.metrics.append(row)

    def write_influence(self, record: InfluenceRecord):
        self.influence.append(record)

    def flush(self):
        pass

    def close(self):
        pass


class FileSink:
    """Metrics CSV plus influence JSONL, flushed every ``flush_every`` rows.

    The CSV starts with a ``# dataset_fingerprint=...`` comment line when a
    fingerprint is given, then the fixed header.
    """

    def __init__(self, metrics_path, influence_path, *, flush_every: int = 100,
                 fingerprint: Optional[str] = None):
        self._m = open(metrics_path, "w", newline="", encoding="utf-8")
        self._i = open(influence_path, "w", encoding="utf-8")
        self._w = csv.writer(self._m, lineterminator="\n")
        if fingerprint:
            self._m.write(f"# dataset_fingerprint={fingerprint}\n")
        self._w.writerow(METRICS_HEADER)
        self.flush_every = max(1, int(flush_every))
        self._pending = 0

    def _tick(self):
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def write_metrics(self, row: MetricsRow):
        self._w.writerow(row.cells())
        self._tick()

    def write_influence(self, record: InfluenceRecord):
        self._i.write(record.to_json() + "\n")
        self._tick()

    def flush(self):
        self._m.flush()
        self._i.flush()
        self._pending = 0

    def close(self):
        self.flush()
        self._m.close()
        self._i.close()


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(io.StringIO("".join(lines))):
        gap = rec["entropy_gap"]
        out.append(MetricsRow(int(rec["step"]), rec["split"], rec["model"], float(rec["loss"]),
                              float(rec["accuracy"]), float(gap) if gap else None))
    return out
