"""Command-line entry point: ``run``, ``verify`` and ``sweep``.

Exit codes: 0 success, 1 runtime or check failure, 2 configuration error.
The default output directory comes from ``DISTILL_INFLUENCE_OUT_DIR`` (else
``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DistillError
from .metrics import FileSink
from .models import save_checkpoint
from .trainers import (
    _seeds,
    config_from_dict,
    make_datasets,
    read_config_file,
    run_experiment,
)

OUT_DIR_ENV = "DISTILL_INFLUENCE_OUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SWEEP_KEYS = ("alpha", "update_order", "teacher_init", "trainer_kind", "seed")
SUMMARY_FIELDS = ("student_val_accuracy", "teacher_val_accuracy", "terminal_val_loss", "min_val_loss_step")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV) or "runs")


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# run


def execute_run(raw: dict, out: Path, source: Optional[str] = None) -> dict:
    """Validate ``raw``, train, and write every artifact into ``out``.

    Raises ConfigError before touching ``out`` if the config is invalid.
    Returns the run summary dict.
    """
    cfg = config_from_dict(raw)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train, val = make_datasets(cfg)
    t_data = time.perf_counter() - t0
    artifacts = {k: f"{k}.{ext}" for k, ext in
                 (("metrics", "csv"), ("influence", "jsonl"), ("teacher", "ckpt"), ("student", "ckpt"))}
    fp = train.fingerprint()
    manifest = {
        "version": __version__,
        "status": "running",
        "config_source": source,
        "config": cfg.to_dict(),
        "dataset_fingerprint": {"train": fp, "val": val.fingerprint()},
        "seeds": dict(zip(("student", "teacher", "train_stream", "val_stream", "finetune"), _seeds(cfg.seed))),
        "artifacts": artifacts,
        "phase_seconds": {"data": t_data},
    }
    _write_json(out / "manifest.json", manifest)

    sink = FileSink(out / artifacts["metrics"], out / artifacts["influence"],
                    flush_every=cfg.flush_every, fingerprint=fp)
    try:
        summary = run_experiment(cfg, train, val, sink)
    except BaseException:
        manifest["status"] = "failed"
        _write_json(out / "manifest.json", manifest)
        raise
    finally:
        sink.close()
    t1 = time.perf_counter()
    st = summary.final_state
    save_checkpoint(out / artifacts["teacher"], st.teacher, seed=cfg.seed, step=st.step)
    save_checkpoint(out / artifacts["student"], st.student, seed=cfg.seed, step=st.step)
    result = summary.to_dict()
    manifest.update(status="complete", summary=result,
                    phase_seconds={"data": t_data, **summary.phase_seconds,
                                   "checkpoints": time.perf_counter() - t1})
    _write_json(out / "manifest.json", manifest)
    return result


def cmd_run(args) -> int:
    out = Path(args.out) if args.out else default_out_dir()
    try:
        raw = read_config_file(args.config)
        result = execute_run(raw, out, str(args.config))
    except ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_CONFIG
    except (DistillError, OSError, FloatingPointError) as exc:
        _err(f"run failed: {exc}")
        return EXIT_FAIL
    print(json.dumps(result, sort_keys=True))
    print(f"artifacts written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import format_table, run_battery

    t0 = time.perf_counter()
    checks = run_battery(args.scale, eps_value=args.eps)
    print(format_table(checks))
    failed = [c.name for c in checks if c.gating and not c.passed]
    print(f"\n{len(checks) - len(failed)}/{len(checks)} checks ok in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


def read_grid(path) -> dict:
    grid = read_config_file(path)
    if not grid:
        raise ConfigError(f"{path}: sweep grid is empty")
    unknown = sorted(set(grid) - set(SWEEP_KEYS))
    if unknown:
        raise ConfigError(f"{path}: cannot sweep over {unknown}; allowed keys are {list(SWEEP_KEYS)}",
                          field=unknown[0])
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"{path}: grid entry {k!r} must be a nonempty list", field=k)
    return grid


def _cell_name(index: int, cell: dict) -> str:
    parts = [f"{k}={v}" for k, v in cell.items()]
    return f"cell{index:03d}_" + "_".join(parts)


def _run_cell(job):
    raw, out, source = job
    try:
        return "ok", execute_run(raw, Path(out), source), ""
    except DistillError as exc:
        return "failed", {}, str(exc)


def _aggregate(rows: list[dict], keys: list[str]) -> list[dict]:
    group_keys = [k for k in keys if k != "seed"]
    groups: dict = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    out = []
    for gk, members in groups.items():
        row = dict(zip(group_keys, gk), n_seeds=len(members))
        for f in SUMMARY_FIELDS:
            vals = np.array([float(m[f]) for m in members])
            row[f"{f}_mean"] = repr(float(vals.mean()))
            row[f"{f}_std"] = repr(float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        out.append(row)
    return out


def _write_csv(path: Path, rows: list[dict], header: list[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_sweep(args) -> int:
    out = Path(args.out) if args.out else default_out_dir()
    if args.jobs < 1:
        _err("--jobs must be at least 1")
        return EXIT_CONFIG
    try:
        base = read_config_file(args.config)
        grid = read_grid(args.grid)
        keys = list(grid)
        cells = [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]
        for cell in cells:  # surface every config error before any training
            config_from_dict({**base, **cell})
    except ConfigError as exc:
        _err(f"invalid sweep: {exc}")
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    jobs = [({**base, **cell}, str(out / _cell_name(i, cell)), str(args.config)) for i, cell in enumerate(cells)]
    if args.jobs == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))

    rows = []
    for (_, cell_out, _), cell, (status, summary, message) in zip(jobs, cells, results):
        rows.append({**cell, "out_dir": Path(cell_out).name, "status": status,
                     **{f: summary.get(f, "") for f in SUMMARY_FIELDS}, "error": message})
    _write_csv(out / "summary.csv", rows, keys + ["out_dir", "status", *SUMMARY_FIELDS, "error"])
    agg = _aggregate(rows, keys)
    agg_header = [k for k in keys if k != "seed"] + ["n_seeds"] + [
        f"{f}_{s}" for f in SUMMARY_FIELDS for s in ("mean", "std")]
    _write_csv(out / "aggregate.csv", agg, agg_header)

    for r in agg:
        label = ", ".join(f"{k}={r[k]}" for k in keys if k != "seed") or "all"
        acc_m, acc_s = float(r["student_val_accuracy_mean"]), float(r["student_val_accuracy_std"])
        print(f"{label}: student val acc {acc_m:.4f} ± {acc_s:.4f} (n={r['n_seeds']})")
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok; summary in {out / 'summary.csv'}")
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill-influence", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration and write its artifacts")
    r.add_argument("--config", required=True, type=Path, help="TOML or JSON config file")
    r.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the oracle check battery")
    v.add_argument("--scale", choices=("small", "full"), default="small")
    v.add_argument("--eps", type=float, default=0.01,
                   help="epsilon scale for the finite-difference checks (default 0.01)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="Cartesian sweep over config keys")
    s.add_argument("--config", required=True, type=Path, help="base TOML or JSON config")
    s.add_argument("--grid", required=True, type=Path, help="TOML or JSON mapping of key -> list of values")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
