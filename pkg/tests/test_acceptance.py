"""Acceptance criteria, each at its stated tolerance and time budget.

Every test prints one ``[PASS]``/``[FAIL]`` line (visible even under output
capture) before asserting. Run alone with::

    pytest tests/test_acceptance.py -v
"""
import time

import pytest

from distill_influence import cli, verify


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
    assert ok, detail


def test_c1_autodiff_soundness(capsys):
    c = verify.check_gradients(range(100), tol=1e-5, h=1e-5)
    ok = c.passed and c.seconds < 10
    report(capsys, 1, "autodiff vs central differences", ok, f"{c.detail}; {c.seconds:.1f}s (budget 10s)")


def test_c2_influence_first_order_law(capsys):
    c = verify.check_first_order(200, 3.0, 5.0, 0.95)
    ok = c.passed and c.seconds < 30
    report(capsys, 2, "influence first-order law", ok, f"{c.detail}; {c.seconds:.1f}s (budget 30s)")


def test_c3_fda_fidelity(capsys):
    fid = verify.check_fda_vs_fixed_weight(range(20), 0.01)
    calls = verify.check_fda_calls()
    secs = fid.seconds + calls.seconds
    ok = fid.passed and calls.passed and secs < 60
    report(capsys, 3, "FDA vs fixed-weight influence oracle", ok,
           f"{fid.detail}; calls: {calls.detail}; {secs:.1f}s (budget 60s)")


def test_c4_fda_speedup(capsys):
    c = verify.check_fda_speedup(batch_size=64, calls=10, min_speedup=5.0)
    report(capsys, 4, "FDA speedup", c.passed, c.detail)


def test_c5_meta_scalar_consistency(capsys):
    c = verify.check_h_consistency(range(20), tol=1e-10)
    report(capsys, 5, "meta scalar h consistency", c.passed, c.detail)


def test_c6_hand_traced_step(capsys):
    c = verify.check_hand_trace(tol=1e-8)
    report(capsys, 6, "LGTM step vs hand trace", c.passed, c.detail)


@pytest.fixture(scope="module")
def battery():
    t0 = time.perf_counter()
    results = verify.run_trainer_battery(seeds=range(5), max_steps=1500)
    return results, time.perf_counter() - t0


@pytest.mark.slow
def test_c7_end_to_end_ordering(capsys, battery):
    results, secs = battery
    c = verify.check_ordering(results, range(5))
    report(capsys, 7, "end-to-end ordering", c.passed and secs < 300, f"{c.detail}; {secs:.0f}s (budget 300s)")


@pytest.mark.slow
def test_c8_noisy_cohort(capsys, battery):
    results, _ = battery
    c = verify.check_cohorts(results, range(5), max_steps=1500, quorum=4)
    report(capsys, 8, "noisy cohort influence", c.passed, c.detail)


def test_c9_run_determinism(capsys, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('trainer_kind = "lgtm"\nalpha = 0.6\nmax_steps = 60\nseed = 5\nlog_every = 10\n')
    codes = [cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a, b = ((tmp_path / d / "metrics.csv").read_bytes() for d in ("a", "b"))
    ok = codes == [0, 0] and a == b
    report(capsys, 9, "run determinism", ok, f"exit codes {codes}; metrics CSV {len(a)} bytes, identical={a == b}")
