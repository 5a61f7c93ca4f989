"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 256] [--classes 10] [--repeat 5]

Times each row-wise kernel on both backends, then a full LGTM step with the
active backend swapped. Also checks that both backends agree to 1e-12.
"""
import argparse
import timeit

import numpy as np

from distill_influence import kernels
from distill_influence.data import make_gaussian_task
from distill_influence.trainers import DistillConfig, init_state, lgtm_step

FLOOR = 1e-12


def kernel_cases(rows, classes, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(rows, classes))
    p = kernels.get_backend("python").softmax_rows(z)
    t = rng.dirichlet(np.ones(classes), size=rows)
    g = rng.normal(size=(rows, classes))
    gl = rng.normal(size=rows)
    return {
        "softmax_rows": lambda k: k.softmax_rows(z),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(p, g),
        "xent_rows": lambda k: k.xent_rows(t, p, FLOOR),
        "xent_rows_backward": lambda k: k.xent_rows_backward(t, p, FLOOR, gl),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def lgtm_setup(batch_size):
    cfg = DistillConfig(trainer_kind="lgtm", alpha=0.6, batch_size=batch_size, val_batch_size=batch_size,
                        teacher_init="fresh")
    data = make_gaussian_task(3, 10, 2.0, 0.0, 2 * batch_size, seed=0)
    state = init_state(cfg, data)
    half = np.arange(batch_size)
    return state, data.subset(half).as_batch(), data.subset(half + batch_size).as_batch()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=256)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)

    names = ["python"]
    try:
        kernels.get_backend("compiled")
        names.append("compiled")
    except ImportError:
        print("compiled kernels unavailable; timing the python backend only")
    backends = {n: kernels.get_backend(n) for n in names}

    print(f"kernels on {args.rows}x{args.classes} (seconds per call, best of {args.repeat})")
    print(f"{'kernel':<24}" + "".join(f"{n:>14}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for name, call in kernel_cases(args.rows, args.classes).items():
        outs = [call(backends[n]) for n in names]
        if len(outs) == 2 and not np.allclose(outs[0], outs[1], rtol=0, atol=1e-12):
            raise SystemExit(f"backends disagree on {name}")
        times = [best_of(lambda n=n: call(backends[n]), args.repeat, args.number) for n in names]
        line = f"{name:<24}" + "".join(f"{t:>14.3e}" for t in times)
        if len(times) == 2:
            line += f"   {times[0] / times[1]:>6.2f}x"
        print(line)

    state, batch, val = lgtm_setup(32)
    saved = kernels._active
    print("\nlgtm_step, batch 32 (seconds per step)")
    try:
        for n in names:
            kernels._active = backends[n]
            t = best_of(lambda: lgtm_step(state, batch, val), args.repeat, 10)
            print(f"{n:<24}{t:>14.3e}")
    finally:
        kernels._active = saved


if __name__ == "__main__":
    main()
