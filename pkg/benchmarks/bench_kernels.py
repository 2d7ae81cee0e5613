"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --e2e      # also a short training run under each backend

Kernel timings call both implementations in one process. The end-to-end
comparison launches fresh interpreters with FEDLT_NUMBA=1 and FEDLT_NUMBA=0.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedlt import _accel

E2E_SNIPPET = """
import time
from fedlt import backend
from fedlt.config import benchmark_config
from fedlt.federation import run_experiment
cfg = benchmark_config(0, rounds=1, local_epochs=1)
run_experiment(cfg)  # warm caches and compilation
t = time.perf_counter()
run_experiment(benchmark_config(0, rounds={rounds}))
print(backend(), time.perf_counter() - t)
"""


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n in (32, 256, 4096):
        z = rng.normal(size=(n, 10)) * 5
        logp = _accel.numpy_kernels["log_softmax_rows"](z)
        g = rng.normal(size=(n, 10))
        feats = rng.normal(size=(n, 32))
        labels = rng.integers(0, 10, n)
        protos = rng.normal(size=(10, 32))
        cases = {
            "log_softmax_rows": ((z,), _accel.log_softmax_rows),
            "log_softmax_rows_backward": ((logp, g), _accel.log_softmax_rows_backward),
            "batch_effective_counts": ((feats, labels, protos, 10), _accel.batch_effective_counts),
        }
        for name, (args, fast) in cases.items():
            slow = _accel.numpy_kernels[name]
            fast(*args)  # compile outside the timed region
            ref, out = slow(*args), fast(*args)
            ref, out = (ref if isinstance(ref, tuple) else (ref,)), (out if isinstance(out, tuple) else (out,))
            agree = all(np.allclose(a, b, rtol=1e-12, atol=1e-14) for a, b in zip(ref, out))
            t_np = _best(lambda: slow(*args), repeat)
            t_fast = _best(lambda: fast(*args), repeat)
            rows.append((name, n, t_np * 1e6, t_fast * 1e6, t_np / t_fast, agree))
    return rows


def e2e(rounds):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, FEDLT_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(rounds=rounds)], env=env,
                             capture_output=True, text=True, check=True)
        name, seconds = res.stdout.split()
        out[name] = float(seconds)
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--e2e", action="store_true")
    parser.add_argument("--rounds", type=int, default=3)
    args = parser.parse_args()

    print(f"active backend: {_accel.backend()}")
    print(f"{'kernel':28s} {'rows':>5s} {'numpy us':>10s} {'active us':>10s} {'speedup':>8s} agree")
    for name, n, t_np, t_fast, ratio, agree in kernel_table(args.repeat):
        print(f"{name:28s} {n:5d} {t_np:10.1f} {t_fast:10.1f} {ratio:8.2f} {agree}")
    if args.e2e:
        for name, seconds in e2e(args.rounds).items():
            print(f"end-to-end {args.rounds} benchmark rounds with {name}: {seconds:.2f}s")


if __name__ == "__main__":
    main()
