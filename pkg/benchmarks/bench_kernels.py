"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Also times two end-to-end workloads (an OLS block-error sweep and a
brute-force enumeration) under each backend in a subprocess. Block cross
moments use numpy/BLAS under both backends and are not compared.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rollout import _backend

py = _backend.python_kernels


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(200, 60))
    cases = [
        ("twoway_residual 200x60", lambda k: k.twoway_residual(Y), 200),
        ("monotone_sequences N=20 T=6", lambda k: k.monotone_sequences(20, 6), 3),
    ]
    rows = []
    for name, call, number in cases:
        t_py = _best(lambda: call(py), repeat, number)
        if _backend.HAS_COMPILED:
            from rollout import _kernels

            t_c = _best(lambda: call(_kernels), repeat, number)
        else:
            t_c = float("nan")
        rows.append((name, t_py, t_c))
    return rows


_WORKLOAD = """
import time, numpy as np
from rollout import designgen as dg, objective as ob, _backend
from rollout.panel import SyntheticEffect
from rollout.tuner import minimax_error
rng = np.random.default_rng(0)
blocks = rng.normal(size=(500, 50, 7))
d = dg.optimal_design(50, 7, seed=0)
t = time.perf_counter()
for _ in range(20):
    minimax_error(d, blocks, SyntheticEffect.carryover([-0.007, -0.002, -0.001]))
sweep = (time.perf_counter() - t) / 20
t = time.perf_counter()
ob.brute_force_optimum(12, 6)
enum = time.perf_counter() - t
print(_backend.BACKEND, sweep, enum)
"""


def workload(backend):
    env = {**os.environ, "ROLLOUT_BACKEND": backend}
    out = subprocess.run([sys.executable, "-c", _WORKLOAD], env=env, capture_output=True, text=True, check=True)
    name, sweep, enum = out.stdout.split()
    return name, float(sweep), float(enum)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"active backend: {_backend.BACKEND}")
    print(f"{'kernel':40s} {'numpy (ms)':>12s} {'compiled (ms)':>14s} {'speedup':>8s}")
    for name, t_py, t_c in kernel_table(args.repeat):
        print(f"{name:40s} {1e3 * t_py:12.3f} {1e3 * t_c:14.3f} {t_py / t_c:8.2f}")

    print()
    print(f"{'workload':40s} {'backend':>12s} {'seconds':>14s}")
    for backend in ("python", "compiled"):
        name, sweep, enum = workload(backend)
        print(f"{'minimax sweep, 500 blocks, ell=2':40s} {name:>12s} {sweep:14.4f}")
        print(f"{'brute force N=12 T=6':40s} {name:>12s} {enum:14.4f}")


if __name__ == "__main__":
    main()
