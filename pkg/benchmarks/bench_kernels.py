"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--number 50]

Prints one row per kernel and problem size with the best per-call time of each
backend and the speedup of the compiled one.  Exits with status 1 if the
extension is not built.
"""
import argparse
import sys
import timeit

import numpy as np

from gridse import kernels
from gridse.grid import load_case
from gridse.measurement import FormStack, full_plan


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def quad_cases():
    for name in ("14bus", "118bus"):
        net = load_case(name).net
        stack = FormStack.build(net, full_plan(net))
        x = np.random.default_rng(0).uniform(-1.0, 1.0, stack.dim)
        args = (stack.ptr, stack.rows, stack.cols, stack.vals, x)
        label = f"{name} ({len(stack)} forms)"
        yield "quad_eval", label, args, kernels.py_quad_eval, kernels._ext.quad_eval
        yield "quad_jacobian", label, args, kernels.py_quad_jacobian, kernels._ext.quad_jacobian


def conv_cases():
    rng = np.random.default_rng(1)
    for batch, length, chans, filters in ((32, 122, 1, 32), (32, 122, 32, 32), (8, 490, 16, 16)):
        x = rng.standard_normal((batch, length, chans))
        w = rng.standard_normal((3, chans, filters))
        b = rng.standard_normal(filters)
        dy = rng.standard_normal((batch, length, filters))
        label = f"B={batch} L={length} C={chans} F={filters}"
        yield "conv1d_forward", label, (x, w, b), kernels.py_conv1d_forward, kernels._ext.conv1d_forward
        yield "conv1d_backward", label, (x, w, dy), kernels.py_conv1d_backward, kernels._ext.conv1d_backward


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--number", type=int, default=50)
    args = parser.parse_args(argv)
    if kernels._ext is None:
        print("compiled extension not available; build with `pip install -e .`", file=sys.stderr)
        return 1
    print(f"{'kernel':<16} {'case':<28} {'numpy [us]':>11} {'compiled [us]':>14} {'speedup':>8}")
    for cases in (quad_cases(), conv_cases()):
        for kernel, label, fargs, py_fn, ext_fn in cases:
            t_py = _best(lambda: py_fn(*fargs), args.repeat, args.number)
            t_ext = _best(lambda: ext_fn(*fargs), args.repeat, args.number)
            print(f"{kernel:<16} {label:<28} {t_py * 1e6:11.1f} {t_ext * 1e6:14.1f} {t_py / t_ext:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
