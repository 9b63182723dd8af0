"""Compiled kernels against the numpy fallback.

Times each hot kernel in both backends at training-sized shapes, then one
forward+backward pass of a HyperGRU batch under each backend (selected with
HYPERFORECAST_KERNELS in a subprocess, exactly as a user would).

    python benchmarks/bench_kernels.py [--batch 16] [--d_s 32] [--repeat 200]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hyperforecast import _kernels_py as pyk

try:
    from hyperforecast import _kernels as cyk
except ImportError:
    cyk = None

STEP_SNIPPET = """
import timeit, numpy as np
from hyperforecast import autodiff as ad, model as md, tensor as tn
from hyperforecast.train import batch_loss
cfg = md.ModelConfig(d_x=1, d_s={d_s}, d_h=16, T=64, k=8, T_x=8)
m = md.init_params(cfg, 0)
rng = np.random.default_rng(0)
x, xh = rng.normal(size=({b}, 8, 1)), rng.normal(size=({b}, 1, 64))
y, owner = rng.normal(size=({b}, 1)), np.arange({b})
def step():
    tape = ad.Tape()
    P = m.bind(tape)
    tape.backward(batch_loss(m, tape, P, x, xh, y, owner, "L2"))
step()
print(tn.BACKEND, min(timeit.repeat(step, number=1, repeat={r})))
"""


def kernel_cases(batch, d_s, rng):
    G = 3
    w = rng.normal(size=(batch, G * d_s, d_s))
    v = rng.normal(size=(batch, d_s))
    g = rng.normal(size=(batch, G * d_s))
    a, hb = rng.normal(size=(2, batch, G * d_s))
    s = rng.normal(size=(batch, d_s))
    pre = rng.normal(size=(batch, 4 * d_s))

    def gru_bwd(k):
        out = k.gru_gates_forward(a, hb, s)
        return lambda: k.gru_gates_backward(s, hb, s, *out[1:4])

    def lstm_bwd(k):
        out = k.lstm_gates_forward(pre, s)
        return lambda: k.lstm_gates_backward(s, s, s, *out[2:])

    return {
        "bmv": lambda k: (lambda: k.bmv(w, v)),
        "bmv_backward": lambda k: (lambda: k.bmv_backward(w, v, g)),
        "gru_gates_forward": lambda k: (lambda: k.gru_gates_forward(a, hb, s)),
        "gru_gates_backward": gru_bwd,
        "lstm_gates_forward": lambda k: (lambda: k.lstm_gates_forward(pre, s)),
        "lstm_gates_backward": lstm_bwd,
    }


def best_of(fn, repeat):
    number = 20
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--d_s", type=int, default=32)
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args(argv)
    if cyk is None:
        print("compiled kernels not built; run `python setup.py build_ext --inplace`")
        return 1
    rng = np.random.default_rng(0)
    print(f"kernel timings, batch={args.batch} d_s={args.d_s} (microseconds per call)")
    print(f"{'kernel':<22}{'cython':>10}{'python':>10}{'speedup':>9}")
    for name, make in kernel_cases(args.batch, args.d_s, rng).items():
        tc = best_of(make(cyk), args.repeat) * 1e6
        tp = best_of(make(pyk), args.repeat) * 1e6
        print(f"{name:<22}{tc:>10.1f}{tp:>10.1f}{tp / tc:>8.2f}x")
    print("\nHyperGRU forward+backward, one batch (milliseconds)")
    code = STEP_SNIPPET.format(d_s=args.d_s, b=args.batch, r=max(5, args.repeat // 5))
    times = {}
    for backend in ("cython", "python"):
        env = dict(os.environ, HYPERFORECAST_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        times[out[0]] = float(out[1]) * 1e3
        print(f"{out[0]:<22}{times[out[0]]:>10.2f}")
    if len(times) == 2:
        print(f"{'speedup':<22}{times['python'] / times['cython']:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
