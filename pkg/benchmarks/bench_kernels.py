"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--no-step]

Kernel timings import both backends directly. The train-step timing runs each
backend in a subprocess because the backend is chosen once, at import, from
DMQCA_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dmqca.kernels import _numba, _numpy

# shapes met in a desk-scale forward/backward pass: first view stage, a middle one, keyframe block 0
CASES = [
    ("conv3d 1->8 4x66x66 s(1,2,2)", (1, 6, 66, 66), (8, 1, 3, 3, 3), (1, 2, 2), (1, 1, 1)),
    ("conv3d 16->32 4x18x18 s(1,2,2)", (16, 6, 18, 18), (32, 16, 3, 3, 3), (1, 2, 2), (1, 1, 1)),
    ("conv2d 8->8 66x66", (8, 1, 66, 66), (8, 8, 1, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("conv2d 16->16 dil 4 24x24", (16, 1, 24, 24), (16, 16, 1, 3, 3), (1, 1, 1), (1, 4, 4)),
]

STEP_SNIPPET = """
import time
from dmqca.gradcheck import toy_batch
from dmqca.kernels import BACKEND
from dmqca.model import DMQCA, Adam, train_step
import numpy as np
m = DMQCA(seed=0)
batch = toy_batch(m, np.random.default_rng(0), 4)
opt = Adam(m.params.values())
train_step(m, batch, opt, 1e-4, 1e-6)
t = time.perf_counter()
for _ in range({n}):
    train_step(m, batch, opt, 1e-4, 1e-6)
print(BACKEND, (time.perf_counter() - t) / {n})
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, xs, ks, st, dil in CASES:
        x, k = rng.normal(size=xs), rng.normal(size=ks)
        y = _numpy.conv_forward(x, k, st, dil)
        dy = rng.normal(size=y.shape)
        assert np.array_equal(y, _numba.conv_forward(x, k, st, dil))
        for part, call in (
            ("fwd", lambda m: m.conv_forward(x, k, st, dil)),
            ("dx", lambda m: m.conv_grad_input(dy, k, st, dil, xs)),
            ("dk", lambda m: m.conv_grad_weight(dy, x, ks, st, dil)),
        ):
            rows.append((f"{label} {part}", best_of(lambda: call(_numpy), repeat), best_of(lambda: call(_numba), repeat)))
    a, b = rng.normal(size=(16, 64, 64)), rng.normal(size=(16, 64, 64))
    rows.append(("matmul 16x64x64", best_of(lambda: _numpy.matmul(a, b), repeat), best_of(lambda: _numba.matmul(a, b), repeat)))
    return rows


def step_time(disable, n):
    env = dict(os.environ, DMQCA_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    return float(out[1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args()
    print(f"{'kernel':44s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, tn, tb in kernel_rows(args.repeat):
        print(f"{label:44s} {1e3 * tn:10.2f} {1e3 * tb:10.2f} {tn / tb:8.1f}")
    if not args.no_step:
        tn, tb = step_time(True, args.steps), step_time(False, args.steps)
        print(f"{'train step, desk model, batch 4':44s} {1e3 * tn:10.1f} {1e3 * tb:10.1f} {tn / tb:8.1f}")


if __name__ == "__main__":
    main()
