"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat N] [--steps N]

Part one times each kernel in-process at the shapes the toy model hits.
Part two times whole training steps in fresh interpreters, once per backend,
selected through TIT_DISABLE_NUMBA.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tit import _kernels as K

STEP_SNIPPET = """
import json, time
from tit import _kernels
from tit.data import SceneSpec
from tit.model import ModelConfig, TITModel
from tit.train import TrainConfig, train
m = TITModel(ModelConfig(), seed=0)
spec = SceneSpec(seed=0)
train(m, spec, TrainConfig(steps=4, lr=1e-3))          # warm-up, includes JIT
t0 = time.perf_counter()
train(m, spec, TrainConfig(steps={steps}, lr=1e-3))
print(json.dumps({{"backend": _kernels.BACKEND, "sec_per_step": (time.perf_counter() - t0) / {steps}}}))
"""


def cases(rng):
    x = rng.normal(size=(8, 34, 34, 16))      # padded 32x32 head input
    big = rng.normal(size=(8, 66, 66, 16))    # padded 64x64 head input
    col = rng.normal(size=(8, 64, 64, 9 * 16))
    fm = rng.normal(size=(8, 16, 16, 16))
    up = rng.normal(size=(8, 32, 32, 16))
    return {
        "im2col 32x32x16": ("im2col", (x, 3, 3, 32, 32)),
        "im2col 64x64x16": ("im2col", (big, 3, 3, 64, 64)),
        "col2im 64x64x16": ("col2im", (col, 3, 3, 16)),
        "bilinear x2 16->32": ("bilinear", (fm, 2)),
        "bilinear x8 2->16": ("bilinear", (rng.normal(size=(8, 2, 2, 16)), 8)),
        "bilinear_grad x2 32->16": ("bilinear_grad", (up, 2)),
    }


def bench_kernels(repeat):
    if K.NUMBA_KERNELS is None:
        print("numba path disabled in this interpreter; kernel table skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for label, (name, args) in cases(rng).items():
        fnp, fnb = K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]
        ref, got = fnp(*args), fnb(*args)        # also triggers compilation
        diff = float(np.abs(ref - got).max())
        tnp = min(timeit.repeat(lambda: fnp(*args), number=1, repeat=repeat)) * 1e3
        tnb = min(timeit.repeat(lambda: fnb(*args), number=1, repeat=repeat)) * 1e3
        print(f"{label:<26}{tnp:>10.2f}{tnb:>10.2f}{tnp / tnb:>8.1f}x  {diff:.1e}")


def bench_steps(steps):
    results = []
    for disable in ("0", "1"):
        env = dict(os.environ, TIT_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        results.append(json.loads(out.stdout.strip().splitlines()[-1]))
    print(f"\n{'training step (64x64, batch 8)':<32}{'sec/step':>10}")
    for r in results:
        print(f"{r['backend']:<32}{r['sec_per_step']:>10.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=12)
    args = ap.parse_args()
    print(f"active backend: {K.BACKEND}")
    bench_kernels(args.repeat)
    bench_steps(args.steps)


if __name__ == "__main__":
    main()
