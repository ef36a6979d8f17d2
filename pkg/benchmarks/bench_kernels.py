"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--skip-pipeline]

Prints per-kernel timings for both backends, then times one full
three-phase run (B=4, n=50) under each backend in a fresh process.
"""
import argparse
import os
import subprocess
import sys
import tempfile
import timeit

import numpy as np

from consistyle import kernels


def workloads(rng):
    x = rng.normal(size=(256, 32)).astype(np.float32)
    y = rng.normal(size=(300, 32)).astype(np.float32)
    feats = rng.normal(size=(120, 64)).astype(np.float32)
    cands = rng.normal(size=(140, 64)).astype(np.float32)
    logits = (rng.normal(size=(4, 256, 1024)) * 4).astype(np.float32)
    return {
        "channel_stats 256x32": lambda k: k.channel_stats(x),
        "adain 256x32 <- 300x32": lambda k: k.adain(x, y, 1e-5),
        "row_norms 120x64": lambda k: k.row_norms(feats),
        "cosine_argmax 120 vs 140, d=64": lambda k: k.cosine_argmax(
            feats, cands, k.row_norms(feats), k.row_norms(cands)),
        "softmax_rows 4x256x1024": lambda k: k.softmax_rows(logits),
    }


def bench_kernels(repeat):
    backends = kernels.available_backends()
    names = sorted(backends)
    print(f"{'kernel':34s}" + "".join(f"{n:>14s}" for n in names) + "   speedup")
    for label, fn in workloads(np.random.default_rng(0)).items():
        times = {}
        for name in names:
            mod = backends[name]
            fn(mod)
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:34s}" + "".join(f"{times[n] * 1e3:11.3f} ms" for n in names) + f"   {speed:6.2f}x")


RUN = """
import time, tempfile
from consistyle import kernels
from consistyle.config import RunConfig
from consistyle.pipeline import run_all
cfg = RunConfig(batch=4, steps=50).validate()
with tempfile.TemporaryDirectory() as d:
    t = time.perf_counter()
    run_all(cfg, d)
    print(kernels.BACKEND, round(time.perf_counter() - t, 3))
"""


def bench_pipeline():
    print("\nfull run, B=4, n=50, 16x16 latent:")
    for backend in sorted(kernels.available_backends()):
        env = dict(os.environ, CONSISTYLE_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", RUN], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  {out[0]:10s} {float(out[1]):7.3f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-pipeline", action="store_true")
    args = ap.parse_args()
    print(f"default backend: {kernels.BACKEND}\n")
    bench_kernels(args.repeat)
    if not args.skip_pipeline:
        bench_pipeline()


if __name__ == "__main__":
    main()
