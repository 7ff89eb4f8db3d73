"""Benchmark the numba kernels against the pure-numpy fallback.

The two backends implement the same prefix-stable forward kernels; this
script times them side by side on the shapes the streaming encoder actually
runs (growing audio prefixes) plus the raw kernel microbenchmarks.

Run:  python benchmarks/bench_kernels.py [--repeats N]

Backend selection inside one process is fixed at import, so this script
re-executes itself in a subprocess per backend with DYSTREAM_NUMBA set.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _time(fn, repeats: int) -> float:
    fn()  # warm (and JIT-compile on the numba backend)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def run_backend(repeats: int) -> dict[str, float]:
    import numpy as np

    from dystream import kernels
    from dystream.encoder import AudioEncoder, EncoderConfig
    from dystream.tensor import RngState

    rng = RngState(0)
    results: dict[str, float] = {"_backend_check": 0.0}

    x = rng.normal((256, 64))
    w = rng.normal((64, 256))
    b = rng.normal(256)
    results["linear_rows[256x64 -> 256]"] = _time(lambda: kernels.linear_rows(x, w, b), repeats)

    pos = np.arange(256, dtype=np.float64)
    inv = 10000.0 ** (-2.0 * np.arange(32) / 64)
    results["rope_rows[256x64]"] = _time(lambda: kernels.rope_rows(x, pos, inv), repeats)

    results["layer_norm_rows[256x64]"] = _time(lambda: kernels.layer_norm_rows(x, 1e-5), repeats)

    q = rng.normal((4, 256, 16))
    allowed = np.tri(256, dtype=np.bool_)
    results["attention_rows[4h x 256 causal]"] = _time(
        lambda: kernels.attention_rows(q, q, q, allowed, 0.25), repeats
    )

    enc = AudioEncoder.init(EncoderConfig(lookahead=2), RngState(1))
    for frames in (64, 256, 512):
        audio = rng.normal((frames, 8))
        results[f"encode[{frames} frames]"] = _time(
            lambda a=audio: enc.encode(a), max(1, repeats // 4)
        )
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--_worker", choices=["numba", "numpy"], default=None)
    args = parser.parse_args()

    if args._worker:
        results = run_backend(args.repeats)
        from dystream import kernels

        results["_backend_check"] = 1.0 if kernels.backend_name() == args._worker else -1.0
        print(json.dumps(results))
        return 0

    timings: dict[str, dict[str, float]] = {}
    for backend, flag in (("numba", "1"), ("numpy", "0")):
        env = dict(os.environ, DYSTREAM_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--repeats", str(args.repeats), "--_worker", backend],
            capture_output=True,
            text=True,
            env=env,
        )
        if proc.returncode != 0:
            print(f"{backend} backend failed:\n{proc.stderr}", file=sys.stderr)
            return 1
        timings[backend] = json.loads(proc.stdout.splitlines()[-1])
        if timings[backend].pop("_backend_check") != 1.0:
            print(f"{backend} backend was not active in the worker", file=sys.stderr)
            return 1

    width = max(len(k) for k in timings["numba"])
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for key in timings["numba"]:
        nb = timings["numba"][key]
        np_ = timings["numpy"][key]
        print(f"{key:<{width}}  {nb * 1e3:>8.3f}ms  {np_ * 1e3:>8.3f}ms  {np_ / nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
