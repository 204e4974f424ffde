"""Time the compiled and numpy convolution backends on the same inputs.

    python3 benchmarks/compare_backends.py [--quick]

Prints forward, input-gradient and weight-gradient timings per backend and
checks that forward outputs and input gradients are bit-identical.
"""

import argparse
import statistics
import time

import numpy as np

from ispforge import _backend, ops, zoo, bench
from ispforge.trainer import _conv_backward


def timed(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1000


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="smaller shapes, fewer repetitions")
    args = ap.parse_args()
    reps = 2 if args.quick else 5
    rng = np.random.default_rng(0)
    cases = [
        ("conv3x3 12->12, 1x12x272x480" if args.quick else "conv3x3 12->12, 1x12x544x960",
         (1, 12, 272, 480) if args.quick else (1, 12, 544, 960), 12, 3),
        ("conv5x5 12->12, 1x12x128x128", (1, 12, 128, 128), 12, 5),
        ("conv3x3 12->12, 32x12x32x32 (training batch)", (32, 12, 32, 32), 12, 3),
    ]
    backends = _backend.available()
    print(f"backends: {', '.join(backends)}")
    for label, shape, cout, k in cases:
        x = rng.random(shape, dtype=np.float32)
        spec = ops.ConvSpec(rng.standard_normal((cout, shape[1], k, k)).astype(np.float32) * 0.1,
                            np.zeros(cout, np.float32))
        go = rng.standard_normal((shape[0], cout) + shape[2:]).astype(np.float32)
        results = {}
        print(f"\n{label}")
        for name in backends:
            with _backend.use_backend(name):
                fwd = timed(lambda: ops.conv2d(x, spec), reps)
                bwd = timed(lambda: _conv_backward(spec, x, go), reps)
                results[name] = (ops.conv2d(x, spec), _conv_backward(spec, x, go)[0])
            print(f"  {name:<9} forward {fwd:9.2f} ms   backward (input+weight) {bwd:9.2f} ms")
        if len(results) == 2:
            (fa, ga), (fb, gb) = results.values()
            print(f"  forward bit-identical: {np.array_equal(fa, fb)}; input grad bit-identical: {np.array_equal(ga, gb)}")

    m = zoo.build_smallnet12(seed=0)
    shape = (1, 4, 272, 480) if args.quick else (1, 4, 544, 960)
    print(f"\nsmallnet12 on {shape}")
    for name in backends:
        with _backend.use_backend(name):
            r = bench.bench(m, bench.BenchConfig(1, reps, shape=shape))
        print(f"  {name:<9} median {r.median_ms:9.2f} ms")


if __name__ == "__main__":
    main()
