"""Compiled vs numpy periodic convolution: forward and backward timings.

    python3 benchmarks/bench_conv.py [--repeat 20]

Shapes follow the desk training workloads (1D: batch 8, N=32, 32 channels;
2D: batch 2, 32x32, 16 channels). Both backends are checked for agreement
before timing.
"""

import argparse
import timeit

import numpy as np

from spectral_hybrid import kernels

CASES = [
    ("1d k3 32ch", (8, 32, 32), (3, 32, 32), 1),
    ("1d k5 1->32", (8, 32, 1), (5, 1, 32), 1),
    ("1d k3 128ch N=256", (8, 256, 128), (3, 128, 128), 1),
    ("2d k3 16ch d2", (2, 32, 32, 16), (3, 3, 16, 16), 2),
    ("2d k3 64ch N=64", (2, 64, 64, 64), (3, 3, 64, 64), 1),
]


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    try:
        kernels.use_backend("ext")
    except RuntimeError:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'case':22s} {'fwd numpy':>11s} {'fwd ext':>9s} {'x':>6s} "
          f"{'bwd numpy':>11s} {'bwd ext':>9s} {'x':>6s}")
    for name, xs, ws, d in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        res = {}
        for backend in ("python", "ext"):
            kernels.use_backend(backend)
            y = kernels.conv_forward(x, w, d)
            gx, gw = kernels.conv_backward(x, w, y, d)
            res[backend] = (y, gx, gw,
                            _time(lambda: kernels.conv_forward(x, w, d), args.repeat),
                            _time(lambda: kernels.conv_backward(x, w, y, d), args.repeat))
        for a, b in zip(res["python"][:3], res["ext"][:3]):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-3)
        fp, fe = res["python"][3], res["ext"][3]
        bp, be = res["python"][4], res["ext"][4]
        print(f"{name:22s} {fp * 1e3:9.3f}ms {fe * 1e3:7.3f}ms {fp / fe:6.2f} "
              f"{bp * 1e3:9.3f}ms {be * 1e3:7.3f}ms {bp / be:6.2f}")


if __name__ == "__main__":
    main()
