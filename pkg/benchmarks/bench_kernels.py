"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 8] [--hw 64] [--channels 16]

Prints one row per kernel: best-of-N milliseconds for each backend and
the speedup of the compiled one. Outputs of both backends are compared
before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from fsgnet import _pykernels as py
from fsgnet.tensor import _bitrev, _twiddles

try:
    from fsgnet import _ckernels as cy
except ImportError:
    cy = None


def cases(n, c, hw):
    rng = np.random.default_rng(0)
    xp3 = rng.standard_normal((n, c, hw + 2, hw + 2)).astype(np.float32)
    xp5 = rng.standard_normal((n, c, hw + 4, hw + 4)).astype(np.float32)
    w3 = rng.standard_normal((c, 9)).astype(np.float32)
    w5 = rng.standard_normal((c, 25)).astype(np.float32)
    dy = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
    x = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
    cols = py.im2col(xp3, 3, 3, 2)
    _, arg = py.maxpool_forward(x, 2, 2)
    dyp = rng.standard_normal((n, c, hw // 2, hw // 2)).astype(np.float32)
    spec = (rng.standard_normal((n * c * hw, hw)) + 0j).astype(np.complex128)
    rev, tw = _bitrev(hw), _twiddles(hw, False)

    def fft(mod):
        def run():
            a = spec.copy()
            mod.fft_rows(a, rev, tw)
            return a
        return run

    return [
        ("im2col 3x3 s2", lambda m: lambda: m.im2col(xp3, 3, 3, 2)),
        ("col2im 3x3 s2", lambda m: lambda: m.col2im(cols, xp3.shape, 3, 3, 2)),
        ("depthwise fwd 3x3", lambda m: lambda: m.depthwise_forward(xp3, w3, 3)),
        ("depthwise fwd 5x5", lambda m: lambda: m.depthwise_forward(xp5, w5, 5)),
        ("depthwise bwd 5x5", lambda m: lambda: m.depthwise_backward(xp5, w5, dy, 5)),
        ("maxpool fwd 2x2", lambda m: lambda: m.maxpool_forward(x, 2, 2)),
        ("maxpool bwd 2x2", lambda m: lambda: m.maxpool_backward(dyp, arg, x.shape)),
        ("fft rows", fft),
    ]


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    # float32 reductions over ~30k terms differ in summation order
    return all(np.abs(u - v).max() <= 1e-5 * max(1.0, np.abs(u).max()) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--channels", type=int, default=16)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e .` first", file=sys.stderr)
        return 1
    print(f"shape ({args.batch}, {args.channels}, {args.hw}, {args.hw}), best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, make in cases(args.batch, args.channels, args.hw):
        fp, fc = make(py), make(cy)
        if not _same(fp(), fc()):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        tp = min(timeit.repeat(fp, number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(fc, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{tp:>10.3f}{tc:>11.3f}{tp / tc:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
