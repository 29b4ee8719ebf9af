"""Compare the compiled kernel extension against the pure-numpy fallback.

Times each hot kernel on transformer-shaped inputs in both backends,
checks that the outputs agree, and prints per-call latency plus the
speedup ratio.  Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats N] [--number N]
"""

import argparse
import sys
import timeit

import numpy as np

from tcrlab.kernels import numpy_backend

try:
    from tcrlab import _ckernels
except ImportError:
    _ckernels = None


def make_cases(rng):
    """(name, arg-builder) pairs; each builder returns fresh arrays so the
    in-place AdamW kernel cannot leak state between backends."""
    r, c = 8192, 16          # attention rows for batch 64 x seq 13, padded
    h = 64                   # model width
    f = 256                  # feed-forward width
    n = 1_114_765            # parameter count of the largest stock model

    def softmax_args():
        scores = rng.standard_normal((r, c)).astype(np.float32)
        mask = (rng.random((r, c)) < 0.9).astype(np.uint8)
        mask[:, 0] = 1
        return (scores, mask)

    def softmax_bwd_args():
        probs = numpy_backend.masked_softmax_fwd(*softmax_args())
        grad = rng.standard_normal(probs.shape).astype(np.float32)
        return (probs, grad)

    def layernorm_args():
        x = rng.standard_normal((r, h)).astype(np.float32)
        gain = rng.standard_normal(h).astype(np.float32)
        bias = rng.standard_normal(h).astype(np.float32)
        return (x, gain, bias, np.float32(1e-5))

    def layernorm_bwd_args():
        x, gain, bias, eps = layernorm_args()
        _, mu, rstd = numpy_backend.layernorm_fwd(x, gain, bias, eps)
        grad = rng.standard_normal(x.shape).astype(np.float32)
        return (x, mu, rstd, gain, grad)

    def gelu_args():
        return (rng.standard_normal((r, f)).astype(np.float32),)

    def gelu_bwd_args():
        x = rng.standard_normal((r, f)).astype(np.float32)
        return (x, rng.standard_normal((r, f)).astype(np.float32))

    def adamw_args():
        return (rng.standard_normal(n).astype(np.float32),
                rng.standard_normal(n).astype(np.float32),
                np.zeros(n, dtype=np.float32),
                np.zeros(n, dtype=np.float32),
                1e-3, 0.9, 0.999, 1e-8, 0.01, 1)

    return [
        ("masked_softmax_fwd", softmax_args),
        ("softmax_bwd", softmax_bwd_args),
        ("layernorm_fwd", layernorm_args),
        ("layernorm_bwd", layernorm_bwd_args),
        ("gelu_fwd", gelu_args),
        ("gelu_bwd", gelu_bwd_args),
        ("adamw_update", adamw_args),
    ]


def check_agreement(name, build):
    """Max elementwise difference between backends on one fresh input."""
    args_np = build()
    args_cy = tuple(a.copy() if isinstance(a, np.ndarray) else a
                    for a in args_np)
    out_np = getattr(numpy_backend, name)(*args_np)
    out_cy = getattr(_ckernels, name)(*args_cy)
    pieces = []
    if out_np is not None:
        pieces.extend(zip(np.atleast_1d(out_np) if isinstance(out_np, np.ndarray)
                          else out_np,
                          np.atleast_1d(out_cy) if isinstance(out_cy, np.ndarray)
                          else out_cy))
    # in-place kernels report through their mutated buffers
    pieces.extend((a, b) for a, b in zip(args_np, args_cy)
                  if isinstance(a, np.ndarray))
    return max(float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                                   - np.asarray(b, dtype=np.float64))))
               for a, b in pieces)


def time_call(fn, args, repeats, number):
    timer = timeit.Timer(lambda: fn(*args))
    return min(timer.repeat(repeat=repeats, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions; the minimum is reported")
    parser.add_argument("--number", type=int, default=20,
                        help="kernel calls per repetition")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not importable; nothing to compare")
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'numpy':>12} {'cython':>12} {'speedup':>9} "
          f"{'max |diff|':>11}")
    for name, build in make_cases(rng):
        diff = check_agreement(name, build)
        call_args = build()
        t_np = time_call(getattr(numpy_backend, name), call_args,
                         args.repeats, args.number)
        call_args = build()
        t_cy = time_call(getattr(_ckernels, name), call_args,
                         args.repeats, args.number)
        print(f"{name:<20} {t_np * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us "
              f"{t_np / t_cy:>8.2f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
