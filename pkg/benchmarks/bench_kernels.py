"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Both backends are imported directly, so the MFCL_PURE_PYTHON switch is not
needed. Outputs are compared bitwise before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from mfcl.engine import _fallback

try:
    from mfcl.engine import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    # shapes typical of the small conv classifier and the generator
    conv = rng.normal(size=(32, 8, 16, 16))
    k, pad = 3, 1
    cols = _fallback.im2col(conv, k, pad)
    up = rng.normal(size=(64, 16, 8, 8))
    dup = rng.normal(size=(64, 16, 16, 16))
    return {
        "im2col 32x8x16x16 k3": lambda m: m.im2col(conv, k, pad),
        "col2im 32x8x16x16 k3": lambda m: m.col2im(cols, conv.shape, k, pad),
        "upsample2x 64x16x8x8": lambda m: m.upsample2x(up),
        "upsample2x_backward 64x16x16x16": lambda m: m.upsample2x_backward(dup),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; reinstall with Cython available", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':<34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        a, b = fn(_fallback), fn(_kernels)
        if a.shape != b.shape or a.tobytes() != b.tobytes():
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "python_ms": t_py, "compiled_ms": t_c, "speedup": t_py / t_c})
        print(f"{name:<34s} {t_py:>10.3f} {t_c:>12.3f} {t_py / t_c:>7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
