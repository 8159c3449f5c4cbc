"""Compare the compiled and numpy kernel backends on the conv shapes the models use.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also checks that both backends agree on every benchmarked call: bitwise for
scatter/gather outputs, to a few f32 ulps for the kernel-gradient reduction,
whose summation order differs between backends.
"""

import argparse
import time

import numpy as np

from dhvt.numerics import kernels
from dhvt.numerics import _kernels_py

# (batch, channels, padded H, padded W, kernel, stride) -> im2col output size follows
CASES = [
    ("sope stage, 32x32 in", 16, 3, 34, 34, 3, 2),
    ("sope stage, 16x16 in", 16, 96, 18, 18, 3, 2),
    ("daff dwconv, 8x8 grid", 16, 768, 10, 10, 3, 1),
    ("daff dwconv, 16x16 grid", 16, 768, 18, 18, 3, 1),
]


def _time(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def run(repeat: int) -> None:
    if kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'case':<26} {'kernel':<10} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, b, c, hp, wp, k, s in CASES:
        xp = rng.standard_normal((b, c, hp, wp)).astype(np.float32)
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        w = rng.standard_normal((c, 1, k, k)).astype(np.float32)
        g = rng.standard_normal((b, c, ho, wo)).astype(np.float32)
        cols = _kernels_py.im2col(xp, k, k, s, ho, wo)
        calls = {
            "im2col": lambda m: m.im2col(xp, k, k, s, ho, wo),
            "col2im": lambda m: m.col2im(cols, c, hp, wp, k, k, s, ho, wo),
            "dw fwd": lambda m: m.dwconv_forward(xp, w, s, ho, wo),
            "dw bwd": lambda m: m.dwconv_backward(g, xp, w, s),
        }
        for kname, call in calls.items():
            a, bb = call(_kernels_py), call(kernels.compiled)
            for u, v in zip(a if isinstance(a, tuple) else (a,), bb if isinstance(bb, tuple) else (bb,)):
                exact = u.shape != w.shape
                if exact and not np.array_equal(u, v) or not np.allclose(u, v, rtol=0, atol=1e-5 * np.abs(u).max()):
                    raise SystemExit(f"{name} {kname}: backends disagree")
            tp = _time(lambda: call(_kernels_py), repeat)
            tc = _time(lambda: call(kernels.compiled), repeat)
            print(f"{name:<26} {kname:<10} {tp * 1e3:>10.3f} {tc * 1e3:>12.3f} {tp / tc:>7.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    run(ap.parse_args().repeat)
