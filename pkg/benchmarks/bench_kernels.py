"""Compare the numba kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--reps 30]

Times each hot kernel on training-sized inputs (batch 64, 24 tokens,
C=768, K=9, 4 heads) for both backends and prints the speedup. The first
numba call per kernel compiles; warmup happens before timing.
"""

import argparse
import time

import numpy as np

from t2vlad import _kernels_numpy


def _median_time(fn, args, reps):
    best = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best.append(time.perf_counter() - t0)
    best.sort()
    return best[len(best) // 2]


def build_cases(rng):
    b, m, c, k, h = 64, 24, 768, 9, 4
    hd = c // h
    tokens = rng.normal(size=(b * m, c))
    mask = (rng.random(b * m) > 0.1).astype(np.float64)
    centers = rng.normal(size=(k + 1, c))
    logits = tokens @ centers.T
    assign = np.exp(logits - logits.max(axis=1, keepdims=True))
    assign /= assign.sum(axis=1, keepdims=True)
    assign *= mask[:, None]
    assign3 = assign.reshape(b, m, k + 1)[:, :, :k].copy()
    tokens3 = tokens.reshape(b, m, c)
    scores = rng.normal(size=(b, h, m, m))
    kmask = (rng.random((b, m)) > 0.1).astype(np.float64)
    gain = rng.normal(size=c)
    bias = rng.normal(size=c)
    asum = assign3.sum(axis=1)
    graw = rng.normal(size=(b, k, c))
    return [
        ("softmax_fwd", (logits,)),
        ("rowmask_softmax_fwd", (logits, mask)),
        ("attn_softmax_fwd", (scores, kmask)),
        ("l2norm_fwd", (tokens, 1e-12)),
        ("maskedmax_fwd", (tokens3, kmask)),
        ("vlad_fwd", (tokens3, assign3, centers[:k])),
        ("vlad_bwd", (tokens3, assign3, centers[:k], asum, graw)),
        ("layernorm_fwd", (tokens, gain, bias, 1e-5)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=30)
    args = ap.parse_args()

    try:
        from t2vlad import _kernels_numba
    except ImportError:
        print("numba is not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    cases = build_cases(rng)

    print("%-22s %12s %12s %9s" % ("kernel", "numpy (ms)", "numba (ms)", "speedup"))
    for name, arrs in cases:
        np_fn = getattr(_kernels_numpy, name)
        nb_fn = getattr(_kernels_numba, name)
        nb_fn(*arrs)  # trigger compilation outside the timed region
        ref = np_fn(*arrs)
        got = nb_fn(*arrs)
        ref0 = ref[0] if isinstance(ref, tuple) else ref
        got0 = got[0] if isinstance(got, tuple) else got
        if not np.allclose(ref0, got0, atol=1e-10):
            raise AssertionError("backends disagree on %s" % name)
        t_np = _median_time(np_fn, arrs, args.reps)
        t_nb = _median_time(nb_fn, arrs, args.reps)
        print("%-22s %12.3f %12.3f %8.2fx" % (name, t_np * 1e3, t_nb * 1e3, t_np / t_nb))


if __name__ == "__main__":
    main()
