"""Time every kernel under both backends on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call (JIT compile or cache load) is excluded. Outputs of
the two backends are also compared for bit equality.
"""

import argparse
import time

import numpy as np

from dwic import _kernels as K


def cases(rng):
    x = rng.standard_normal((8, 6, 66, 66)).astype(np.float32)
    cols = K.im2col_numpy(x, 7, 2, 0)
    h = rng.standard_normal((8, 8, 30, 30)).astype(np.float32)
    pooled, arg = K.maxpool_forward_numpy(h, 3, 2, 0)
    X = rng.standard_normal((48, 90))
    y = (rng.random(48) < 0.4).astype(np.float64)
    return {
        "im2col stem 8x6x66x66 k7 s2": ("im2col", (x, 7, 2, 0)),
        "col2im stem": ("col2im", (cols, x.shape, 7, 2, 0)),
        "maxpool fwd 8x8x30x30 k3 s2": ("maxpool_forward", (h, 3, 2, 0)),
        "maxpool bwd": ("maxpool_backward", (np.ones_like(pooled), arg, h.shape, 3, 2, 0)),
        "best_split 48x90": ("best_split", (X, y, 1)),
        "pair_counts 400x600": ("pair_counts", (rng.random(400), rng.random(600))),
    }


def timed(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  equal")
    for label, (name, a) in cases(np.random.default_rng(0)).items():
        K.get(name, "numba")(*a)  # compile / load cache
        t_np, out_np = timed(K.get(name, "numpy"), a, args.repeat)
        t_nb, out_nb = timed(K.get(name, "numba"), a, args.repeat)
        print(f"{label:32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x  {same(out_np, out_nb)}")


if __name__ == "__main__":
    main()
