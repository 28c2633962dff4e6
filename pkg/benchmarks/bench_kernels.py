"""Compare the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py            # kernels only
    python benchmarks/bench_kernels.py --train    # plus one training epoch per path

Shapes match what the model actually feeds the kernels: a handful of rows of
width d_model for softmax / layer norm, short token sequences for LCS.
"""
import argparse
import time
import timeit

import numpy as np

from ocrcap import kernels


def _cases(rng):
    x = rng.normal(size=(10, 64))
    g = rng.normal(size=(10, 64))
    y = kernels._np_softmax_rows(x)
    gamma, beta = np.ones(64), np.zeros(64)
    _, xhat, rstd = kernels._np_layer_norm(x, gamma, beta, 1e-5)
    a = rng.integers(0, 12, 14).astype(np.int64)
    b = rng.integers(0, 12, 12).astype(np.int64)
    w, idx = rng.random(3), np.array([0, 2, 0])
    return {
        "softmax_rows": ((x,), {}),
        "softmax_rows_backward": ((y, g), {}),
        "layer_norm": ((x, gamma, beta, 1e-5), {}),
        "layer_norm_backward": ((g, xhat, rstd, gamma), {}),
        "lcs_length": ((a, b), {}),
        "scatter_add": ((w, idx, 40), {}),
    }


def bench_kernels(number):
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (args, _) in _cases(rng).items():
        np_fn = getattr(kernels, "_np_" + name)
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=number, repeat=3)) / number
        if kernels.HAVE_NUMBA:
            nb_fn = getattr(kernels, "_nb_" + name)
            nb_fn(*args)  # compile
            t_nb = min(timeit.repeat(lambda: nb_fn(*args), number=number, repeat=3)) / number
            print(f"{name:24s} {t_np * 1e6:10.2f} {t_nb * 1e6:10.2f} {t_np / t_nb:8.2f}")
        else:
            print(f"{name:24s} {t_np * 1e6:10.2f} {'n/a':>10s}")


def bench_epoch(rounds=2):
    from ocrcap import features as F
    from ocrcap import training as TR
    from ocrcap.vocab import build_fixed_vocab, clean_ocr_tokens, extend_with_ocr

    cfg = F.SynthConfig(n_images=64)
    b, r = F.synth_generate(cfg, 0)
    base = build_fixed_vocab([c for x in r for c in x.captions], 1, restrict_to=cfg.fixed_vocab_words)
    ext = extend_with_ocr(base, [clean_ocr_tokens(x.ocr_tokens) for x in b], 1)
    paths = [False, True] if kernels.HAVE_NUMBA else [False]
    best = {p: float("inf") for p in paths}
    prev = kernels.use_numba(paths[-1])
    try:
        TR.train(b[:4], r[:4], ext, TR.preset_config("synthetic", "pointer", epochs=1))  # compile
        # interleave the paths so drift in machine load hits both equally
        for _ in range(rounds):
            for p in paths:
                kernels.use_numba(p)
                t = time.perf_counter()
                TR.train(b, r, ext, TR.preset_config("synthetic", "pointer", epochs=1))
                best[p] = min(best[p], time.perf_counter() - t)
    finally:
        kernels.use_numba(prev)
    for p, t in best.items():
        print(f"one epoch, 64 images, {'numba' if p else 'numpy'} path: {t:.2f} s")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--number", type=int, default=20000)
    ap.add_argument("--train", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    bench_kernels(args.number)
    if args.train:
        bench_epoch()
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
