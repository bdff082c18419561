"""Time the numba and numpy kernels on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from nawasr import kernels
from nawasr.loss import extend_target


def log_softmax(x):
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def cases(rng):
    # CTC sizes: 0.6 s utterance -> 74 frames with an 8-symbol target; 2 s -> 249 frames
    for T, U in ((74, 8), (249, 24)):
        lp = log_softmax(rng.normal(size=(T, 10)))
        ext = extend_target(rng.integers(1, 10, size=U))
        yield f"ctc T={T} U={U}", kernels.ctc_alpha_beta_numba, kernels.ctc_alpha_beta_numpy, (lp, ext)
    for n in (12, 200):
        a = rng.integers(0, 4, size=n).astype(np.int64)
        b = rng.integers(0, 4, size=n + 3).astype(np.int64)
        yield f"levenshtein n={n}", kernels.levenshtein_numba, kernels.levenshtein_numpy, (a, b)


def best_of(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if kernels.ctc_alpha_beta_numba is None:
        raise SystemExit("numba backend disabled (NAWASR_NUMBA=0 or numba missing)")
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'numba (us)':>12}{'numpy (us)':>12}{'speedup':>9}")
    for name, fast, slow, inputs in cases(rng):
        fast(*inputs)  # compile outside the timed region
        t_fast = best_of(fast, inputs, args.repeat)
        t_slow = best_of(slow, inputs, args.repeat)
        print(f"{name:<22}{1e6 * t_fast:>12.1f}{1e6 * t_slow:>12.1f}{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
