"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Numba variants are compiled once before timing.
"""

import argparse
import timeit

import numpy as np

from scaleloss import kernels
from scaleloss._accel import HAVE_NUMBA


def cases(rng):
    n = 20_000
    gt = np.column_stack([rng.uniform(0, 500, (n, 2)), rng.uniform(2, 80, (n, 2))])
    pred = gt + rng.normal(0, 3, gt.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    a = gt[:300]
    b = pred[:2000]
    ious = rng.uniform(0, 1, (300, 100))  # dets x gts
    gt_ign = rng.uniform(size=100) < 0.1
    det_ign = rng.uniform(size=300) < 0.1
    thr = np.linspace(0.5, 0.95, 10)
    planes = rng.normal(size=(2, 80, 80))
    kern = rng.normal(size=(2, 7, 7))
    return {
        "paired_iou_grad": (gt, pred),
        "pairwise_iou": (a, b),
        "greedy_match": (ious, gt_ign, det_ign, thr),
        "conv2d_same": (planes, kern),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is timed")
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, inputs in cases(np.random.default_rng(args.seed)).items():
        fn_np = getattr(kernels, f"_np_{name}")
        t_np = min(timeit.repeat(lambda: fn_np(*inputs), number=1, repeat=args.repeat)) * 1e3
        if HAVE_NUMBA:
            fn_nb = getattr(kernels, f"_nb_{name}")
            fn_nb(*inputs)
            t_nb = min(timeit.repeat(lambda: fn_nb(*inputs), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<18}{t_np:>12.2f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
