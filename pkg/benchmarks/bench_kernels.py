"""Time the compiled mask kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--size 256] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from dualseg import kernels


def blobs(rng, n, size):
    """Random binary masks made of a few overlapping discs."""
    yy, xx = np.mgrid[:size, :size]
    out = np.zeros((n, size, size), dtype=bool)
    for i in range(n):
        for _ in range(rng.integers(1, 5)):
            cy, cx = rng.integers(0, size, 2)
            r = rng.integers(size // 16, size // 4)
            out[i] |= (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    masks = blobs(rng, args.n, args.size)
    noisy = masks[0] ^ (rng.random(masks[0].shape) < 0.05)
    counts = kernels.rle_counts(masks[0])
    cases = {
        "rle_counts": lambda b: kernels.rle_counts(masks[0], backend=b),
        "rle_decode": lambda b: kernels.rle_decode(counts, args.size, args.size, backend=b),
        "label4 (noisy)": lambda b: kernels.label4(noisy, backend=b),
        f"iou {args.n}x{args.n}": lambda b: kernels.mask_iou_matrix(masks, masks, backend=b),
    }
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; mask {args.size}x{args.size}; best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases.items():
        ref = None
        times = []
        for b in backends:
            res = fn(b)
            arr = res[0] if isinstance(res, tuple) else res
            if ref is not None and not np.array_equal(ref, arr):
                raise SystemExit(f"{name}: backends disagree")
            ref = arr
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)))
        row = f"{name:<16}" + "".join(f"{1e3 * t:>12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
