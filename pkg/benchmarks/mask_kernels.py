#!/usr/bin/env python3
"""Compare the numba mask kernel against the pure-numpy fallback.

Run: python benchmarks/mask_kernels.py [--sizes 256,1024,2048] [--repeat 5]
The dispatch used by the library honors APAR_NO_NUMBA; this script always
times both paths explicitly.
"""

import argparse
import time

import numpy as np

from apar._kernels import HAVE_NUMBA, mask_fill_numpy
from apar.attention import _ancestor_matrix, linearize_script
from apar.sim import list_script


def build_case(target_tokens: int):
    items = max(1, (target_tokens - 9) // 39)
    script = list_script(items=items)
    sample, tree = linearize_script(script)
    dense, anc = _ancestor_matrix(tree)
    node_of = np.array(
        [dense[n] if n >= 0 else -1 for n in sample.node_of], dtype=np.int64
    )
    return node_of, anc, sample.prompt_len


def bench(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up; compiles on the numba path
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="256,1024,2048")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    print(f"{'n':>6} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>8}")
    for size in sizes:
        node_of, anc, plen = build_case(size)
        n = node_of.shape[0]
        t_np = bench(mask_fill_numpy, (node_of, anc, plen), args.repeat)
        if HAVE_NUMBA:
            from apar._kernels import mask_fill_numba

            t_nb = bench(mask_fill_numba, (node_of, anc, plen), args.repeat)
            out_np = mask_fill_numpy(node_of, anc, plen)
            out_nb = mask_fill_numba(node_of, anc, plen)
            assert np.array_equal(out_np, out_nb), "kernel outputs diverge"
            print(f"{n:>6} {t_np * 1e3:>12.3f} {t_nb * 1e3:>12.3f} {t_np / t_nb:>8.2f}")
        else:
            print(f"{n:>6} {t_np * 1e3:>12.3f} {'n/a':>12} {'n/a':>8}")


if __name__ == "__main__":
    main()
