"""Compare the compiled byte kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--sizes 64 1024 65536] [--repeat 5]
"""
import argparse
import os
import random
import timeit

from labgate import kernels
from labgate._purekernels import find_any as py_find, sum_mod256 as py_sum, xor_all as py_xor


def bench(fn, args, number: int, repeat: int) -> float:
    """Best time per call in microseconds."""
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number * 1e6


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 240, 4096, 65536])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    if kernels.compiled is None:
        raise SystemExit("compiled kernels not available (build the extension or unset LABGATE_PURE)")
    rng = random.Random(args.seed)
    c = kernels.compiled
    print(f"{'kernel':<10} {'bytes':>7} {'pure us':>10} {'compiled us':>12} {'speedup':>8}")
    for size in args.sizes:
        # no control bytes except one near the end, so find_any scans almost everything
        data = bytearray(rng.randrange(32, 127) for _ in range(size))
        if size:
            data[-1] = 0x03
        data = bytes(data)
        number = max(1, 200_000 // max(size, 1))
        for name, pure_fn, fast_fn, extra in (
            ("xor", py_xor, c.xor_all, ()),
            ("sum", py_sum, c.sum_mod256, ()),
            ("find_any", py_find, c.find_any, (b"\x02\x03\x04\x05", 0)),
        ):
            assert pure_fn(data, *extra) == fast_fn(data, *extra)
            t_pure = bench(pure_fn, (data, *extra), number, args.repeat)
            t_fast = bench(fast_fn, (data, *extra), number, args.repeat)
            print(f"{name:<10} {size:>7} {t_pure:>10.2f} {t_fast:>12.2f} {t_pure / t_fast:>7.1f}x")
    print(f"\nimport-time selection: {kernels.IMPLEMENTATION}"
          f"{' (LABGATE_PURE set)' if os.environ.get('LABGATE_PURE') else ''}")


if __name__ == "__main__":
    main()
