"""Time the compiled and numpy kernel backends on the default tower's layers.

Usage: python benchmarks/bench_kernels.py [--batch 64] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from xspec import _kernels

# (channels in, channels out, spatial size) for a 40x40 patch through the default blocks
LAYERS = [(1, 16, 40), (16, 16, 40), (16, 32, 20), (32, 32, 20), (32, 64, 10)]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {name: _kernels.get_backend(name) for name in _kernels.available_backends()}
    nt = _kernels.num_threads()
    print(f"backends: {', '.join(backends)}; batch {args.batch}; threads {nt}")
    print(f"{'layer':<16}{'op':<10}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    totals = {b: 0.0 for b in backends}
    for cin, cout, size in LAYERS:
        x = rng.standard_normal((args.batch, cin, size, size))
        w = rng.standard_normal((cout, cin, 3, 3))
        b = rng.standard_normal(cout)
        gy = rng.standard_normal((args.batch, cout, size, size))
        for op in ("forward", "backward"):
            times = {}
            for name, k in backends.items():
                if op == "forward":
                    times[name] = bench(lambda: k.conv3x3_forward(x, w, b, num_threads=nt), args.repeat)
                else:
                    times[name] = bench(lambda: k.conv3x3_backward(x, w, gy, num_threads=nt), args.repeat)
                totals[name] += times[name]
            speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
            label = f"{cin}->{cout}@{size}"
            print(f"{label:<16}{op:<10}" + "".join(f"{times[n] * 1e3:>10.1f}ms" for n in backends)
                  + f"{speed:>9.2f}x")
    x = rng.standard_normal((args.batch, 16, 40, 40))
    for name, k in backends.items():
        totals[name] += bench(lambda: k.maxpool2_forward(x, num_threads=nt), args.repeat)
    speed = totals["python"] / totals["compiled"] if "compiled" in totals else float("nan")
    print(f"{'total':<26}" + "".join(f"{totals[n] * 1e3:>10.1f}ms" for n in backends) + f"{speed:>9.2f}x")


if __name__ == "__main__":
    main()
