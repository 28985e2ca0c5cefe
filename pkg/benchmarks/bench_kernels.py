"""Compare the compiled and numpy kernel backends.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on inputs of the size met in a default run (17x17
solid grid, 96x64 fluid grid, 4 subsamples) and the best of ``repeat``
wall times is reported together with the maximum output difference.
"""

import argparse
import timeit

import numpy as np

from varistep.geometry import ContainerBox, ReferenceGrid, element_quads, jet_arrays
from varistep.kernels import backends


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    grid = ReferenceGrid(17, 17)
    X = grid.identity() + 0.01 * rng.standard_normal((17, 17, 2))
    X = grid.apply_gamma(X)
    jets = jet_arrays(grid, X)
    quads = np.ascontiguousarray(element_quads(grid, X))
    box = ContainerBox()
    sub = 4
    ds = box.hx / sub
    fx = np.linspace(0.9, 2.1, 4000)
    fy = np.linspace(0.4, 1.6, 4000)
    return {
        "cell_density": (np.ascontiguousarray(jets.F), np.ascontiguousarray(jets.G),
                         1.0, 1.0, 5.0, 4.0, 0.125, 1.0, 0.25),
        "raster_coverage": (quads, 0.0, 0.0, ds, box.nx * sub, box.ny * sub),
        "bilinear_weights": (fx, fy, 0.0, 0.0, box.hx, box.hy, box.nx + 1, box.ny + 1),
        "invert_bilinear": (quads, np.stack([fx[:1000], fy[:1000]], axis=1)),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    fin = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[fin] - b[fin]), initial=0.0))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    bk = backends()
    if "compiled" not in bk:
        print("compiled backend not built; only the numpy backend is available")
    inputs = _inputs()
    print(f"{'kernel':18s} {'python [ms]':>12s} {'compiled [ms]':>14s} "
          f"{'speedup':>8s} {'max diff':>10s}")
    for name, arg in inputs.items():
        times = {}
        outs = {}
        for label, mod in bk.items():
            fn = getattr(mod, name)
            outs[label] = fn(*arg)
            n = 1 if label == "python" and name == "invert_bilinear" else 3
            times[label] = min(timeit.repeat(lambda: fn(*arg), number=n,
                                             repeat=args.repeat)) / n * 1e3
        if "compiled" in bk:
            diff = _max_diff(outs["python"], outs["compiled"])
            print(f"{name:18s} {times['python']:12.3f} {times['compiled']:14.3f} "
                  f"{times['python'] / times['compiled']:8.1f} {diff:10.2e}")
        else:
            print(f"{name:18s} {times['python']:12.3f} {'-':>14s} {'-':>8s} {'-':>10s}")


if __name__ == "__main__":
    main()
