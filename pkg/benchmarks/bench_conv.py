"""Time the compiled and numpy 3D convolution kernels on backbone-sized layers.

    python3 benchmarks/bench_conv.py [--repeat 5] [--json out.json]

Each row reports the best-of-``repeat`` wall time of one call per kernel and
the speedup of the compiled backend. Outputs of the two backends are checked
for agreement before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from mtprog.nn import _conv_py

try:
    from mtprog.nn import _conv_ext
except ImportError:
    _conv_ext = None

# (name, batch, in_ch, out_ch, padded input extents, kernel, stride)
CASES = [
    ("stem 3x3x3", 8, 1, 8, (10, 34, 34), 3, 1),
    ("dense layer 3x3x3", 8, 12, 4, (6, 18, 18), 3, 1),
    ("transition 1x1x1", 8, 16, 8, (4, 16, 16), 1, 1),
    ("strided 3x3x3", 8, 8, 8, (10, 34, 34), 3, 2),
]


def make_case(batch, cin, cout, extents, k, stride, seed=0):
    rng = np.random.default_rng(seed)
    xp = rng.normal(size=(batch, cin) + extents)
    w = rng.normal(size=(cout, cin, k, k, k))
    out = _conv_py.conv3d_forward(xp, w, stride)
    g = rng.normal(size=out.shape)
    return xp, w, g


def kernel_calls(mod, xp, w, g, stride):
    return {
        "forward": lambda: mod.conv3d_forward(xp, w, stride),
        "backward_input": lambda: mod.conv3d_backward_input(g, w, xp.shape, stride),
        "backward_weight": lambda: mod.conv3d_backward_weight(g, xp, w.shape, stride),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat):
    rows = []
    for name, batch, cin, cout, extents, k, stride in CASES:
        xp, w, g = make_case(batch, cin, cout, extents, k, stride)
        ref = kernel_calls(_conv_py, xp, w, g, stride)
        fast = kernel_calls(_conv_ext, xp, w, g, stride) if _conv_ext else None
        for kernel, fn in ref.items():
            row = {"case": name, "kernel": kernel, "numpy_s": best_time(fn, repeat)}
            if fast:
                err = float(np.max(np.abs(fast[kernel]() - fn())))
                if err > 1e-9:
                    raise SystemExit(f"backends disagree on {name}/{kernel}: max abs diff {err:.3g}")
                row["cython_s"] = best_time(fast[kernel], repeat)
                row["speedup"] = row["numpy_s"] / row["cython_s"]
            rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    if _conv_ext is None:
        print("compiled extension not built; timing the numpy backend only", file=sys.stderr)
    rows = run(args.repeat)
    print(f"{'case':<20} {'kernel':<16} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for r in rows:
        cy = f"{r['cython_s'] * 1e3:10.2f}" if "cython_s" in r else f"{'-':>10}"
        sp = f"{r['speedup']:7.1f}x" if "speedup" in r else f"{'-':>8}"
        print(f"{r['case']:<20} {r['kernel']:<16} {r['numpy_s'] * 1e3:9.2f} {cy} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
