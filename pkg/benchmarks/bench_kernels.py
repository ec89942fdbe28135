"""Compare the compiled and pure-numpy im2col/col2im backends.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--json]

Times each kernel on MoNet-like layer shapes, then a full MoNet forward pass
at 256x256 with each backend swapped in. Results print as one JSON line per
measurement when ``--json`` is given, otherwise as a small table.
"""
import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from segkit import kernels, nn
from segkit.arch import ArchSpec, build
from segkit.tensor import Prng

# (channels, size, dilation, stride) drawn from the MoNet encoder
SHAPES = [
    (16, 256, 1, 1),
    (16, 256, 4, 1),
    (16, 256, 1, 2),
    (32, 128, 2, 1),
    (64, 64, 3, 1),
]


def _best(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(repeats):
    rng = Prng(0)
    rows = []
    for c, size, d, s in SHAPES:
        x = rng.random((1, c, size, size)).astype(np.float32)
        oh, pt, _ = nn.same_padding(size, 3, s, d)
        ow, pl, _ = nn.same_padding(size, 3, s, d)
        for name in kernels.available_backends():
            be = kernels.get_backend(name)
            cols = be.im2col(x, 3, s, d, pt, pl, oh, ow)
            t_fwd = _best(lambda: be.im2col(x, 3, s, d, pt, pl, oh, ow), repeats)
            t_bwd = _best(lambda: be.col2im(cols, c, size, size, 3, s, d, pt, pl, oh, ow),
                          repeats)
            rows.append({"shape": f"c{c} {size}px d{d} s{s}", "backend": name,
                         "im2col_ms": round(t_fwd * 1e3, 3),
                         "col2im_ms": round(t_bwd * 1e3, 3)})
    return rows


def forward_rows(repeats, slices=3):
    net = build(ArchSpec.monet(), Prng(0)).eval()
    x = Prng(1).random((slices, 1, 256, 256)).astype(np.float32)
    rows = []
    saved = kernels.BACKEND
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)

            def run():
                for i in range(slices):
                    net.predict(x[i:i + 1])

            rows.append({"shape": f"monet forward x{slices}", "backend": name,
                         "seconds": round(_best(run, repeats), 4)})
    finally:
        kernels.set_backend(saved)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    with threadpool_limits(limits=1):
        rows = kernel_rows(args.repeats) + forward_rows(max(1, args.repeats // 2))
    if args.json:
        for r in rows:
            print(json.dumps(r))
        return
    print(f"available backends: {', '.join(kernels.available_backends())}")
    for r in rows:
        timing = (f"im2col {r['im2col_ms']:9.3f} ms  col2im {r['col2im_ms']:9.3f} ms"
                  if "im2col_ms" in r else f"total {r['seconds']:.4f} s")
        print(f"{r['shape']:<24}{r['backend']:<10}{timing}")


if __name__ == "__main__":
    main()
