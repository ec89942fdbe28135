"""CPU inference latency for a full scan.

One warm-up pass is discarded, then each repeat times a forward pass over
every slice of a random volume, one slice per batch, in inference mode.
BLAS threads are pinned (``SEGKIT_THREADS``, default 1) for the duration.
"""
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from segkit import kernels
from segkit.arch import ArchSpec, build
from segkit.tensor import Prng, rand_uniform


def thread_count(threads=None):
    if threads is not None:
        return int(threads)
    return int(os.environ.get("SEGKIT_THREADS", "1"))


def time_scan(net, volume, batch=1):
    t0 = time.perf_counter()
    for i in range(0, volume.shape[0], batch):
        net.predict(volume[i:i + batch])
    return time.perf_counter() - t0


def bench(arch, slices=150, size=256, repeats=5, warmup=1, seed=0, threads=None, batch=1):
    spec = arch if isinstance(arch, ArchSpec) else ArchSpec.from_name(arch)
    spec = spec.with_(input_size=size)
    net = build(spec, Prng(seed)).eval()
    volume = rand_uniform(Prng(seed).fork(1), (slices, spec.in_channels, size, size), 0.0, 1.0)
    threads = thread_count(threads)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            time_scan(net, volume, batch)
        samples = [time_scan(net, volume, batch) for _ in range(repeats)]
    arr = np.asarray(samples)
    return {
        "arch": spec.name,
        "slices": slices,
        "size": size,
        "batch": batch,
        "repeats": repeats,
        "threads": threads,
        "backend": kernels.BACKEND,
        "samples": [round(s, 6) for s in samples],
        "mean": float(arr.mean()),
        "std": float(arr.std()),
    }
