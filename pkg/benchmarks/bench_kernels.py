#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Times im2col/col2im on the stage shapes the model actually runs, one full
conv2d forward+backward, and a desk-preset training step with each backend.
Run after `pip install -e .` so the extension is built:

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from conmatformer.kernels import _pykernels

try:
    from conmatformer.kernels import _ckernels
    BACKENDS = {"numpy": _pykernels, "cython": _ckernels}
except ImportError:
    print("compiled kernels unavailable; benchmarking the numpy backend only")
    BACKENDS = {"numpy": _pykernels}


def timeit(fn, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_lowering():
    # (name, B, C, H(padded), kernel, stride) spanning the real stage shapes
    cases = [
        ("stem 4x4/s4 224", 1, 3, 224, 4, 4),
        ("dw 7x7 stage1", 4, 96, 62, 7, 1),
        ("dw 7x7 stage3", 4, 384, 20, 7, 1),
        ("desk dw 7x7", 16, 24, 22, 7, 1),
    ]
    print(f"{'case':22s} {'backend':8s} {'im2col ms':>10s} {'col2im ms':>10s}")
    for name, b, c, hp, k, stride in cases:
        xp = np.random.default_rng(0).normal(size=(b, c, hp, hp)).astype(np.float32)
        for backend, impl in BACKENDS.items():
            cols = impl.im2col(xp, k, k, stride)
            t_fwd = timeit(lambda: impl.im2col(xp, k, k, stride))
            t_bwd = timeit(lambda: impl.col2im(cols, c, hp, hp, k, k, stride))
            print(f"{name:22s} {backend:8s} {t_fwd * 1e3:10.2f} {t_bwd * 1e3:10.2f}")


def bench_conv_step():
    import conmatformer.kernels as selector
    from conmatformer.data import write_synthetic_blobs, load_dataset
    from conmatformer.model import build_model, model_presets
    from conmatformer.train import TrainConfig, train
    from conmatformer.data import DatasetSplit
    import tempfile

    print(f"\nselected backend for the model step: {selector.backend_name()}")
    with tempfile.TemporaryDirectory() as tmp:
        write_synthetic_blobs(tmp, per_class=4, size=64, seed=0)
        samples = load_dataset(tmp)
        for s in samples:
            s.split = "train"
        cfg = model_presets()["desk"]
        model = build_model(cfg, rng=np.random.default_rng(0))
        tc = TrainConfig(epochs=1, batch_size=16, lr=1e-3, seed=0)
        t0 = time.perf_counter()
        train(model, DatasetSplit(train=samples, val=[], test=[]), tc)
        print(f"desk-preset epoch over {len(samples)} samples: "
              f"{time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    bench_lowering()
    bench_conv_step()
