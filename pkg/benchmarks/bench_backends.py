#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the numpy fallback.

Times the individual layer kernels at the reference-model shapes, one
full DP-SGD step per strategy, and a short private fine-tuning run.

Usage: python benchmarks/bench_backends.py [--steps N]
"""

import argparse
import time

import numpy as np

from dpfine import backend, finetune, harness, nn, optim


def timeit(fn, repeat=30):
    fn()
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best * 1000.0


def kernel_cases(rng, batch=128):
    k = backend.kernels()
    cases = {}

    x1 = rng.standard_normal((batch, 1, 8, 8))
    w1 = rng.standard_normal((8, 1, 3, 3))
    x2 = rng.standard_normal((batch, 8, 8, 8))
    w2 = rng.standard_normal((16, 8, 3, 3))
    dy2 = rng.standard_normal((batch, 16, 8, 8))
    cases["conv 1->8 fwd"] = lambda: k.conv2d_forward(x1, w1, np.zeros(8), 1, 1)
    cases["conv 8->16 fwd"] = lambda: k.conv2d_forward(x2, w2, np.zeros(16), 1, 1)
    cases["conv 8->16 bwd"] = lambda: k.conv2d_backward(x2, w2, dy2, 1, 1, True, True, 2)
    cases["conv 8->16 bwd dx-only"] = lambda: k.conv2d_backward(
        x2, w2, dy2, 1, 1, True, False, 2
    )

    xf = rng.standard_normal((batch, 256))
    wf = rng.standard_normal((48, 256))
    dyf = rng.standard_normal((batch, 48))
    cases["dense 256->48 fwd"] = lambda: k.dense_forward(xf, wf, np.zeros(48))
    cases["dense 256->48 bwd"] = lambda: k.dense_backward(xf, wf, dyf, True, True, 2)

    gx = rng.standard_normal((batch, 16, 8, 8))
    gamma, beta = np.ones(16), np.zeros(16)
    fwd = k.groupnorm_forward(gx, 8, gamma, beta, 1e-5)
    gdy = rng.standard_normal(gx.shape)
    cases["groupnorm fwd"] = lambda: k.groupnorm_forward(gx, 8, gamma, beta, 1e-5)
    cases["groupnorm bwd"] = lambda: k.groupnorm_backward(
        gx, gamma, fwd[1], fwd[2], gdy, 8, True, 2, fwd[3]
    )
    cases["relu bwd"] = lambda: k.relu_backward(gx, gdy)
    cases["meanpool fwd"] = lambda: k.meanpool_forward(gx, 2)
    return cases


def step_case(strategy, rng):
    model = nn.build_small_cnn(seed=0)
    mask = finetune.select_trainable(model, finetune.parse_strategy(strategy))
    x_aug = rng.random((64, 2, 1, 8, 8))
    labels = rng.integers(0, 10, 64)
    cfg = (optim.ClipConfig(1.0), optim.NoiseConfig(1.0, 0), optim.StepConfig(0.5, 64.0, 2))
    noise_rng = np.random.default_rng(0)
    return lambda: optim.dp_sgd_step(model, x_aug, labels, mask, *cfg, noise_rng)


def finetune_case(steps):
    config = harness.ExperimentConfig(steps=steps).validate()
    datasets = harness.load_datasets(config)
    model, _ = harness.pretrain(config, datasets[0])
    strategy = finetune.parse_strategy("whole")

    def run():
        harness.finetune_dp(config, model, datasets, strategy, 8.0)

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=30,
                        help="fine-tune steps for the end-to-end case")
    args = parser.parse_args()

    if "native" not in backend.available_backends():
        print("native backend not built; run: python setup.py build_ext --inplace")
        return 1

    rng = np.random.default_rng(0)
    rows = []
    for name in sorted(kernel_cases(rng)):
        times = {}
        for bk in ("python", "native"):
            backend.use_backend(bk)
            times[bk] = timeit(kernel_cases(rng)[name])
        rows.append((name, times["python"], times["native"]))

    for strategy in ("whole", "first-last", "last"):
        times = {}
        for bk in ("python", "native"):
            backend.use_backend(bk)
            times[bk] = timeit(step_case(strategy, np.random.default_rng(1)), repeat=10)
        rows.append((f"dp_sgd_step [{strategy}]", times["python"], times["native"]))

    times = {}
    for bk in ("python", "native"):
        backend.use_backend(bk)
        fn = finetune_case(args.steps)
        t0 = time.perf_counter()
        fn()
        times[bk] = (time.perf_counter() - t0) * 1000.0
    rows.append((f"finetune {args.steps} steps [whole]", times["python"], times["native"]))
    backend.use_backend("auto")

    width = max(len(r[0]) for r in rows)
    print(f"{'case'.ljust(width)}  {'python ms':>10}  {'native ms':>10}  {'speedup':>8}")
    print("-" * (width + 34))
    for name, py, nat in rows:
        print(f"{name.ljust(width)}  {py:>10.3f}  {nat:>10.3f}  {py / nat:>7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
