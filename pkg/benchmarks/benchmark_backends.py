#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the per-step flocking control kernel, a full simulation, the conv and
max-pool kernels, and one discriminator training epoch under each backend.

    python benchmarks/benchmark_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from privflock import _kernels
from privflock.config import load_config
from privflock import coopt, nn
from privflock.flocking import Chromosome, ReferenceTrajectory, SimConfig, simulate

TUNED = [1.0, 1.0, 0.3, 2.0, 10.0, 10.0,
         1.0, 0.7, 0.2, 2.0, 10.0, 10.0, 1.2, 0.0, 0.0]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_flock_controls(repeats):
    rng = np.random.default_rng(0)
    pos = rng.uniform(-10, 10, size=(9, 3))
    vel = rng.uniform(-2, 2, size=(9, 3))
    gains = np.array([1.0, 1.0, 0.3])
    radii = np.array([2.0, 10.0, 10.0])
    target = np.array([5.0, 0.0, 10.0])

    def run():
        for _ in range(500):
            _kernels.flock_controls(pos, vel, gains, radii, gains, radii,
                                    1.2, 4, target, 2.5)
    return timeit(run, repeats) / 500


def bench_simulate(repeats):
    chrom = Chromosome.from_genes(TUNED)
    traj = ReferenceTrajectory(kind="line")
    cfg = SimConfig(n_robots=9, duration=60.0, seed=1)
    return timeit(lambda: simulate(chrom, traj, cfg), repeats)


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 10, 9, 3))
    w = rng.normal(size=(16, 10, 3, 3))
    b = rng.normal(size=16)
    dy = rng.normal(size=(32, 16, 9, 3))

    def run():
        for _ in range(20):
            _kernels.conv3x3_forward(x, w, b)
            _kernels.conv3x3_backward(x, w, dy)
    return timeit(run, repeats) / 20


def bench_maxpool(repeats):
    rng = np.random.default_rng(0)
    x = np.abs(rng.normal(size=(32, 16, 9, 3)))

    def run():
        for _ in range(50):
            y, idx = _kernels.maxpool3x3_forward(x)
            _kernels.maxpool3x3_backward(y, idx, 9, 3)
    return timeit(run, repeats) / 50


def bench_train_epoch(repeats):
    cfg = load_config(None)
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(256, 10, 9, 3))
    ys = rng.integers(0, 9, size=256)

    def run():
        net = coopt.fresh_net(cfg)
        opt = nn.OptimizerState()
        nn.train_epoch(net, xs, ys, opt, 32, np.random.default_rng(1))
    return timeit(run, repeats)


BENCHES = [
    ("flock_controls (N=9, per call)", bench_flock_controls),
    ("simulate (9 robots, 60 s)", bench_simulate),
    ("conv3x3 fwd+bwd (batch 32)", bench_conv),
    ("maxpool3x3 fwd+bwd (batch 32)", bench_maxpool),
    ("train_epoch (256 windows)", bench_train_epoch),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3,
                        help="timing repetitions, best-of is reported")
    args = parser.parse_args()

    backends = _kernels.available_backends()
    print(f"available backends: {', '.join(backends)}")
    results = {}
    for backend in backends:
        _kernels.set_backend(backend)
        for name, bench in BENCHES:
            results[(name, backend)] = bench(args.repeats)

    width = max(len(name) for name, _ in BENCHES)
    header = f"{'benchmark':<{width}}  " + "".join(
        f"{b:>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, _ in BENCHES:
        row = f"{name:<{width}}  "
        for backend in backends:
            row += f"{results[(name, backend)] * 1e3:>12.3f}ms"
        if len(backends) == 2:
            ratio = (results[(name, "python")]
                     / results[(name, "compiled")])
            row += f"{ratio:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
