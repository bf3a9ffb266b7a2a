"""Time the numba and numpy likelihood kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--S 15] [--T 300] [--N 250] [--repeat 5]

Both paths are called through the model's batched likelihood so the timing
includes the parameter transforms the inner estimator actually pays for.
Setting ``MARGLIK_DISABLE_NUMBA=1`` forces the numpy path everywhere; here the
switch is flipped per call instead, so one process measures both.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from marglik import _kernels
from marglik.core import RngStream
from marglik.models import LBAModel, MixedLogitModel


def _time(fn, repeat):
    fn()  # warm-up (and JIT compilation on the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _setup_lba(S, T, N):
    model = LBAModel("III")
    mu = np.log([1.3, 1.0, 0.7, 0.5, 1.0, 2.5, 0.2])
    theta = model.theta_from(mu, 0.01 * np.eye(mu.size))
    ds = model.simulate(theta, S, T, RngStream(7))
    alpha = model.sample_re(theta, S * N, np.random.default_rng(1)).reshape(S, N, -1)
    return model, model.prepared(ds), theta, alpha


def _setup_logit(S, T, N):
    model = MixedLogitModel()
    theta = np.concatenate([[-0.5, 0.8, -0.6, 0.5, 0.4, -0.05], np.log([1.0, 0.8, 0.6, 0.7, 0.5])])
    ds = model.simulate(theta, S, T, RngStream(3))
    alpha = model.sample_re(theta, S * N, np.random.default_rng(1)).reshape(S, N, -1)
    return model, model.prepared(ds), theta, alpha


def bench(name, setup, S, T, N, repeat):
    model, data, theta, alpha = setup(S, T, N)
    subj = np.arange(S, dtype=np.int64)
    rows = {}
    for label, flag in (("numba", True), ("numpy", False)):
        if flag and not _kernels.HAVE_NUMBA:
            continue
        saved = _kernels.USE_NUMBA
        _kernels.USE_NUMBA = flag
        try:
            rows[label] = _time(lambda: model.log_obs_batch(data, subj, alpha, theta), repeat)
        finally:
            _kernels.USE_NUMBA = saved
    if len(rows) == 2:
        a, b = rows["numba"][1], rows["numpy"][1]
        fin = np.isfinite(a)
        assert np.array_equal(fin, np.isfinite(b)), "paths disagree on support"
        err = float(np.max(np.abs(a[fin] - b[fin]))) if fin.any() else 0.0
    else:
        err = float("nan")
    evals = S * T * N
    for label, (secs, _) in rows.items():
        print(f"{name:<6} {label:<6} {secs * 1e3:9.2f} ms  {evals / secs / 1e6:8.2f} M trial-evals/s")
    if len(rows) == 2:
        print(f"{name:<6} speed-up {rows['numpy'][0] / rows['numba'][0]:.2f}x  max |diff| {err:.2e}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--S", type=int, default=15)
    p.add_argument("--T", type=int, default=300)
    p.add_argument("--N", type=int, default=250)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    print(f"S={args.S} T={args.T} N={args.N}, best of {args.repeat}")
    bench("lba", _setup_lba, args.S, args.T, args.N, args.repeat)
    bench("logit", _setup_logit, args.S, args.T, args.N, args.repeat)


if __name__ == "__main__":
    main()
