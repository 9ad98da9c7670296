"""Compiled vs numpy kernel timings: raw block MAC and a full array frame.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from chipmunk_sim import _kernels
from chipmunk_sim.modelio import ctc_3l_421h_uni, quantize_input, quantize_model
from chipmunk_sim.systolic import ArrayGeometry, SystolicArray, partition


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_block_mac(impl, repeat):
    rng = np.random.default_rng(0)
    w = rng.integers(-128, 128, size=(96, 96)).astype(np.int8)
    v = rng.integers(-128, 128, size=96).astype(np.int8)
    acc = np.zeros(96, np.int32)

    def run():
        for _ in range(100):
            acc[:] = 0
            impl.block_mac(acc, w, v, -32768, 32767)

    return _best(run, repeat) / 100


def bench_frame(impl, repeat, geom="5x5x3"):
    q = quantize_model(ctc_3l_421h_uni())
    saved = _kernels.block_mac, _kernels.sat_add
    _kernels.block_mac, _kernels.sat_add = impl.block_mac, impl.sat_add
    try:
        with SystolicArray(partition(q, ArrayGeometry.parse(geom)), q, threads=1) as arr:
            x = quantize_input(np.random.default_rng(1).uniform(-1, 1, q.n_in), q)
            arr.step(x)  # programs resident weights
            return _best(lambda: arr.step(x), repeat)
    finally:
        _kernels.block_mac, _kernels.sat_add = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [("numpy", _kernels.pure)]
    if _kernels.compiled is not None:
        impls.append(("cython", _kernels.compiled))
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rows = []
    for name, impl in impls:
        rows.append((name, bench_block_mac(impl, args.repeat), bench_frame(impl, args.repeat)))
    print(f"{'backend':<8}{'96x96 block_mac':>18}{'CTC frame 5x5x3':>18}")
    for name, mac_t, frame_t in rows:
        print(f"{name:<8}{mac_t * 1e6:>15.1f} us{frame_t * 1e3:>15.1f} ms")
    if len(rows) == 2:
        print(f"speed-up: block_mac x{rows[0][1] / rows[1][1]:.1f}, frame x{rows[0][2] / rows[1][2]:.1f}")


if __name__ == "__main__":
    main()
