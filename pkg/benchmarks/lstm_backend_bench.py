"""Benchmark the compiled recurrent kernel against the pure-numpy fallback.

Runs the fused forward and backward passes for a few problem sizes and
reports per-call wall time plus the speedup. Also cross-checks that both
backends produce the same numbers before timing anything.

Usage: python benchmarks/lstm_backend_bench.py [--repeats 20]
"""

import argparse
import time

import numpy as np

from dta.nn.backend import get_kernels
from dta.nn.lstm import LstmCellParams

SIZES = [
    # (batch, steps, input_dim, hidden_dim)
    (64, 30, 22, 13),
    (256, 30, 22, 13),
    (256, 30, 22, 64),
    (1024, 50, 40, 64),
]


def _time_call(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeats):
    py = get_kernels("python")
    try:
        cy = get_kernels("compiled")
    except Exception as exc:
        print(f"compiled backend unavailable ({exc}); nothing to compare")
        return

    rng = np.random.default_rng(0)
    print(f"{'size':>24} {'python fwd':>12} {'compiled fwd':>12} {'fwd x':>7} "
          f"{'python bwd':>12} {'compiled bwd':>12} {'bwd x':>7}")
    for B, T, D, H in SIZES:
        cell = LstmCellParams.init(D, H, rng)
        x = rng.normal(size=(B, T, D))
        g = rng.normal(size=(B, T, H))

        h_py, cache_py = py.lstm_forward(x, cell.w_x, cell.w_h, cell.bias)
        h_cy, cache_cy = cy.lstm_forward(x, cell.w_x, cell.w_h, cell.bias)
        assert np.allclose(h_py, h_cy, rtol=1e-12, atol=1e-12), "forward mismatch"
        b_py = py.lstm_backward(g, x, cell.w_x, cell.w_h, cache_py)
        b_cy = cy.lstm_backward(g, x, cell.w_x, cell.w_h, cache_cy)
        for u, v in zip(b_py, b_cy):
            assert np.allclose(u, v, rtol=1e-12, atol=1e-12), "backward mismatch"

        t_fwd_py = _time_call(lambda: py.lstm_forward(x, cell.w_x, cell.w_h, cell.bias), repeats)
        t_fwd_cy = _time_call(lambda: cy.lstm_forward(x, cell.w_x, cell.w_h, cell.bias), repeats)
        t_bwd_py = _time_call(lambda: py.lstm_backward(g, x, cell.w_x, cell.w_h, cache_py), repeats)
        t_bwd_cy = _time_call(lambda: cy.lstm_backward(g, x, cell.w_x, cell.w_h, cache_cy), repeats)
        label = f"B={B} T={T} D={D} H={H}"
        print(f"{label:>24} {t_fwd_py * 1e3:>10.2f}ms {t_fwd_cy * 1e3:>10.2f}ms "
              f"{t_fwd_py / t_fwd_cy:>6.2f}x {t_bwd_py * 1e3:>10.2f}ms "
              f"{t_bwd_cy * 1e3:>10.2f}ms {t_bwd_py / t_bwd_cy:>6.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    run(ap.parse_args().repeats)
