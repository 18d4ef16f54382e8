"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from dta.simgen import SimConfig, simulate, simulate_counterfactuals


def fd_gradient(f, arr, eps=1e-6):
    """Central finite differences of scalar f() w.r.t. an array mutated
    in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


@pytest.fixture(scope="session")
def tiny_cfg():
    return SimConfig(N=12, T=6, r=2, p=3, k=1, h=2, tau_cf=3, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    ds, params = simulate(tiny_cfg)
    return simulate_counterfactuals(tiny_cfg, params, ds)


@pytest.fixture(scope="session")
def small_cfg():
    return SimConfig(N=80, T=10, r=2, p=4, k=2, h=3, tau_cf=4, seed=5)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    ds, params = simulate(small_cfg)
    return simulate_counterfactuals(small_cfg, params, ds)
