"""Synthetic longitudinal data with hidden confounders and noisy proxies.

Hidden confounders follow an order-h autoregressive process driven by past
treatments; observed covariates are noisy linear readouts of the
confounders; treatments are Bernoulli draws whose logit mixes the current
confounder mean with the previous treatment mean; the scalar outcome mixes
the confounder mean with a weighted sum of recent treatments. The two
mixing knobs gamma_a and gamma_y control how strongly the hidden
confounders drive treatments and outcomes.

Counterfactual rollouts branch at an anchor step under a random treatment
plan, reusing the identical confounder noise realizations as the factual
rollout (common random numbers), so matching plans reproduce the factual
outcomes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs.

    N: patients, T: timesteps, r: hidden confounders, p: noisy proxies,
    k: binary treatments, h: autoregressive order, gamma_a / gamma_y:
    confounding strength on treatments / outcomes in [0, 1], tau_cf:
    counterfactual horizon, seed: RNG seed.
    """

    N: int = 1000
    T: int = 30
    r: int = 5
    p: int = 20
    k: int = 2
    h: int = 5
    gamma_a: float = 0.5
    gamma_y: float = 0.5
    tau_cf: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "T", "r", "p", "k", "h", "tau_cf"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("gamma_a", "gamma_y"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.tau_cf > self.T:
            raise ConfigError("tau_cf must not exceed T")


@dataclass
class SimParams:
    """Coefficients drawn once per dataset.

    lam[j, i-1]: AR weight of confounder j on its lag-i value, N(0, 0.5^2).
    omega[i-1, l]: lag-i weight of treatment l in the confounder process,
    N(1 - i/h, (1/h)^2). omega_prime: same distribution, independent draw,
    used in the outcome. beta[j, m]: loading of confounder j on proxy m,
    N(0, 1).
    """

    lam: np.ndarray  # (r, h)
    omega: np.ndarray  # (h, k)
    omega_prime: np.ndarray  # (h, k)
    beta: np.ndarray  # (r, p)


@dataclass
class TrajectoryDataset:
    """Per-patient sequences; y[:, t] stores the outcome generated at step
    t+1 from step-t state (the one-step-ahead outcome).

    z and eta are oracle fields (true confounders and their noise draws);
    cf_a / cf_y hold the counterfactual plan and outcomes from anchor_t
    (1-based) onward.
    """

    x: np.ndarray  # (N, T, p)
    a: np.ndarray  # (N, T, k), entries in {0, 1}
    y: np.ndarray  # (N, T)
    z: np.ndarray | None = None  # (N, T, r)
    eta: np.ndarray | None = None  # (N, T, r) confounder noise (oracle)
    cf_a: np.ndarray | None = None  # (N, tau_cf, k)
    cf_y: np.ndarray | None = None  # (N, tau_cf)
    anchor_t: int | None = None  # 1-based branch step

    @property
    def n_patients(self):
        return self.x.shape[0]

    @property
    def n_steps(self):
        return self.x.shape[1]

    def subset(self, idx) -> "TrajectoryDataset":
        """Row-subset by patient indices; oracle fields follow along."""
        pick = lambda arr: None if arr is None else arr[idx]
        return TrajectoryDataset(
            x=self.x[idx],
            a=self.a[idx],
            y=self.y[idx],
            z=pick(self.z),
            eta=pick(self.eta),
            cf_a=pick(self.cf_a),
            cf_y=pick(self.cf_y),
            anchor_t=self.anchor_t,
        )


def draw_sim_params(cfg: SimConfig, rng: np.random.Generator) -> SimParams:
    lags = np.arange(1, cfg.h + 1)
    lag_means = 1.0 - lags / cfg.h
    return SimParams(
        lam=rng.normal(0.0, 0.5, size=(cfg.r, cfg.h)),
        omega=rng.normal(lag_means[:, None], 1.0 / cfg.h, size=(cfg.h, cfg.k)),
        omega_prime=rng.normal(lag_means[:, None], 1.0 / cfg.h, size=(cfg.h, cfg.k)),
        beta=rng.normal(0.0, 1.0, size=(cfg.r, cfg.p)),
    )


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _confounder_step(z, a, eta_t, params, t, h):
    """AR update for step t; pre-history (negative indices) is zero."""
    N, _, r = z.shape
    acc = np.zeros((N, r))
    for i in range(1, h + 1):
        s = t - i
        if s < 0:
            break
        acc += z[:, s, :] * params.lam[:, i - 1]
        acc += (a[:, s, :] @ params.omega[i - 1])[:, None]
    return acc / h + eta_t


def _outcome_step(z, a, params, t, h, gamma_y):
    """One-step-ahead outcome from step-t state; uses treatments a_t..a_{t-h+1}."""
    N = z.shape[0]
    treat = np.zeros(N)
    for i in range(1, h + 1):
        s = t - (i - 1)
        if s < 0:
            break
        treat += a[:, s, :] @ params.omega_prime[i - 1]
    return gamma_y * z[:, t, :].mean(axis=1) + (1.0 - gamma_y) * treat / h


def simulate(cfg: SimConfig) -> tuple[TrajectoryDataset, SimParams]:
    """Generate a factual dataset; bit-identical for identical configs."""
    rng = np.random.default_rng(cfg.seed)
    params = draw_sim_params(cfg, rng)
    N, T, r, p, k, h = cfg.N, cfg.T, cfg.r, cfg.p, cfg.k, cfg.h

    eta = rng.normal(0.0, 0.1, size=(N, T, r))
    eps = rng.normal(0.0, 5.0, size=(N, T, p))
    u_treat = rng.random(size=(N, T, k))

    z = np.zeros((N, T, r))
    x = np.zeros((N, T, p))
    a = np.zeros((N, T, k))
    y = np.zeros((N, T))
    for t in range(T):
        z[:, t] = _confounder_step(z, a, eta[:, t], params, t, h)
        x[:, t] = z[:, t] @ params.beta + eps[:, t]
        base = cfg.gamma_a * z[:, t].mean(axis=1)
        if t > 0:
            base = base + (1.0 - cfg.gamma_a) * a[:, t - 1].mean(axis=1)
        prob = _sigmoid(base)
        a[:, t] = (u_treat[:, t] < prob[:, None]).astype(np.float64)
        y[:, t] = _outcome_step(z, a, params, t, h, cfg.gamma_y)

    return TrajectoryDataset(x=x, a=a, y=y, z=z, eta=eta), params


def simulate_counterfactuals(
    cfg: SimConfig,
    params: SimParams,
    dataset: TrajectoryDataset,
    anchor_t: int | None = None,
    rng: np.random.Generator | None = None,
) -> TrajectoryDataset:
    """Fill cf_a / cf_y by re-rolling from anchor_t under a random plan.

    The confounder noise at the re-rolled steps is reused from the factual
    rollout, so a plan equal to the factual treatments reproduces the
    factual outcomes exactly.
    """
    T, tau = cfg.T, cfg.tau_cf
    if anchor_t is None:
        anchor_t = T - tau + 1
    if anchor_t < 1 or anchor_t + tau - 1 > T:
        raise ConfigError(
            f"counterfactual horizon [{anchor_t}, {anchor_t + tau - 1}] exceeds T={T}"
        )
    if dataset.z is None or dataset.eta is None:
        raise ConfigError("dataset lacks oracle fields; was it produced by simulate()?")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 1])

    N, k, h = dataset.n_patients, cfg.k, cfg.h
    a0 = anchor_t - 1
    cf_a = (rng.random(size=(N, tau, k)) < 0.5).astype(np.float64)

    z_cf = dataset.z.copy()
    a_cf = dataset.a.copy()
    a_cf[:, a0 : a0 + tau] = cf_a
    cf_y = np.zeros((N, tau))
    for j in range(tau):
        t = a0 + j
        z_cf[:, t] = _confounder_step(z_cf, a_cf, dataset.eta[:, t], params, t, h)
        cf_y[:, j] = _outcome_step(z_cf, a_cf, params, t, h, cfg.gamma_y)

    return replace(dataset, cf_a=cf_a, cf_y=cf_y, anchor_t=anchor_t)
