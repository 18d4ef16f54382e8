"""Experiment orchestration: simulate over a confounding grid, train the
autoencoder, fit confounded/deconfounded/oracle outcome models, and report
tau-step-ahead counterfactual RMSE (mean over repetitions plus sd).

Every run's seed is a stable hash of (master_seed, gamma, repetition), so
results are bit-reproducible and runs are independent across cells. Runs
can execute on a bounded process pool and are resumable through per-run
completion records.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DtaError
from .model import DtaHyperparams, DtaModel, LossWeights, compute_loss, train
from .outcome_models import (
    CovariateSource,
    RmsnHyperparams,
    fit_msm,
    fit_rmsn,
    predict_msm_batch,
    predict_rmsn_batch,
)
from .simgen import SimConfig, TrajectoryDataset, simulate, simulate_counterfactuals

METHODS = (
    "conf_msm",
    "deconf_msm",
    "oracle_msm",
    "conf_rmsn",
    "deconf_rmsn",
    "oracle_rmsn",
)

_METHOD_SOURCE = {"conf": "proxies", "deconf": "embedding", "oracle": "oracle"}


def method_source(method: str) -> str:
    prefix, _, family = method.partition("_")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    return _METHOD_SOURCE[prefix]


def method_family(method: str) -> str:
    return method.rsplit("_", 1)[1]


@dataclass(frozen=True)
class HyperGrid:
    """Candidate values for the stochastic grid search."""

    batch_size: tuple = (64, 128, 256)
    learning_rate: tuple = (0.01, 0.005, 0.001)
    dropout_rate: tuple = (0.0, 0.1, 0.2, 0.3, 0.4)
    theta: tuple = (0.0, 0.5, 1.0, 2.0, 5.0)
    alpha: tuple = (0.0, 0.5, 1.0, 2.0, 5.0)
    p_z: tuple = (5, 10)

    def __post_init__(self):
        for name, vals in vars(self).items():
            if len(vals) == 0:
                raise ConfigError(f"grid for {name} is empty")

    def points(self):
        names = list(vars(self))
        for combo in itertools.product(*(getattr(self, n) for n in names)):
            yield dict(zip(names, combo))

    def size(self):
        return int(np.prod([len(v) for v in vars(self).values()]))


@dataclass(frozen=True)
class ExperimentConfig:
    gamma_grid: tuple = (0.0, 0.4, 0.8)
    n_datasets: int = 3
    sim: SimConfig = field(default_factory=SimConfig)
    tau: int = 5
    methods: tuple = METHODS
    search_iterations: int = 1
    split_fractions: tuple = (0.8, 0.1, 0.1)
    master_seed: int = 0
    grid: HyperGrid = field(default_factory=HyperGrid)
    dta_epochs: int = 200
    rmsn: RmsnHyperparams = field(default_factory=RmsnHyperparams)

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.search_iterations < 1:
            raise ConfigError("search_iterations must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for g in self.gamma_grid:
            if not 0.0 <= g <= 1.0:
                raise ConfigError("gamma values must lie in [0, 1]")


def desk_profile(**overrides) -> ExperimentConfig:
    """CI-scale profile: small N, three repetitions, pinned hyperparameters."""
    defaults = dict(
        gamma_grid=(0.0, 0.4, 0.8),
        n_datasets=3,
        sim=SimConfig(N=1000, T=30, r=5, p=20, k=2, h=5, tau_cf=5),
        search_iterations=1,
        grid=HyperGrid(
            batch_size=(256,),
            learning_rate=(0.01,),
            dropout_rate=(0.1,),
            theta=(1.0,),
            alpha=(1.0,),
            p_z=(5,),
        ),
        dta_epochs=30,
        # the outcome network needs to be near-converged for every source,
        # otherwise source comparisons measure optimization, not confounding
        rmsn=RmsnHyperparams(propensity_epochs=30, outcome_epochs=150),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def paper_profile(**overrides) -> ExperimentConfig:
    """Full-scale protocol: N=5000, five gamma values, ten repetitions,
    50-iteration stochastic grid search."""
    defaults = dict(
        gamma_grid=(0.0, 0.2, 0.4, 0.6, 0.8),
        n_datasets=10,
        sim=SimConfig(N=5000, T=30, r=5, p=20, k=2, h=5, tau_cf=5),
        search_iterations=50,
        grid=HyperGrid(),
        dta_epochs=200,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


@dataclass
class ExperimentResult:
    records: list  # one dict per (gamma, method, run)
    summary: dict  # (gamma, method) -> dict(rmse_mean, rmse_sd, n_runs)

    @classmethod
    def from_records(cls, records):
        groups = {}
        for rec in records:
            groups.setdefault((rec["gamma"], rec["method"]), []).append(rec["rmse"])
        summary = {
            key: {
                "rmse_mean": float(np.mean(vals)),
                "rmse_sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                "n_runs": len(vals),
            }
            for key, vals in groups.items()
        }
        return cls(records=records, summary=summary)

    def rmse(self, gamma, method):
        return self.summary[(gamma, method)]["rmse_mean"]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _split_indices(N, fractions, seed):
    f_train, f_val, f_test = fractions
    n_val = int(round(N * f_val))
    n_test = int(round(N * f_test))
    n_train = N - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"split fractions {fractions} leave an empty split for N={N}")
    order = np.random.default_rng(seed).permutation(N)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def split_dataset(dataset: TrajectoryDataset, fractions, seed):
    """Patient-level disjoint (train, val, test) partition."""
    idx = _split_indices(dataset.n_patients, fractions, seed)
    return tuple(dataset.subset(i) for i in idx)


def hyper_search(train_ds, val_ds, grid: HyperGrid, iterations, seed, objective):
    """Sample grid points (without replacement when possible), score each
    with ``objective(point, train_ds, val_ds)``, return (best point, trials).
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    points = list(grid.points())
    rng = np.random.default_rng(seed)
    if iterations >= len(points):
        chosen = points if iterations == len(points) else [
            points[i] for i in rng.integers(0, len(points), size=iterations)
        ]
    else:
        chosen = [points[i] for i in rng.choice(len(points), size=iterations, replace=False)]
    trials = []
    for point in chosen:
        try:
            score = objective(point, train_ds, val_ds)
        except DtaError as exc:
            trials.append({"point": point, "score": None, "error": str(exc)})
            continue
        trials.append({"point": point, "score": float(score), "error": None})
    scored = [t for t in trials if t["score"] is not None and np.isfinite(t["score"])]
    if not scored:
        raise ConfigError("every hyperparameter candidate failed")
    best = min(scored, key=lambda t: t["score"])
    return best["point"], trials


def evaluate_counterfactual_rmse(predictions, dataset: TrajectoryDataset, tau):
    """RMSE of the tau-th-step prediction against the simulated
    counterfactual outcomes."""
    if dataset.cf_y is None or dataset.cf_a is None:
        raise ConfigError("dataset carries no counterfactual fields")
    if tau > dataset.cf_y.shape[1]:
        raise ConfigError(f"tau={tau} exceeds counterfactual horizon")
    predictions = np.asarray(predictions, dtype=np.float64)
    target = dataset.cf_y[:, tau - 1]
    if predictions.shape != target.shape:
        raise ConfigError(f"predictions shape {predictions.shape} != {target.shape}")
    return float(np.sqrt(np.mean((predictions - target) ** 2)))


def _dta_hyperparams(point, cfg: ExperimentConfig, seed, n_train) -> DtaHyperparams:
    return DtaHyperparams(
        p_z=point["p_z"],
        batch_size=min(point["batch_size"], n_train),
        learning_rate=point["learning_rate"],
        dropout_rate=point["dropout_rate"],
        theta=point["theta"],
        alpha=point["alpha"],
        epochs=cfg.dta_epochs,
        seed=seed,
    )


def _tune_and_train_dta(cfg, train_ds, val_ds, seed):
    """Stochastic grid search scored by validation total loss, then a
    final fit with the winning point."""

    def objective(point, tr, va):
        hp = _dta_hyperparams(point, cfg, seed, tr.n_patients)
        model, _ = train(tr, hp)
        breakdown, _ = compute_loss(model, va, hp.weights)
        return breakdown.total

    best, _ = _tune(cfg, train_ds, val_ds, objective, seed)
    hp = _dta_hyperparams(best, cfg, seed, train_ds.n_patients)
    model, _ = train(train_ds, hp)
    return model, best


def _tune(cfg, train_ds, val_ds, objective, seed):
    if cfg.search_iterations == 1 and cfg.grid.size() == 1:
        return next(cfg.grid.points()), []
    return hyper_search(
        train_ds, val_ds, cfg.grid, cfg.search_iterations,
        derive_seed(seed, "search"), objective,
    )


def _anchor_inputs(ds: TrajectoryDataset, cov):
    """History/plan triplet at the counterfactual anchor."""
    s0 = ds.anchor_t - 1
    return cov[:, : s0 + 1], ds.a[:, :s0], ds.cf_a


def run_cell(cfg: ExperimentConfig, gamma: float, rep: int) -> list[dict]:
    """One simulated dataset: train/fit every requested method, return
    per-method result records."""
    seed = derive_seed(cfg.master_seed, gamma, rep)
    sim_cfg = replace(cfg.sim, gamma_a=gamma, gamma_y=gamma, seed=seed, tau_cf=cfg.tau)
    ds, sim_params = simulate(sim_cfg)
    ds = simulate_counterfactuals(sim_cfg, sim_params, ds)
    splits = split_dataset(ds, cfg.split_fractions, derive_seed(seed, "split"))
    train_ds, val_ds, test_ds = splits

    dta_model: DtaModel | None = None
    dta_point = None
    if any(method_source(m) == "embedding" for m in cfg.methods):
        dta_model, dta_point = _tune_and_train_dta(cfg, train_ds, val_ds, seed)

    records = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        selector = method_source(method)
        train_src = CovariateSource.from_dataset(train_ds, selector, dta_model)
        test_src = CovariateSource.from_dataset(test_ds, selector, dta_model)
        cov_hist, a_hist, plan = _anchor_inputs(test_ds, test_src.values)
        if method_family(method) == "msm":
            fitted = fit_msm(train_ds, train_src, cfg.tau)
            preds = predict_msm_batch(fitted, cov_hist, a_hist, plan)
        else:
            rmsn_hp = replace(cfg.rmsn, seed=derive_seed(seed, method))
            fitted = fit_rmsn(train_ds, train_src, cfg.tau, rmsn_hp)
            preds = predict_rmsn_batch(fitted, cov_hist, a_hist, plan)[:, cfg.tau - 1]
        rmse = evaluate_counterfactual_rmse(preds, test_ds, cfg.tau)
        records.append(
            {
                "gamma": gamma,
                "method": method,
                "run": rep,
                "rmse": rmse,
                "hyperparams": json.dumps(dta_point, sort_keys=True)
                if selector == "embedding"
                else "",
                "runtime_s": round(time.perf_counter() - t0, 3),
            }
        )
    return records


def _cell_record_path(out_dir, gamma, rep):
    return os.path.join(out_dir, "runs", f"cell_g{gamma:g}_r{rep}.json")


def _run_cell_task(args):
    cfg, gamma, rep, out_dir = args
    if out_dir is not None:
        path = _cell_record_path(out_dir, gamma, rep)
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)
    records = run_cell(cfg, gamma, rep)
    if out_dir is not None:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(records, fh, sort_keys=True)
        os.replace(tmp, path)
    return records


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers=1) -> ExperimentResult:
    """Full grid of (gamma, repetition) cells; resumable when ``out_dir``
    is set, parallel over a bounded process pool when ``workers > 1``."""
    if not cfg.methods:
        return ExperimentResult.from_records([])
    tasks = [
        (cfg, gamma, rep, out_dir)
        for gamma in cfg.gamma_grid
        for rep in range(cfg.n_datasets)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_records = list(pool.map(_run_cell_task, tasks))
    else:
        all_records = [_run_cell_task(t) for t in tasks]
    records = [rec for cell in all_records for rec in cell]
    records.sort(key=lambda r: (r["gamma"], r["method"], r["run"]))
    return ExperimentResult.from_records(records)


# ---------------------------------------------------------------------------
# result files


def _write_csv(path, header, rows):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_result_files(result: ExperimentResult, out_dir):
    """results.csv (per run), summary.csv (mean/sd), plotdata.csv
    (gamma vs mean RMSE per method)."""
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(
        os.path.join(out_dir, "results.csv"),
        ["gamma", "method", "run", "rmse", "selected_hyperparameters", "runtime_s"],
        [
            [r["gamma"], r["method"], r["run"], repr(r["rmse"]), r["hyperparams"], r["runtime_s"]]
            for r in result.records
        ],
    )
    summary_rows = [
        [g, m, repr(v["rmse_mean"]), repr(v["rmse_sd"]), v["n_runs"]]
        for (g, m), v in sorted(result.summary.items())
    ]
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["gamma", "method", "rmse_mean", "rmse_sd", "n_runs"],
        summary_rows,
    )
    methods = sorted({m for _, m in result.summary})
    gammas = sorted({g for g, _ in result.summary})
    plot_rows = [
        [g] + [repr(result.summary[(g, m)]["rmse_mean"]) if (g, m) in result.summary else ""
               for m in methods]
        for g in gammas
    ]
    _write_csv(os.path.join(out_dir, "plotdata.csv"), ["gamma"] + methods, plot_rows)
