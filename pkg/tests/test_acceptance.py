"""Acceptance gate: end-to-end numerical and trend criteria.

The bias-reduction experiment is checked at desk scale (N=1000, three
repetitions, gamma in {0, 0.4, 0.8}); exact RMSE curves from larger runs
are not pinned, only orderings and trends, which is the strongest check
available for a stochastic experiment of this size.
"""

import time

import numpy as np
import pytest

from dta import cli, harness
from dta import model as M
from dta.harness import HyperGrid, desk_profile, run_experiment
from dta.model import (
    DtaHyperparams,
    LossWeights,
    causal_penalty,
    gaussian_kl,
    init_model,
    treatment_combinations,
)
from dta.nn.tensor import backward
from dta.simgen import SimConfig, simulate, simulate_counterfactuals

from conftest import fd_gradient
from test_model import _penalty_oracle


# ---------------------------------------------------------------------------
# criterion 1: full-loss gradients vs central finite differences


def test_gradient_suite_full_loss():
    t_start = time.monotonic()
    cfg = SimConfig(N=4, T=5, r=2, p=4, k=1, h=2, tau_cf=2, seed=7)
    ds, _ = simulate(cfg)
    hp = DtaHyperparams(p_z=2, dropout_rate=0.0, seed=0)
    model = init_model(cfg.p, cfg.k, hp, np.random.default_rng(0))
    params = model.param_dict()
    weights = LossWeights(theta=1.0, alpha=1.0)
    combos = treatment_combinations(cfg.k)

    def loss_value():
        pt = M._params_to_tensors(params, requires_grad=False)
        out, _ = M._loss_graph(pt, ds.x, ds.a, ds.y, weights, combos)
        return out["total"].item()

    pt = M._params_to_tensors(params, requires_grad=True)
    out, _ = M._loss_graph(pt, ds.x, ds.a, ds.y, weights, combos)
    backward(out["total"])

    for name, arr in params.items():
        fd = fd_gradient(loss_value, arr)
        grad = pt[name].grad
        assert grad is not None, name
        # relative error 1e-4; the absolute floor covers finite-difference
        # roundoff on near-zero gradient components only
        err = np.abs(fd - grad)
        bound = 1e-4 * np.abs(fd) + 1e-7
        assert np.all(err <= bound), (
            f"{name}: worst gradient mismatch {np.max(err - bound):.3e} over bound"
        )
    assert time.monotonic() - t_start < 60.0


# ---------------------------------------------------------------------------
# criterion 2: closed-form Gaussian KL vs numerical integration


def _kl_by_quadrature(mp, sp, mq, sq):
    lo = min(mp - 14 * sp, mq - 14 * sq)
    hi = max(mp + 14 * sp, mq + 14 * sq)
    x = np.linspace(lo, hi, 400001)
    logp = -0.5 * ((x - mp) / sp) ** 2 - np.log(sp * np.sqrt(2 * np.pi))
    logq = -0.5 * ((x - mq) / sq) ** 2 - np.log(sq * np.sqrt(2 * np.pi))
    return float(np.trapezoid(np.exp(logp) * (logp - logq), x))


def test_kl_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mp, mq = rng.uniform(-2.0, 2.0, size=2)
        sp, sq = rng.uniform(0.5, 2.0, size=2)
        assert gaussian_kl(mp, sp, mq, sq) == pytest.approx(
            _kl_by_quadrature(mp, sp, mq, sq), abs=1e-8
        )
    assert gaussian_kl(0.3, 1.7, 0.3, 1.7) == 0.0
    assert gaussian_kl(0.0, 1.0, 1.0, 1.0) == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# criterion 3: penalty vs independent normal equations + nested sigma


def test_penalty_oracle_and_nested_sigma():
    z = np.array([[[0.2], [1.0]], [[-0.4], [0.3]], [[1.1], [-0.6]], [[0.5], [0.8]]])
    a = np.array([[[1.0], [0.0]], [[0.0], [1.0]], [[1.0], [1.0]], [[0.0], [0.0]]])
    po = np.array(
        [
            [[0.3, 1.2], [0.1, -0.5], [0.9, 0.4], [-0.2, 0.6]],
            [[0.5, 0.8], [0.4, -0.1], [1.3, 0.2], [0.1, 0.9]],
        ]
    )
    value, _ = causal_penalty(z, a, po)
    assert value == pytest.approx(_penalty_oracle(z, a, po), abs=1e-10)

    rng = np.random.default_rng(101)
    for _ in range(1000):
        N = int(rng.integers(8, 24))
        zr = rng.normal(size=(N, 2, 1))
        ar = (rng.random((N, 2, 1)) < 0.5).astype(float)
        por = rng.normal(size=(2, N, 2))
        _, stats = causal_penalty(zr, ar, por)
        assert np.all(stats.sigma1 <= stats.sigma2 + 1e-9)


# ---------------------------------------------------------------------------
# criterion 4: simulator moments


def test_simulator_moments():
    cfg = SimConfig(N=10000, T=2, r=2, p=2, k=2, h=2, gamma_a=0.0, tau_cf=1, seed=3)
    ds, _ = simulate(cfg)
    for l in range(cfg.k):
        assert abs(ds.a[:, 0, l].mean() - 0.5) < 3.0 * np.sqrt(0.25 / cfg.N)

    cfg = SimConfig(N=4000, T=30, r=3, p=4, k=1, h=2, tau_cf=2, seed=6)
    ds, _ = simulate(cfg)
    Z = ds.z.reshape(-1, cfg.r)
    X = ds.x.reshape(-1, cfg.p)
    design = np.concatenate([Z, np.ones((len(Z), 1))], axis=1)
    coefs, *_ = np.linalg.lstsq(design, X, rcond=None)
    var = (X - design @ coefs).var(axis=0)
    assert np.all(np.abs(var - 25.0) < 0.05 * 25.0)

    cfg = SimConfig(N=200, T=10, r=4, p=3, k=2, h=3, gamma_y=1.0, tau_cf=2, seed=1)
    ds, _ = simulate(cfg)
    assert np.array_equal(ds.y, ds.z.mean(axis=2))


# ---------------------------------------------------------------------------
# criteria 5 + 6: trend reproduction and embedding-size robustness


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    cfg = desk_profile()
    t0 = time.monotonic()
    result = run_experiment(cfg, out_dir=str(out), workers=1)
    elapsed = time.monotonic() - t0
    return cfg, result, elapsed


@pytest.fixture(scope="session")
def desk_run_pz10(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run_pz10")
    cfg = desk_profile(
        gamma_grid=(0.8,),
        methods=("deconf_msm",),
        grid=HyperGrid(
            batch_size=(256,), learning_rate=(0.01,), dropout_rate=(0.1,),
            theta=(1.0,), alpha=(1.0,), p_z=(10,),
        ),
    )
    return run_experiment(cfg, out_dir=str(out), workers=1)


def test_trend_msm_ordering_at_high_confounding(desk_run):
    # Oracle <= Deconfounded <= Confounded per seed, majority of 3
    _, result, _ = desk_run
    per_run = {
        (rec["method"], rec["run"]): rec["rmse"]
        for rec in result.records
        if rec["gamma"] == 0.8
    }
    hits = sum(
        per_run[("oracle_msm", r)]
        <= per_run[("deconf_msm", r)]
        <= per_run[("conf_msm", r)]
        for r in range(3)
    )
    assert hits >= 2, f"ordering held in {hits}/3 seeds"


def test_trend_gap_grows_with_confounding(desk_run):
    # mean RMSE(conf) - RMSE(deconf) larger at gamma=0.8 than at gamma=0,
    # for both model families
    _, result, _ = desk_run
    for family in ("msm", "rmsn"):
        gap0 = result.rmse(0.0, f"conf_{family}") - result.rmse(0.0, f"deconf_{family}")
        gap8 = result.rmse(0.8, f"conf_{family}") - result.rmse(0.8, f"deconf_{family}")
        assert gap8 > gap0, f"{family}: gap {gap8:.5f} at 0.8 vs {gap0:.5f} at 0"


def test_trend_no_confounding_proxies_suffice(desk_run):
    # at gamma=0 the confounded MSM matches the oracle MSM within 10%;
    # both are near machine-zero there (the gamma=0 outcome is exactly
    # linear in treatments), hence the tiny absolute cushion
    _, result, _ = desk_run
    conf = result.rmse(0.0, "conf_msm")
    oracle = result.rmse(0.0, "oracle_msm")
    assert abs(conf - oracle) <= 0.10 * oracle + 1e-8


def test_trend_runtime_budget(desk_run):
    _, _, elapsed = desk_run
    assert elapsed <= 30 * 60, f"desk experiment took {elapsed / 60:.1f} minutes"


def test_embedding_size_robustness(desk_run, desk_run_pz10):
    # deconfounded MSM RMSE at p_z=5 vs p_z=10 differs by < 15% relative
    _, result5, _ = desk_run
    a = result5.rmse(0.8, "deconf_msm")
    b = desk_run_pz10.rmse(0.8, "deconf_msm")
    rel = abs(a - b) / ((a + b) / 2.0)
    assert rel < 0.15, f"p_z=5: {a:.5f}, p_z=10: {b:.5f}, relative gap {rel:.3f}"


# ---------------------------------------------------------------------------
# criterion 7: byte-identical determinism through the command line


def test_determinism_simulate_and_train(tmp_path):
    import json

    sim_doc = {"N": 25, "T": 6, "r": 2, "p": 3, "k": 1, "h": 2, "tau_cf": 2, "seed": 5}
    train_doc = {"p_z": 2, "batch_size": 10, "learning_rate": 0.01,
                 "dropout_rate": 0.1, "theta": 1.0, "alpha": 1.0,
                 "epochs": 2, "seed": 0}
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps(sim_doc))
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps(train_doc))

    outs = []
    for tag in ("a", "b"):
        ds_dir = tmp_path / f"ds_{tag}"
        ckpt = tmp_path / f"model_{tag}.ckpt"
        assert cli.main(["simulate", "--config", str(sim_cfg), "--out", str(ds_dir)]) == 0
        assert cli.main(
            ["train-dta", "--data", str(ds_dir), "--config", str(train_cfg),
             "--out", str(ckpt)]
        ) == 0
        outs.append((ds_dir, ckpt))
    (d1, c1), (d2, c2) = outs
    for name in ("data.csv", "oracle.csv", "counterfactual.csv", "manifest.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    assert c1.read_bytes() == c2.read_bytes()
    assert (tmp_path / "model_a.ckpt.history.csv").read_bytes() == (
        tmp_path / "model_b.ckpt.history.csv"
    ).read_bytes()


def test_determinism_experiment(tmp_path):
    import json

    doc = {
        "gamma_grid": [0.5],
        "n_datasets": 1,
        "sim": {"N": 60, "T": 8, "r": 2, "p": 4, "k": 1, "h": 2, "tau_cf": 3},
        "tau": 3,
        "methods": ["conf_msm", "deconf_msm"],
        "search_iterations": 1,
        "grid": {"batch_size": [16], "learning_rate": [0.01], "dropout_rate": [0.0],
                 "theta": [1.0], "alpha": [1.0], "p_z": [2]},
        "dta_epochs": 2,
        "rmsn": {"hidden_dim": 4, "propensity_epochs": 1, "outcome_epochs": 1},
    }
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(doc))
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    for out in (out1, out2):
        assert cli.main(["experiment", "--config", str(cfg), "--out", str(out)]) == 0

    # every numeric result is byte-identical across independent runs; the
    # recorded wall-clock column is the one legitimately varying field
    for name in ("summary.csv", "plotdata.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def strip_runtime(path):
        rows = [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]
        return "\n".join(rows)

    assert strip_runtime(out1 / "results.csv") == strip_runtime(out2 / "results.csv")

    # re-running into the same directory reuses the completion records and
    # rewrites every file with identical bytes, wall clock included
    before = {n: (out1 / n).read_bytes()
              for n in ("results.csv", "summary.csv", "plotdata.csv")}
    assert cli.main(["experiment", "--config", str(cfg), "--out", str(out1)]) == 0
    after = {n: (out1 / n).read_bytes()
             for n in ("results.csv", "summary.csv", "plotdata.csv")}
    assert before == after


# ---------------------------------------------------------------------------
# criterion 8: counterfactual consistency


def test_counterfactual_consistency():
    cfg = SimConfig(N=50, T=12, r=3, p=4, k=2, h=3, tau_cf=4, seed=29)
    ds, params = simulate(cfg)
    anchor = cfg.T - cfg.tau_cf + 1
    a0 = anchor - 1

    class FactualPlanRng:
        def random(self, size):
            return np.where(ds.a[:, a0 : a0 + size[1]], 0.25, 0.75)

    cf = simulate_counterfactuals(cfg, params, ds, rng=FactualPlanRng())
    assert np.array_equal(cf.cf_a, ds.a[:, a0 : a0 + cfg.tau_cf])
    assert np.array_equal(cf.cf_y, ds.y[:, a0 : a0 + cfg.tau_cf])


# ---------------------------------------------------------------------------
# criterion 9: real-data experiment is out of scope


def test_real_data_out_of_scope_loader_exercised(tmp_path):
    """The MIMIC-III clinical benchmark is NOT reproduced here: the data
    is access-restricted and cannot ship with this repository. The
    generic trajectory loader that a real extract would flow through is
    exercised on synthetic fixtures instead (round trip + validation).
    """
    from dta.datafiles import read_dataset, validate_dataset, write_dataset

    cfg = SimConfig(N=8, T=5, r=2, p=6, k=2, h=2, tau_cf=2, seed=77)
    ds, params = simulate(cfg)
    ds = simulate_counterfactuals(cfg, params, ds)
    path = tmp_path / "fixture"
    write_dataset(ds, path, seed_info={"seed": cfg.seed})
    manifest = validate_dataset(path)
    assert manifest["p"] == 6
    loaded = read_dataset(path)
    assert np.array_equal(loaded.x, ds.x)
    assert np.array_equal(loaded.cf_y, ds.cf_y)
