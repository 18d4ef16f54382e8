"""Command-line surface.

Subcommands: simulate, train-dta, embed, fit-outcome, predict,
experiment, validate. Every command is deterministic given its inputs,
flags, and seeds; re-running overwrites outputs with identical bytes.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import harness
from .datafiles import (
    load_run_config,
    parse_dta_hyperparams,
    parse_experiment_config,
    parse_rmsn_hyperparams,
    parse_sim_config,
    read_dataset,
    validate_dataset,
    write_dataset,
)
from .errors import ConfigError, DtaError, FormatError
from .model import embed_dataset, load_model, save_model, train
from .outcome_models import (
    SOURCES,
    CovariateSource,
    MsmModel,
    PredictionRequest,
    RmsnHyperparams,
    RmsnModel,
    fit_msm,
    fit_rmsn,
    predict_msm,
    predict_rmsn,
)
from .simgen import SimConfig, simulate, simulate_counterfactuals

log = logging.getLogger("dta")


def _atomic_write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_table(path, header, rows):
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args):
    doc = load_run_config(args.config) if args.config else {}
    cfg = parse_sim_config(doc)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    dataset, params = simulate(cfg)
    dataset = simulate_counterfactuals(cfg, params, dataset)
    write_dataset(dataset, args.out, seed_info={"seed": cfg.seed})
    log.info("wrote dataset (%d patients, %d steps) to %s", cfg.N, cfg.T, args.out)
    return 0


def _cmd_train_dta(args):
    dataset = read_dataset(args.data)
    doc = load_run_config(args.config) if args.config else {}
    hp = parse_dta_hyperparams(doc)
    if args.seed is not None:
        hp = dataclasses.replace(hp, seed=args.seed)
    model, history = train(dataset, hp)
    save_model(model, args.out)
    history_path = args.history or args.out + ".history.csv"
    _write_table(
        history_path,
        ["epoch", "reconstruction", "outcome", "penalty", "total"],
        [
            [e + 1, repr(b.l_x), repr(b.l_y), repr(b.penalty), repr(b.total)]
            for e, b in enumerate(history)
        ],
    )
    log.info("wrote checkpoint %s and history %s", args.out, history_path)
    return 0


def _cmd_embed(args):
    model = load_model(args.model)
    dataset = read_dataset(args.data)
    z = embed_dataset(model, dataset)
    N, T, p_z = z.shape
    _write_table(
        args.out,
        ["patient_id", "t"] + [f"z_{j + 1}" for j in range(p_z)],
        [
            [i, t + 1] + [repr(float(v)) for v in z[i, t]]
            for i in range(N)
            for t in range(T)
        ],
    )
    return 0


def _outcome_model_to_doc(model):
    doc = {}
    for f in dataclasses.fields(model):
        v = getattr(model, f.name)
        if isinstance(v, np.ndarray):
            doc[f.name] = {"__array__": v.tolist(), "shape": list(v.shape)}
        elif hasattr(v, "w_x"):  # recurrent cell parameters
            doc[f.name] = {
                "__lstm__": {
                    n: {"__array__": a.tolist(), "shape": list(a.shape)}
                    for n, a in (("w_x", v.w_x), ("w_h", v.w_h), ("bias", v.bias))
                },
                "input_dim": v.input_dim,
                "hidden_dim": v.hidden_dim,
            }
        elif dataclasses.is_dataclass(v):
            doc[f.name] = vars(v).copy()
        elif isinstance(v, tuple):
            doc[f.name] = list(v)
        else:
            doc[f.name] = v
    return doc


def _doc_to_outcome_model(doc):
    from .nn.lstm import LstmCellParams

    family = doc.pop("family")
    cls = MsmModel if family == "msm" else RmsnModel

    def revive(f, v):
        if isinstance(v, dict) and "__array__" in v:
            return np.asarray(v["__array__"], dtype=np.float64).reshape(v["shape"])
        if isinstance(v, dict) and "__lstm__" in v:
            mats = {
                n: np.asarray(a["__array__"], dtype=np.float64).reshape(a["shape"])
                for n, a in v["__lstm__"].items()
            }
            return LstmCellParams(
                w_x=mats["w_x"], w_h=mats["w_h"], bias=mats["bias"],
                input_dim=v["input_dim"], hidden_dim=v["hidden_dim"],
            )
        if f.name == "hyperparams":
            return RmsnHyperparams(**v)
        if f.name == "truncation":
            return tuple(v)
        return v

    kwargs = {f.name: revive(f, doc[f.name]) for f in dataclasses.fields(cls)}
    return cls(**kwargs)


def save_outcome_model(model, path):
    """JSON serialization for a fitted outcome model (either family)."""
    family = "msm" if isinstance(model, MsmModel) else "rmsn"
    doc = {"family": family, **_outcome_model_to_doc(model)}
    _atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_outcome_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})")
    if doc.get("family") not in ("msm", "rmsn"):
        raise FormatError(f"{path}: not a fitted outcome model")
    return _doc_to_outcome_model(doc)


def _cmd_fit_outcome(args):
    dataset = read_dataset(args.data)
    dta_model = load_model(args.model) if args.model else None
    source = CovariateSource.from_dataset(dataset, args.source, dta_model)
    if args.family == "msm":
        fitted = fit_msm(dataset, source, args.tau)
    else:
        doc = load_run_config(args.config) if args.config else {}
        hp = parse_rmsn_hyperparams(doc)
        if args.seed is not None:
            hp = dataclasses.replace(hp, seed=args.seed)
        fitted = fit_rmsn(dataset, source, args.tau, hp)
    save_outcome_model(fitted, args.out)
    return 0


def _cmd_predict(args):
    fitted = load_outcome_model(args.fitted)
    with open(args.request) as fh:
        doc = json.load(fh)
    req = PredictionRequest(
        covariates=np.asarray(doc["covariates"], dtype=np.float64),
        treatments=np.asarray(doc["treatments"], dtype=np.float64),
        plan=np.asarray(doc["plan"], dtype=np.float64),
    )
    if isinstance(fitted, MsmModel):
        values = [predict_msm(fitted, req)]
    else:
        values = [float(v) for v in predict_rmsn(fitted, req)]
    out = " ".join(repr(v) for v in values)
    if args.out:
        _atomic_write_text(args.out, out + "\n")
    else:
        print(out)
    return 0


def _cmd_experiment(args):
    if args.config:
        cfg = parse_experiment_config(load_run_config(args.config))
    elif args.profile == "desk":
        cfg = harness.desk_profile()
    elif args.profile == "paper":
        cfg = harness.paper_profile()
    else:
        raise ConfigError("experiment needs --config or --profile")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    result = harness.run_experiment(cfg, out_dir=args.out, workers=args.threads)
    harness.write_result_files(result, args.out)
    for (gamma, method), stats in sorted(result.summary.items()):
        log.info(
            "gamma=%g %s: rmse %.5f +/- %.5f over %d runs",
            gamma, method, stats["rmse_mean"], stats["rmse_sd"], stats["n_runs"],
        )
    return 0


def _cmd_validate(args):
    manifest = validate_dataset(args.data)
    log.info(
        "%s: valid (N=%d, T=%d, p=%d, k=%d)",
        args.data, manifest["N"], manifest["T"], manifest["p"], manifest["k"],
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dta",
        description="Deconfounding temporal autoencoder toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trajectory dataset")
    p.add_argument("--config", help="JSON simulation config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train-dta", help="train the autoencoder on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON hyperparameter config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=_cmd_train_dta)

    p = sub.add_parser("embed", help="write the hidden embedding for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="autoencoder checkpoint")
    p.add_argument("--out", required=True, help="embedding table CSV")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("fit-outcome", help="fit an outcome model against a source")
    p.add_argument("--data", required=True)
    p.add_argument("--family", required=True, choices=("msm", "rmsn"))
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--model", help="autoencoder checkpoint (embedding source)")
    p.add_argument("--tau", type=int, required=True, help="prediction horizon")
    p.add_argument("--config", help="JSON hyperparameter config (rmsn)")
    p.add_argument("--out", required=True, help="fitted-model JSON path")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_fit_outcome)

    p = sub.add_parser("predict", help="evaluate a fitted model on a request file")
    p.add_argument("--fitted", required=True, help="fitted-model JSON")
    p.add_argument("--request", required=True,
                   help="JSON with covariates, treatments, plan")
    p.add_argument("--out", help="write the prediction here instead of stdout")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("experiment", help="run the bias-reduction experiment grid")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--threads", type=int, default=1, help="worker pool size")
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("validate", help="check a dataset directory's invariants")
    p.add_argument("data", help="dataset directory")
    p.set_defaults(fn=_cmd_validate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DTA_LOG_LEVEL", "INFO"),
        format="%(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DtaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
