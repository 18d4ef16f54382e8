"""Dataset and run-config file formats.

A dataset on disk is a directory of delimited text tables plus a JSON
manifest:

* ``data.csv``: ``patient_id,t,x_1..x_p,a_1..a_k,y`` (one row per patient
  step, ``t`` 1-based)
* ``oracle.csv`` (optional): true confounders and their noise draws,
  ``patient_id,t,z_1..z_r,eta_1..eta_r``
* ``counterfactual.csv`` (optional): branched treatment plans and
  outcomes, ``patient_id,step,cf_a_1..cf_a_k,cf_y``
* ``manifest.json``: dims, presence flags, format version, seed
  provenance

Tables are text so runs are auditable and diffable; floats are written
with ``repr`` so round trips are lossless. All writes go through a
temp-file rename, so a crashed writer never leaves a half-written table.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os

import numpy as np

from .errors import ConfigError, FormatError, ParseError
from .harness import ExperimentConfig, HyperGrid
from .model import DtaHyperparams
from .outcome_models import RmsnHyperparams
from .simgen import SimConfig, TrajectoryDataset

log = logging.getLogger("dta")

FORMAT_VERSION = 1

MAIN_TABLE = "data.csv"
ORACLE_TABLE = "oracle.csv"
CF_TABLE = "counterfactual.csv"
MANIFEST = "manifest.json"


def _fmt(v: float) -> str:
    return repr(float(v))


def _atomic_write(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _render_csv(header, rows):
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_dataset(dataset: TrajectoryDataset, path, seed_info=None):
    """Serialize a trajectory dataset into directory ``path``."""
    N, T, p = dataset.x.shape
    k = dataset.a.shape[2]
    os.makedirs(path, exist_ok=True)

    header = (
        ["patient_id", "t"]
        + [f"x_{j + 1}" for j in range(p)]
        + [f"a_{l + 1}" for l in range(k)]
        + ["y"]
    )
    rows = []
    for i in range(N):
        for t in range(T):
            rows.append(
                [i, t + 1]
                + [_fmt(v) for v in dataset.x[i, t]]
                + [int(v) for v in dataset.a[i, t]]
                + [_fmt(dataset.y[i, t])]
            )
    _atomic_write(os.path.join(path, MAIN_TABLE), _render_csv(header, rows))

    has_oracle = dataset.z is not None and dataset.eta is not None
    r = dataset.z.shape[2] if has_oracle else None
    if has_oracle:
        header = (
            ["patient_id", "t"]
            + [f"z_{j + 1}" for j in range(r)]
            + [f"eta_{j + 1}" for j in range(r)]
        )
        rows = [
            [i, t + 1]
            + [_fmt(v) for v in dataset.z[i, t]]
            + [_fmt(v) for v in dataset.eta[i, t]]
            for i in range(N)
            for t in range(T)
        ]
        _atomic_write(os.path.join(path, ORACLE_TABLE), _render_csv(header, rows))

    has_cf = dataset.cf_a is not None and dataset.cf_y is not None
    if has_cf:
        tau = dataset.cf_a.shape[1]
        header = (
            ["patient_id", "step"]
            + [f"cf_a_{l + 1}" for l in range(k)]
            + ["cf_y"]
        )
        rows = [
            [i, s + 1]
            + [int(v) for v in dataset.cf_a[i, s]]
            + [_fmt(dataset.cf_y[i, s])]
            for i in range(N)
            for s in range(tau)
        ]
        _atomic_write(os.path.join(path, CF_TABLE), _render_csv(header, rows))

    manifest = {
        "format_version": FORMAT_VERSION,
        "N": N,
        "T": T,
        "p": p,
        "k": k,
        "r": r,
        "has_oracle": has_oracle,
        "has_counterfactuals": has_cf,
        "anchor_t": dataset.anchor_t,
        "tau_cf": dataset.cf_a.shape[1] if has_cf else None,
        "seed_info": seed_info,
    }
    _atomic_write(
        os.path.join(path, MANIFEST),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _parse_float(token, path, line_no, col):
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"{path}: column {col!r} is not a number", line=line_no)
    if not np.isfinite(v):
        raise ParseError(f"{path}: non-finite value in column {col!r}", line=line_no)
    return v


def _parse_int(token, path, line_no, col):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"{path}: column {col!r} is not an integer", line=line_no)


def _read_table(path, expected_header):
    """Parse a delimited table; returns rows of string tokens."""
    if not os.path.exists(path):
        raise ParseError(f"missing table {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1)
        if header != expected_header:
            raise ParseError(
                f"{path}: header mismatch, expected {','.join(expected_header)}",
                line=1,
            )
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise ParseError(
                    f"{path}: expected {len(expected_header)} columns, got {len(row)}",
                    line=line_no,
                )
            rows.append((line_no, row))
    return rows


def _load_manifest(path):
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest {mpath}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath}: invalid JSON ({exc})")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{mpath}: unrecognized format version {version!r} "
            f"(this reader supports {FORMAT_VERSION})"
        )
    for key in ("N", "T", "p", "k", "has_oracle", "has_counterfactuals"):
        if key not in manifest:
            raise FormatError(f"{mpath}: manifest is missing {key!r}")
    return manifest


def read_dataset(path) -> TrajectoryDataset:
    """Parse and validate a dataset directory written by ``write_dataset``."""
    manifest = _load_manifest(path)
    N, T, p, k = (manifest[key] for key in ("N", "T", "p", "k"))

    main_path = os.path.join(path, MAIN_TABLE)
    header = (
        ["patient_id", "t"]
        + [f"x_{j + 1}" for j in range(p)]
        + [f"a_{l + 1}" for l in range(k)]
        + ["y"]
    )
    rows = _read_table(main_path, header)
    if len(rows) != N * T:
        raise FormatError(
            f"{main_path}: manifest declares {N * T} rows, table has {len(rows)}"
        )
    x = np.zeros((N, T, p))
    a = np.zeros((N, T, k))
    y = np.zeros((N, T))
    for line_no, row in rows:
        i = _parse_int(row[0], main_path, line_no, "patient_id")
        t = _parse_int(row[1], main_path, line_no, "t")
        if not (0 <= i < N and 1 <= t <= T):
            raise ParseError(
                f"{main_path}: patient_id/t ({i},{t}) outside declared dims",
                line=line_no,
            )
        for j in range(p):
            x[i, t - 1, j] = _parse_float(row[2 + j], main_path, line_no, f"x_{j + 1}")
        for l in range(k):
            tok = row[2 + p + l]
            if tok not in ("0", "1"):
                raise ParseError(
                    f"{main_path}: treatment a_{l + 1} must be 0 or 1, got {tok!r}",
                    line=line_no,
                )
            a[i, t - 1, l] = float(tok)
        y[i, t - 1] = _parse_float(row[2 + p + k], main_path, line_no, "y")

    z = eta = cf_a = cf_y = None
    if manifest["has_oracle"]:
        r = manifest.get("r")
        if not r:
            raise FormatError(f"{path}: has_oracle set but r missing from manifest")
        opath = os.path.join(path, ORACLE_TABLE)
        header = (
            ["patient_id", "t"]
            + [f"z_{j + 1}" for j in range(r)]
            + [f"eta_{j + 1}" for j in range(r)]
        )
        orows = _read_table(opath, header)
        if len(orows) != N * T:
            raise FormatError(f"{opath}: expected {N * T} rows, got {len(orows)}")
        z = np.zeros((N, T, r))
        eta = np.zeros((N, T, r))
        for line_no, row in orows:
            i = _parse_int(row[0], opath, line_no, "patient_id")
            t = _parse_int(row[1], opath, line_no, "t")
            if not (0 <= i < N and 1 <= t <= T):
                raise ParseError(f"{opath}: row outside declared dims", line=line_no)
            for j in range(r):
                z[i, t - 1, j] = _parse_float(row[2 + j], opath, line_no, f"z_{j + 1}")
                eta[i, t - 1, j] = _parse_float(
                    row[2 + r + j], opath, line_no, f"eta_{j + 1}"
                )

    if manifest["has_counterfactuals"]:
        tau = manifest.get("tau_cf")
        if not tau:
            raise FormatError(f"{path}: has_counterfactuals set but tau_cf missing")
        cpath = os.path.join(path, CF_TABLE)
        header = (
            ["patient_id", "step"]
            + [f"cf_a_{l + 1}" for l in range(k)]
            + ["cf_y"]
        )
        crows = _read_table(cpath, header)
        if len(crows) != N * tau:
            raise FormatError(f"{cpath}: expected {N * tau} rows, got {len(crows)}")
        cf_a = np.zeros((N, tau, k))
        cf_y = np.zeros((N, tau))
        for line_no, row in crows:
            i = _parse_int(row[0], cpath, line_no, "patient_id")
            s = _parse_int(row[1], cpath, line_no, "step")
            if not (0 <= i < N and 1 <= s <= tau):
                raise ParseError(f"{cpath}: row outside declared dims", line=line_no)
            for l in range(k):
                tok = row[2 + l]
                if tok not in ("0", "1"):
                    raise ParseError(
                        f"{cpath}: treatment cf_a_{l + 1} must be 0 or 1, got {tok!r}",
                        line=line_no,
                    )
                cf_a[i, s - 1, l] = float(tok)
            cf_y[i, s - 1] = _parse_float(row[2 + k], cpath, line_no, "cf_y")

    return TrajectoryDataset(
        x=x, a=a, y=y, z=z, eta=eta, cf_a=cf_a, cf_y=cf_y,
        anchor_t=manifest.get("anchor_t"),
    )


def validate_dataset(path):
    """Raise on any invariant violation; returns the parsed manifest."""
    manifest = _load_manifest(path)
    read_dataset(path)
    return manifest


# ---------------------------------------------------------------------------
# run configuration files


def _build_from_doc(cls, doc, context):
    """Instantiate dataclass ``cls`` from a plain dict: unknown keys are
    rejected, absent keys fall back to the dataclass default with a logged
    notice, absent keys without a default are an error."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(doc).__name__}")
    spec_fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(spec_fields)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in spec_fields.items():
        if name in doc:
            kwargs[name] = doc[name]
        elif f.default is not dataclasses.MISSING:
            log.info("%s: %s not given, using default %r", context, name, f.default)
        elif f.default_factory is not dataclasses.MISSING:
            log.info("%s: %s not given, using default", context, name)
        else:
            raise ConfigError(f"{context}: missing required key {name!r}")
    return cls(**kwargs)


def parse_sim_config(doc) -> SimConfig:
    return _build_from_doc(SimConfig, doc, "sim config")


def parse_hyper_grid(doc) -> HyperGrid:
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in dict(doc).items()}
    return _build_from_doc(HyperGrid, doc, "hyperparameter grid")


def parse_dta_hyperparams(doc) -> DtaHyperparams:
    return _build_from_doc(DtaHyperparams, doc, "training hyperparameters")


def parse_rmsn_hyperparams(doc) -> RmsnHyperparams:
    return _build_from_doc(RmsnHyperparams, doc, "outcome network hyperparameters")


def parse_experiment_config(doc) -> ExperimentConfig:
    doc = dict(doc)
    if "sim" in doc:
        doc["sim"] = parse_sim_config(doc["sim"])
    if "grid" in doc:
        doc["grid"] = parse_hyper_grid(doc["grid"])
    if "rmsn" in doc:
        doc["rmsn"] = parse_rmsn_hyperparams(doc["rmsn"])
    for key in ("gamma_grid", "methods", "split_fractions"):
        if key in doc and isinstance(doc[key], list):
            doc[key] = tuple(doc[key])
    return _build_from_doc(ExperimentConfig, doc, "experiment config")


def load_run_config(path):
    """Read a JSON run-config document from disk."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})", line=exc.lineno)
