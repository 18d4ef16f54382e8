"""Downstream treatment-effect outcome models.

Both models predict the outcome tau steps past an anchor, given the
patient history up to the anchor and a planned treatment sequence, and
both reweight their outcome stage with stabilized inverse-probability-of-
treatment weights (probability of the observed treatments given past
treatments, divided by the probability given past treatments plus
covariates, multiplied over time and truncated at configurable
percentiles).

The covariates can come from three interchangeable sources: the raw noisy
proxies ("confounded"), the learned hidden embedding ("deconfounded"), or
the simulator's true confounders ("oracle").

* MSM: pooled logistic propensity models fitted by IRLS and a weighted
  linear outcome regression.
* Simplified RMSN: LSTM propensity networks (independent per-treatment
  Bernoulli heads), then an LSTM encoder over the history and an LSTM
  decoder driven by the planned treatments, trained with weighted squared
  error over the tau-step rollout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FitError, ShapeError, TrainingError
from .model import DtaModel, embed_dataset
from .nn.lstm import LstmCellParams, lstm_sequence
from .nn.optim import OptimizerState, adam_update, clip_global_norm
from .nn.tensor import Tensor, backward, concat, reshape, softplus, square, tmean, transpose
from .simgen import TrajectoryDataset

SOURCES = ("proxies", "embedding", "oracle")


@dataclass
class CovariateSource:
    """Per-step covariate tensor (N, T, d) plus which source produced it."""

    selector: str
    values: np.ndarray

    def __post_init__(self):
        if self.selector not in SOURCES:
            raise ConfigError(f"unknown covariate source {self.selector!r}")
        if self.values.ndim != 3:
            raise ShapeError("covariate tensor must be (N, T, d)")

    @property
    def dim(self):
        return self.values.shape[2]

    @classmethod
    def from_dataset(
        cls, dataset: TrajectoryDataset, selector: str, model: DtaModel | None = None
    ) -> "CovariateSource":
        if selector == "proxies":
            return cls(selector, dataset.x)
        if selector == "oracle":
            if dataset.z is None:
                raise ConfigError("dataset has no oracle confounders")
            return cls(selector, dataset.z)
        if selector == "embedding":
            if model is None:
                raise ConfigError("embedding source needs a trained model")
            return cls(selector, embed_dataset(model, dataset))
        raise ConfigError(f"unknown covariate source {selector!r}")


@dataclass
class PredictionRequest:
    """History prefix through the anchor plus a planned treatment sequence.

    ``covariates`` has one row per step through the anchor; ``treatments``
    is one row shorter (the anchor-step treatment belongs to the plan).
    """

    covariates: np.ndarray  # (t, d)
    treatments: np.ndarray  # (t - 1, k)
    plan: np.ndarray  # (tau, k), binary

    def __post_init__(self):
        if self.covariates.shape[0] != self.treatments.shape[0] + 1:
            raise ShapeError("covariates must extend one step past treatments")
        if not np.isin(self.plan, (0.0, 1.0)).all():
            raise ConfigError("planned treatments must be binary")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    @property
    def horizon(self):
        return self.plan.shape[0]


# ---------------------------------------------------------------------------
# regression primitives


def logistic_fit(X, y, max_iter=100, tol=1e-8):
    """Logistic regression by iteratively-reweighted least squares.

    Stops when the log-likelihood improves by less than ``tol``; raises
    FitError if it never does within ``max_iter``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    beta = np.zeros(q)
    prev_ll = -np.inf
    for _ in range(max_iter):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        w = np.maximum(p * (1.0 - p), 1e-10)
        grad = X.T @ (y - p)
        H = (X * w[:, None]).T @ X + 1e-10 * np.eye(q)
        beta = beta + np.linalg.solve(H, grad)
        if abs(ll - prev_ll) < tol:
            return beta
        prev_ll = ll
    raise FitError(f"logistic fit did not converge in {max_iter} iterations")


def logistic_predict(beta, X):
    return 1.0 / (1.0 + np.exp(-(np.asarray(X) @ beta)))


def weighted_linear_fit(X, y, w):
    """Least squares of y on X with observation weights w.

    With unit weights this is the ordinary least-squares solution; the
    returned coefficients satisfy the weighted normal equations.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise FitError("observation weights must be positive and finite")
    sw = np.sqrt(w)
    coefs, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coefs


def truncate_weights(w, low_pct=1.0, high_pct=99.0):
    lo = np.percentile(w, low_pct)
    hi = np.percentile(w, high_pct)
    return np.clip(w, lo, hi)


# ---------------------------------------------------------------------------
# marginal structural model


@dataclass
class MsmModel:
    tau: int
    selector: str
    cov_dim: int
    k: int
    num_coefs: np.ndarray  # (k, k + 1): [a_{t-1}, intercept]
    den_coefs: np.ndarray  # (k, d + k + 1): [cov_t, a_{t-1}, intercept]
    outcome_coefs: np.ndarray  # [plan (tau*k), cov_t, a_{t-1}, intercept]
    truncation: tuple[float, float] = (1.0, 99.0)


def _propensity_rows(a, cov=None):
    """Pooled (patient, step) design/target rows for the propensity fits.

    Rows cover steps with an available treatment lag. Returns (X, targets)
    with targets (rows, k).
    """
    N, T, k = a.shape
    lag = a[:, : T - 1].reshape(-1, k)
    cur = a[:, 1:].reshape(-1, k)
    cols = [lag, np.ones((len(lag), 1))]
    if cov is not None:
        cols.insert(0, cov[:, 1:].reshape(-1, cov.shape[2]))
    return np.concatenate(cols, axis=1), cur


def _observed_prob(p, a):
    """Probability assigned to the observed binary treatment."""
    return p * a + (1.0 - p) * (1.0 - a)


def stabilized_weights_msm(model: MsmModel, a, cov, last_step):
    """Cumulative stabilized weight per patient over steps 1..last_step."""
    N, T, k = a.shape
    w = np.ones(N)
    for s in range(1, last_step + 1):
        X_num = np.concatenate([a[:, s - 1], np.ones((N, 1))], axis=1)
        X_den = np.concatenate([cov[:, s], a[:, s - 1], np.ones((N, 1))], axis=1)
        for l in range(k):
            p_num = logistic_predict(model.num_coefs[l], X_num)
            p_den = logistic_predict(model.den_coefs[l], X_den)
            w *= _observed_prob(p_num, a[:, s, l]) / _observed_prob(p_den, a[:, s, l])
    return w


def _msm_anchors(T, tau):
    # 0-based anchors s: need a lag (s >= 1) and an observed outcome tau
    # steps out (s + tau - 1 <= T - 1)
    anchors = list(range(1, T - tau + 1))
    if not anchors:
        raise ConfigError(f"no usable anchors for T={T}, tau={tau}")
    return anchors


def _msm_features(cov, a, plan, s):
    """Outcome-stage design rows for anchor step s with plan (N, tau, k)."""
    N = cov.shape[0]
    return np.concatenate(
        [plan.reshape(N, -1), cov[:, s], a[:, s - 1], np.ones((N, 1))], axis=1
    )


def fit_msm(
    dataset: TrajectoryDataset,
    source: CovariateSource,
    tau: int,
    truncation=(1.0, 99.0),
) -> MsmModel:
    """Fit propensity models, stabilized weights, and the outcome stage."""
    a, y, cov = dataset.a, dataset.y, source.values
    N, T, k = a.shape
    anchors = _msm_anchors(T, tau)

    X_num, targets = _propensity_rows(a)
    X_den, _ = _propensity_rows(a, cov)
    num_coefs = np.stack([logistic_fit(X_num, targets[:, l]) for l in range(k)])
    den_coefs = np.stack([logistic_fit(X_den, targets[:, l]) for l in range(k)])

    model = MsmModel(
        tau=tau,
        selector=source.selector,
        cov_dim=source.dim,
        k=k,
        num_coefs=num_coefs,
        den_coefs=den_coefs,
        outcome_coefs=np.zeros(0),
        truncation=tuple(truncation),
    )

    rows_X, rows_y, rows_w = [], [], []
    for s in anchors:
        plan = a[:, s : s + tau]
        rows_X.append(_msm_features(cov, a, plan, s))
        rows_y.append(y[:, s + tau - 1])
        # weights cover every treatment entering the regression, i.e. up to
        # the last planned step
        rows_w.append(stabilized_weights_msm(model, a, cov, s + tau - 1))
    X = np.concatenate(rows_X)
    yv = np.concatenate(rows_y)
    w = truncate_weights(np.concatenate(rows_w), *model.truncation)
    if np.max(w) == np.min(w):
        raise FitError("degenerate stabilized weights: no spread after truncation")
    model.outcome_coefs = weighted_linear_fit(X, yv, w)
    return model


def predict_msm(model: MsmModel, req: PredictionRequest) -> float:
    """Linear evaluation of the outcome stage for one request."""
    if req.horizon != model.tau:
        raise ConfigError(f"request horizon {req.horizon} != fitted tau {model.tau}")
    if req.covariates.shape[1] != model.cov_dim:
        raise ShapeError(
            f"covariate dim {req.covariates.shape[1]} != fitted {model.cov_dim}"
        )
    feats = np.concatenate(
        [req.plan.ravel(), req.covariates[-1], req.treatments[-1], [1.0]]
    )
    return float(feats @ model.outcome_coefs)


def predict_msm_batch(model: MsmModel, cov, a, plan) -> np.ndarray:
    """Vectorized predict at anchor = last covariate step.

    cov (N, t, d), a (N, t - 1, k), plan (N, tau, k).
    """
    N = cov.shape[0]
    feats = np.concatenate(
        [plan.reshape(N, -1), cov[:, -1], a[:, -1], np.ones((N, 1))], axis=1
    )
    return feats @ model.outcome_coefs


# ---------------------------------------------------------------------------
# simplified recurrent marginal structural network


@dataclass(frozen=True)
class RmsnHyperparams:
    hidden_dim: int = 16
    learning_rate: float = 0.01
    batch_size: int = 256
    propensity_epochs: int = 40
    outcome_epochs: int = 60
    seed: int = 0


@dataclass
class RmsnModel:
    tau: int
    selector: str
    cov_dim: int
    k: int
    hyperparams: RmsnHyperparams
    # per-feature covariate standardization fitted on the training split
    # (proxy noise is large, so raw inputs slow the networks down badly)
    cov_mean: np.ndarray  # (d,)
    cov_scale: np.ndarray  # (d,)
    # propensity networks: input a_{t-1} (numerator) or [cov_t; a_{t-1}]
    num_lstm: LstmCellParams
    num_head_w: np.ndarray  # (k, H)
    num_head_b: np.ndarray  # (k,)
    den_lstm: LstmCellParams
    den_head_w: np.ndarray
    den_head_b: np.ndarray
    # outcome networks
    enc_lstm: LstmCellParams  # input [cov_t; a_{t-1}]
    dec_lstm: LstmCellParams  # input [plan_t; encoder state]
    dec_head_w: np.ndarray  # (1, H)
    dec_head_b: np.ndarray  # (1,)


def _lstm_params_dict(prefix, cell):
    return {f"{prefix}.w_x": cell.w_x, f"{prefix}.w_h": cell.w_h, f"{prefix}.b": cell.bias}


def _train_adam(params, loss_fn, epochs, N, batch_size, lr, rng, what):
    """Generic minibatch loop: loss_fn(param tensors, patient index) -> Tensor."""
    opt = OptimizerState(learning_rate=lr)
    for epoch in range(epochs):
        order = rng.permutation(N)
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            pt = {n: Tensor(v, requires_grad=True, name=n) for n, v in params.items()}
            loss = loss_fn(pt, idx)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite {what} loss at epoch {epoch + 1}")
            backward(loss)
            grads = {n: pt[n].grad for n in params}
            clip_global_norm(grads, 5.0)
            adam_update(opt, params, grads)


def _propensity_loss(pt, prefix, inputs, targets, idx):
    """Bernoulli cross-entropy of per-treatment sigmoid heads."""
    x = inputs[idx]
    t = targets[idx]
    h = lstm_sequence(pt[f"{prefix}.w_x"], pt[f"{prefix}.w_h"], pt[f"{prefix}.b"], Tensor(x))
    N, T, H = h.value.shape
    k = t.shape[2]
    rows = reshape(h, (N * T, H))
    logits = rows @ transpose(pt[f"{prefix}.head_w"]) + pt[f"{prefix}.head_b"]
    logits = reshape(logits, (N, T, k))
    # softplus(z) - a*z == -(a log p + (1-a) log(1-p)) for p = sigmoid(z)
    return tmean(softplus(logits) - Tensor(t) * logits)


def _propensity_probs(cell, head_w, head_b, inputs):
    from .nn.backend import kernels

    h, _ = kernels.lstm_forward(np.ascontiguousarray(inputs), cell.w_x, cell.w_h, cell.bias)
    logits = h @ head_w.T + head_b
    return 1.0 / (1.0 + np.exp(-logits))


def stabilized_weights_rmsn(model: RmsnModel, a, cov, last_step):
    """Cumulative stabilized weight per patient over steps 1..last_step.

    ``cov`` is raw (unstandardized); the model's fitted standardization is
    applied here.
    """
    N, T, k = a.shape
    cov = (cov - model.cov_mean) / model.cov_scale
    lag = np.concatenate([np.zeros((N, 1, k)), a[:, :-1]], axis=1)
    p_num = _propensity_probs(model.num_lstm, model.num_head_w, model.num_head_b, lag)
    p_den = _propensity_probs(
        model.den_lstm, model.den_head_w, model.den_head_b,
        np.concatenate([cov, lag], axis=2),
    )
    w = np.ones(N)
    for s in range(1, last_step + 1):
        for l in range(k):
            w *= _observed_prob(p_num[:, s, l], a[:, s, l]) / _observed_prob(
                p_den[:, s, l], a[:, s, l]
            )
    return w


def _rmsn_history(cov, a, s0):
    """Encoder input [cov_s; a_{s-1}] for steps 0..s0 (anchor inclusive)."""
    N, _, k = a.shape
    lag = np.concatenate([np.zeros((N, 1, k)), a[:, :s0]], axis=1)
    return np.concatenate([cov[:, : s0 + 1], lag], axis=2)


def fit_rmsn(
    dataset: TrajectoryDataset,
    source: CovariateSource,
    tau: int,
    hp: RmsnHyperparams = RmsnHyperparams(),
    truncation=(1.0, 99.0),
) -> RmsnModel:
    """Two-stage fit: propensity networks first, then the weighted
    encoder/decoder outcome network. Seed-deterministic."""
    a, y, cov = dataset.a, dataset.y, source.values
    N, T, k = a.shape
    d = source.dim
    if T - tau < 1:
        raise ConfigError(f"tau={tau} leaves no history for T={T}")
    rng = np.random.default_rng(hp.seed)
    H = hp.hidden_dim
    sh = 1.0 / np.sqrt(H)

    cov_raw = cov
    cov_mean = cov.reshape(-1, d).mean(axis=0)
    cov_scale = np.maximum(cov.reshape(-1, d).std(axis=0), 1e-8)
    cov = (cov - cov_mean) / cov_scale

    model = RmsnModel(
        tau=tau,
        selector=source.selector,
        cov_dim=d,
        k=k,
        hyperparams=hp,
        cov_mean=cov_mean,
        cov_scale=cov_scale,
        num_lstm=LstmCellParams.init(k, H, rng),
        num_head_w=rng.uniform(-sh, sh, size=(k, H)),
        num_head_b=np.zeros(k),
        den_lstm=LstmCellParams.init(d + k, H, rng),
        den_head_w=rng.uniform(-sh, sh, size=(k, H)),
        den_head_b=np.zeros(k),
        enc_lstm=LstmCellParams.init(d + k, H, rng),
        dec_lstm=LstmCellParams.init(k + H, H, rng),
        dec_head_w=rng.uniform(-sh, sh, size=(1, H)),
        dec_head_b=np.zeros(1),
    )

    # stage 1: propensity networks (binary cross-entropy)
    lag = np.concatenate([np.zeros((N, 1, k)), a[:, :-1]], axis=1)
    num_params = _lstm_params_dict("num", model.num_lstm)
    num_params["num.head_w"] = model.num_head_w
    num_params["num.head_b"] = model.num_head_b
    _train_adam(
        num_params,
        lambda pt, idx: _propensity_loss(pt, "num", lag, a, idx),
        hp.propensity_epochs, N, hp.batch_size, hp.learning_rate, rng, "propensity",
    )
    den_inputs = np.concatenate([cov, lag], axis=2)
    den_params = _lstm_params_dict("den", model.den_lstm)
    den_params["den.head_w"] = model.den_head_w
    den_params["den.head_b"] = model.den_head_b
    _train_adam(
        den_params,
        lambda pt, idx: _propensity_loss(pt, "den", den_inputs, a, idx),
        hp.propensity_epochs, N, hp.batch_size, hp.learning_rate, rng, "propensity",
    )

    # stage 2: weighted seq2seq outcome network at the default anchor
    s0 = T - tau
    weights = truncate_weights(
        stabilized_weights_rmsn(model, a, cov_raw, s0 + tau - 1), *truncation
    )
    hist = _rmsn_history(cov, a, s0)
    plan = a[:, s0 : s0 + tau]
    targets = y[:, s0 : s0 + tau]

    out_params = _lstm_params_dict("enc", model.enc_lstm)
    out_params.update(_lstm_params_dict("dec", model.dec_lstm))
    out_params["dec.head_w"] = model.dec_head_w
    out_params["dec.head_b"] = model.dec_head_b

    def outcome_loss_fn(pt, idx):
        pred = _rmsn_rollout_graph(pt, hist[idx], plan[idx], tau)
        err = square(pred - Tensor(targets[idx]))
        per_patient = tmean(err, axis=1)
        return tmean(Tensor(weights[idx]) * per_patient)

    _train_adam(
        out_params, outcome_loss_fn,
        hp.outcome_epochs, N, hp.batch_size, hp.learning_rate, rng, "outcome",
    )
    return model


def _rmsn_rollout_graph(pt, hist, plan, tau):
    """Encoder over the history, decoder over the plan; returns (N, tau)."""
    h_enc = lstm_sequence(pt["enc.w_x"], pt["enc.w_h"], pt["enc.b"], Tensor(hist))
    N, _, H = h_enc.value.shape
    last = reshape(h_enc[:, -1, :], (N, 1, H))
    context = concat([last] * tau, axis=1)
    dec_in = concat([Tensor(plan), context], axis=2)
    h_dec = lstm_sequence(pt["dec.w_x"], pt["dec.w_h"], pt["dec.b"], dec_in)
    rows = reshape(h_dec, (N * tau, H))
    out = rows @ transpose(pt["dec.head_w"]) + pt["dec.head_b"]
    return reshape(out, (N, tau))


def predict_rmsn_batch(model: RmsnModel, cov, a, plan) -> np.ndarray:
    """Deterministic rollout; returns the full (N, tau) predicted path.

    cov (N, t, d) through the anchor, a (N, t - 1, k), plan (N, tau, k).
    """
    if plan.shape[1] > model.tau:
        raise ConfigError(f"horizon {plan.shape[1]} exceeds trained tau {model.tau}")
    N, t, _ = cov.shape
    cov = (cov - model.cov_mean) / model.cov_scale
    hist = np.concatenate(
        [cov, np.concatenate([np.zeros((N, 1, model.k)), a], axis=1)], axis=2
    )
    pt = {}
    for prefix, cell in (("enc", model.enc_lstm), ("dec", model.dec_lstm)):
        for n, v in _lstm_params_dict(prefix, cell).items():
            pt[n] = Tensor(v)
    pt["dec.head_w"] = Tensor(model.dec_head_w)
    pt["dec.head_b"] = Tensor(model.dec_head_b)
    return _rmsn_rollout_graph(pt, hist, plan, plan.shape[1]).value


def predict_rmsn(model: RmsnModel, req: PredictionRequest) -> np.ndarray:
    """Predicted outcome path for one request ((tau,) array)."""
    if req.covariates.shape[1] != model.cov_dim:
        raise ShapeError(
            f"covariate dim {req.covariates.shape[1]} != fitted {model.cov_dim}"
        )
    return predict_rmsn_batch(
        model, req.covariates[None], req.treatments[None], req.plan[None]
    )[0]
