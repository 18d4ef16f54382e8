"""LSTM autoencoder with outcome head and causal KL regularization.

The encoder maps noisy proxies onto a low-dimensional embedding; the
decoder reconstructs the proxies and predicts the one-step-ahead outcome
from the decoder state concatenated with the current treatments. The
training loss combines reconstruction error, outcome error, and a penalty
that measures, per timestep and per treatment combination, the KL
divergence between two Gaussian fits of the predicted potential outcome:
one regression that may use the current treatment and one that may not.
Driving that divergence to zero makes predicted potential outcomes
conditionally independent of the current treatment given the embedding.

Gradients flow through the closed-form ridge regressions inside the
penalty; everything runs in float64 so the full loss gradient can be
checked against central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .nn.lstm import LstmCellParams, lstm_sequence
from .nn.optim import OptimizerState, adam_update, clip_global_norm
from .nn.tensor import (
    Tensor,
    backward,
    clip_min,
    concat,
    log,
    matmul,
    reshape,
    solve,
    sqrt,
    square,
    tmean,
    transpose,
)
from .simgen import TrajectoryDataset

RIDGE = 1e-6
SIGMA_FLOOR = 1e-4
GRAD_CLIP = 5.0
MAX_TREATMENTS = 10


@dataclass(frozen=True)
class LossWeights:
    theta: float = 1.0  # outcome-loss weight
    alpha: float = 1.0  # penalty weight

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.alpha)):
            raise ConfigError("loss weights must be finite")
        if self.theta < 0 or self.alpha < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    l_x: float
    l_y: float
    penalty: float
    total: float


@dataclass
class KlStats:
    """Twin-regression estimates per usable timestep and treatment combination.

    Index 1 is the regression with the current treatment among the
    regressors, index 2 the one without. Arrays are indexed
    [t - t_start, combo]; mu arrays carry the per-patient fitted means.
    """

    combos: np.ndarray  # (C, k)
    t_start: int  # first usable timestep (1-based)
    mu1: np.ndarray  # (T', C, N)
    sigma1: np.ndarray  # (T', C)
    mu2: np.ndarray  # (T', C, N)
    sigma2: np.ndarray  # (T', C)
    kl_hat: np.ndarray  # (T', C)


@dataclass(frozen=True)
class DtaHyperparams:
    p_z: int = 5
    dim_h: int | None = None  # default: ceil((p_z + p) / 2)
    batch_size: int = 128
    learning_rate: float = 0.001
    dropout_rate: float = 0.1
    theta: float = 1.0
    alpha: float = 1.0
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.p_z < 1:
            raise ConfigError("p_z must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def hidden_dim(self, p: int) -> int:
        return self.dim_h if self.dim_h is not None else math.ceil((self.p_z + p) / 2)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(theta=self.theta, alpha=self.alpha)


@dataclass
class DtaModel:
    encoder_lstm: LstmCellParams  # input p -> hidden dim_h
    w_hz: np.ndarray  # (p_z, dim_h)
    b_z: np.ndarray  # (p_z,)
    decoder_lstm: LstmCellParams  # input p_z -> hidden dim_h
    w_hx: np.ndarray  # (p, dim_h)
    b_x: np.ndarray  # (p,)
    w_hy: np.ndarray  # (1, dim_h + k)
    b_y: np.ndarray  # (1,)
    p: int
    k: int
    p_z: int
    dim_h: int
    dropout_rate: float = 0.0
    hyperparams: DtaHyperparams | None = None

    def param_dict(self) -> dict[str, np.ndarray]:
        """Live views of all learnable arrays (mutated by the optimizer)."""
        return {
            "enc.w_x": self.encoder_lstm.w_x,
            "enc.w_h": self.encoder_lstm.w_h,
            "enc.b": self.encoder_lstm.bias,
            "w_hz": self.w_hz,
            "b_z": self.b_z,
            "dec.w_x": self.decoder_lstm.w_x,
            "dec.w_h": self.decoder_lstm.w_h,
            "dec.b": self.decoder_lstm.bias,
            "w_hx": self.w_hx,
            "b_x": self.b_x,
            "w_hy": self.w_hy,
            "b_y": self.b_y,
        }


def init_model(p: int, k: int, hp: DtaHyperparams, rng: np.random.Generator) -> DtaModel:
    dim_h = hp.hidden_dim(p)
    enc = LstmCellParams.init(p, dim_h, rng)
    dec = LstmCellParams.init(hp.p_z, dim_h, rng)
    sz = 1.0 / np.sqrt(dim_h)
    sy = 1.0 / np.sqrt(dim_h + k)
    return DtaModel(
        encoder_lstm=enc,
        w_hz=rng.uniform(-sz, sz, size=(hp.p_z, dim_h)),
        b_z=np.zeros(hp.p_z),
        decoder_lstm=dec,
        w_hx=rng.uniform(-sz, sz, size=(p, dim_h)),
        b_x=np.zeros(p),
        w_hy=rng.uniform(-sy, sy, size=(1, dim_h + k)),
        b_y=np.zeros(1),
        p=p,
        k=k,
        p_z=hp.p_z,
        dim_h=dim_h,
        dropout_rate=hp.dropout_rate,
        hyperparams=hp,
    )


def treatment_combinations(k: int) -> np.ndarray:
    """All 2^k binary treatment vectors, ordered lexicographically."""
    if k > MAX_TREATMENTS:
        raise ConfigError(f"2^{k} treatment combinations is too many (k <= {MAX_TREATMENTS})")
    combos = np.array(
        [[(c >> (k - 1 - j)) & 1 for j in range(k)] for c in range(2**k)],
        dtype=np.float64,
    )
    return combos


# ---------------------------------------------------------------------------
# graph construction


def _params_to_tensors(params: dict[str, np.ndarray], requires_grad: bool):
    return {n: Tensor(v, requires_grad=requires_grad, name=n) for n, v in params.items()}


def _affine_rows(h: Tensor, W: Tensor, b: Tensor, out_dim: int) -> Tensor:
    """(N, T, F) @ W.T + b -> (N, T, out_dim)."""
    N, T, F = h.value.shape
    rows = reshape(h, (N * T, F))
    out = matmul(rows, transpose(W)) + b
    return reshape(out, (N, T, out_dim))


def _forward_graph(pt, x, a, combos, enc_mask=None, dec_mask=None):
    """Build encoder/decoder graph; returns (z, x_hat, y_hat, y_po list)."""
    N, T, _ = x.shape
    h_enc = lstm_sequence(pt["enc.w_x"], pt["enc.w_h"], pt["enc.b"], Tensor(x))
    if enc_mask is not None:
        h_enc = h_enc * Tensor(enc_mask)
    p_z = pt["w_hz"].value.shape[0]
    z = _affine_rows(h_enc, pt["w_hz"], pt["b_z"], p_z)

    h_dec = lstm_sequence(pt["dec.w_x"], pt["dec.w_h"], pt["dec.b"], z)
    if dec_mask is not None:
        h_dec = h_dec * Tensor(dec_mask)
    p = pt["w_hx"].value.shape[0]
    x_hat = _affine_rows(h_dec, pt["w_hx"], pt["b_x"], p)

    def outcome_head(a_seq):
        cat = concat([h_dec, Tensor(a_seq)], axis=2)
        out = _affine_rows(cat, pt["w_hy"], pt["b_y"], 1)
        return reshape(out, (N, T))

    y_hat = outcome_head(a)
    y_po = [
        outcome_head(np.broadcast_to(c, (N, T, len(c))).copy()) for c in combos
    ]
    return z, x_hat, y_hat, y_po


def _penalty_graph(z, a, y_po, combos, ridge=RIDGE, sigma_floor=SIGMA_FLOOR):
    """KL penalty over t = 2..T and all treatment combinations.

    ``z`` and the entries of ``y_po`` are graph tensors; ``a`` is the
    observed treatment array. Returns (penalty tensor, KlStats).
    """
    N, T, _ = z.value.shape
    if T < 2:
        raise ConfigError("causal penalty needs at least two timesteps")
    if N < 2:
        raise ConfigError("causal penalty needs at least two patients")
    C = len(combos)
    ones = np.ones((N, 1))
    floor_sq = sigma_floor**2

    stats = KlStats(
        combos=combos,
        t_start=2,
        mu1=np.zeros((T - 1, C, N)),
        sigma1=np.zeros((T - 1, C)),
        mu2=np.zeros((T - 1, C, N)),
        sigma2=np.zeros((T - 1, C)),
        kl_hat=np.zeros((T - 1, C)),
    )

    def fit(M, G, v):
        beta = solve(G, matmul(transpose(M), v))
        mu = matmul(M, beta)
        resid = v - mu
        sig = sqrt(clip_min(tmean(square(resid)), floor_sq))
        return mu, sig

    terms = []
    for t in range(1, T):
        # the full design (with a_t) and the reduced design (without) share
        # their Gram matrices across treatment combinations
        z_t, z_tm1 = z[:, t, :], z[:, t - 1, :]
        a_t, a_tm1 = a[:, t, :], a[:, t - 1, :]
        M1 = concat([z_t, z_tm1, Tensor(a_t), Tensor(a_tm1), Tensor(ones)], axis=1)
        M2 = concat([z_t, z_tm1, Tensor(a_tm1), Tensor(ones)], axis=1)
        G1 = matmul(transpose(M1), M1) + Tensor(ridge * np.eye(M1.value.shape[1]))
        G2 = matmul(transpose(M2), M2) + Tensor(ridge * np.eye(M2.value.shape[1]))
        for c in range(C):
            v = reshape(y_po[c][:, t], (N, 1))
            mu1, sig1 = fit(M1, G1, v)
            mu2, sig2 = fit(M2, G2, v)
            msd = tmean(square(mu1 - mu2))
            kl = log(sig2 / sig1) + (square(sig1) + msd) / (2.0 * square(sig2)) - 0.5
            terms.append(kl)
            stats.mu1[t - 1, c] = mu1.value[:, 0]
            stats.sigma1[t - 1, c] = sig1.item()
            stats.mu2[t - 1, c] = mu2.value[:, 0]
            stats.sigma2[t - 1, c] = sig2.item()
            stats.kl_hat[t - 1, c] = kl.item()

    penalty = terms[0]
    for term in terms[1:]:
        penalty = penalty + term
    penalty = penalty / float((T - 1) * C)
    return penalty, stats


def _loss_graph(pt, x, a, y, weights, combos, enc_mask=None, dec_mask=None):
    """Full loss graph. Returns (tensors dict, KlStats)."""
    N, T, p = x.shape
    z, x_hat, y_hat, y_po = _forward_graph(pt, x, a, combos, enc_mask, dec_mask)
    l_x = tmean(square(Tensor(x) - x_hat))
    l_y = tmean(square(Tensor(y) - y_hat))
    penalty, stats = _penalty_graph(z, a, y_po, combos)
    total = l_x + weights.theta * l_y + weights.alpha * penalty
    return {"l_x": l_x, "l_y": l_y, "penalty": penalty, "total": total, "z": z}, stats


# ---------------------------------------------------------------------------
# inference-mode operations (plain arrays, dropout off)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (T, d) or (N, T, d) input, got shape {x.shape}")


def encode(model: DtaModel, x):
    """Embed proxies. Returns (z_hat, h) matching the input's batchedness."""
    xb, squeeze = _as_batch(x)
    if xb.shape[2] != model.p:
        raise ShapeError(f"expected proxy dim {model.p}, got {xb.shape[2]}")
    pt = _params_to_tensors(model.param_dict(), requires_grad=False)
    h = lstm_sequence(pt["enc.w_x"], pt["enc.w_h"], pt["enc.b"], Tensor(xb))
    z = _affine_rows(h, pt["w_hz"], pt["b_z"], model.p_z)
    zv, hv = z.value, h.value
    return (zv[0], hv[0]) if squeeze else (zv, hv)


def decode(model: DtaModel, z_hat, a):
    """Reconstruct proxies and predict outcomes from an embedding sequence.

    Returns (x_hat, y_hat, h_prime).
    """
    zb, squeeze = _as_batch(z_hat)
    ab, _ = _as_batch(a)
    if zb.shape[2] != model.p_z or ab.shape[2] != model.k or zb.shape[:2] != ab.shape[:2]:
        raise ShapeError(
            f"decode: z{zb.shape} / a{ab.shape} inconsistent with "
            f"p_z={model.p_z}, k={model.k}"
        )
    pt = _params_to_tensors(model.param_dict(), requires_grad=False)
    h = lstm_sequence(pt["dec.w_x"], pt["dec.w_h"], pt["dec.b"], Tensor(zb))
    x_hat = _affine_rows(h, pt["w_hx"], pt["b_x"], model.p)
    N, T, _ = zb.shape
    cat = concat([h, Tensor(ab)], axis=2)
    y_hat = reshape(_affine_rows(cat, pt["w_hy"], pt["b_y"], 1), (N, T))
    out = (x_hat.value, y_hat.value, h.value)
    return tuple(o[0] for o in out) if squeeze else out


def potential_outcomes(model: DtaModel, z_hat, a_history):
    """Outcome-head predictions for every treatment combination.

    The decoder state is the factual one; only the treatment input of the
    outcome head varies. Returns an array (2^k, N, T) (leading batch axis
    dropped for single-trajectory input).
    """
    combos = treatment_combinations(model.k)
    zb, squeeze = _as_batch(z_hat)
    _, _, h = decode(model, zb, _as_batch(a_history)[0])
    N, T, _ = zb.shape
    w = model.w_hy[0]
    w_h, w_a = w[: model.dim_h], w[model.dim_h :]
    base = h @ w_h + model.b_y[0]
    po = np.stack([base + c @ w_a for c in combos])
    return po[:, 0] if squeeze else po


def reconstruction_loss(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction_loss: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def outcome_loss(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"outcome_loss: {y.shape} vs {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))


def gaussian_kl(mu_p, sigma_p, mu_q, sigma_q) -> float:
    """KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2))."""
    if sigma_p <= 0 or sigma_q <= 0:
        raise ValueError("standard deviations must be positive")
    return float(
        np.log(sigma_q / sigma_p)
        + (sigma_p**2 + (mu_p - mu_q) ** 2) / (2.0 * sigma_q**2)
        - 0.5
    )


def causal_penalty(z_hat, a, po, ridge=RIDGE, sigma_floor=SIGMA_FLOOR):
    """Penalty on plain arrays: z_hat (N, T, p_z), a (N, T, k), po (C, N, T).

    Returns (penalty value, KlStats). The ridge term keeps the per-step
    regressions solvable even when N is small relative to the regressor
    count.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    po = np.asarray(po, dtype=np.float64)
    k = a.shape[2]
    combos = treatment_combinations(k)
    if po.shape[0] != len(combos):
        raise ShapeError(f"expected {len(combos)} potential-outcome slices, got {po.shape[0]}")
    z_t = Tensor(z_hat)
    y_po = [Tensor(po[c]) for c in range(len(combos))]
    penalty, stats = _penalty_graph(z_t, a, y_po, combos, ridge, sigma_floor)
    return penalty.item(), stats


def total_loss(l_x: float, l_y: float, penalty: float, weights: LossWeights) -> LossBreakdown:
    return LossBreakdown(
        l_x=l_x, l_y=l_y, penalty=penalty,
        total=l_x + weights.theta * l_y + weights.alpha * penalty,
    )


def compute_loss(model: DtaModel, dataset: TrajectoryDataset, weights: LossWeights):
    """Full-dataset loss with dropout off. Returns (LossBreakdown, KlStats)."""
    pt = _params_to_tensors(model.param_dict(), requires_grad=False)
    combos = treatment_combinations(model.k)
    out, stats = _loss_graph(pt, dataset.x, dataset.a, dataset.y, weights, combos)
    breakdown = LossBreakdown(
        l_x=out["l_x"].item(),
        l_y=out["l_y"].item(),
        penalty=out["penalty"].item(),
        total=out["total"].item(),
    )
    return breakdown, stats


# ---------------------------------------------------------------------------
# training


def train(dataset: TrajectoryDataset, hp: DtaHyperparams):
    """Run the batched training loop; returns (model, per-epoch history).

    Per batch: encode, decode, potential outcomes for every treatment
    combination, the three-part loss, then a clipped adaptive-moment step.
    Fully deterministic given (dataset, hp).
    """
    N, T, p = dataset.x.shape
    k = dataset.a.shape[2]
    if N == 0:
        raise ConfigError("dataset is empty")
    if hp.batch_size > N:
        raise ConfigError(f"batch_size {hp.batch_size} exceeds N={N}")

    rng = np.random.default_rng(hp.seed)
    model = init_model(p, k, hp, rng)
    params = model.param_dict()
    combos = treatment_combinations(k)
    weights = hp.weights
    opt = OptimizerState(learning_rate=hp.learning_rate)
    history: list[LossBreakdown] = []

    for epoch in range(hp.epochs):
        order = rng.permutation(N)
        sums = np.zeros(3)
        seen = 0
        for start in range(0, N, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            xb, ab, yb = dataset.x[idx], dataset.a[idx], dataset.y[idx]
            if hp.dropout_rate > 0.0:
                keep = 1.0 - hp.dropout_rate
                enc_mask = (rng.random((len(idx), T, model.dim_h)) < keep) / keep
                dec_mask = (rng.random((len(idx), T, model.dim_h)) < keep) / keep
            else:
                enc_mask = dec_mask = None
            pt = _params_to_tensors(params, requires_grad=True)
            out, _ = _loss_graph(pt, xb, ab, yb, weights, combos, enc_mask, dec_mask)
            total = out["total"]
            if not np.isfinite(total.value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // hp.batch_size + 1}"
                )
            backward(total)
            grads = {n: pt[n].grad for n in params}
            clip_global_norm(grads, GRAD_CLIP)
            adam_update(opt, params, grads)
            nb = len(idx)
            sums += nb * np.array([out["l_x"].item(), out["l_y"].item(), out["penalty"].item()])
            seen += nb
        l_x, l_y, pen = sums / seen
        history.append(total_loss(l_x, l_y, pen, weights))

    return model, history


def embed_dataset(model: DtaModel, dataset: TrajectoryDataset) -> np.ndarray:
    """Deterministic (N, T, p_z) embedding with dropout disabled."""
    z, _ = encode(model, dataset.x)
    return z


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"DTACKPT1"


def save_model(model: DtaModel, path):
    """Self-describing binary checkpoint; byte-identical for equal models."""
    params = model.param_dict()
    header = {
        "format_version": 1,
        "dims": {"p": model.p, "k": model.k, "p_z": model.p_z, "dim_h": model.dim_h},
        "dropout_rate": model.dropout_rate,
        "hyperparams": None if model.hyperparams is None else vars(model.hyperparams).copy(),
        "arrays": [
            {"name": n, "shape": list(v.shape)} for n, v in sorted(params.items())
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n, _ in sorted(params.items()):
            fh.write(np.ascontiguousarray(params[n], dtype=np.float64).tobytes())


def load_model(path) -> DtaModel:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise FormatError(f"{path}: not a model checkpoint")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode())
        if header.get("format_version") != 1:
            raise FormatError(f"{path}: unsupported checkpoint version")
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays[spec["name"]] = np.frombuffer(
                fh.read(count * 8), dtype=np.float64
            ).reshape(shape).copy()
    dims = header["dims"]
    hp = None
    if header.get("hyperparams"):
        hp = DtaHyperparams(**header["hyperparams"])
    enc = LstmCellParams(
        arrays["enc.w_x"], arrays["enc.w_h"], arrays["enc.b"], dims["p"], dims["dim_h"]
    )
    dec = LstmCellParams(
        arrays["dec.w_x"], arrays["dec.w_h"], arrays["dec.b"], dims["p_z"], dims["dim_h"]
    )
    return DtaModel(
        encoder_lstm=enc,
        w_hz=arrays["w_hz"],
        b_z=arrays["b_z"],
        decoder_lstm=dec,
        w_hx=arrays["w_hx"],
        b_x=arrays["b_x"],
        w_hy=arrays["w_hy"],
        b_y=arrays["b_y"],
        p=dims["p"],
        k=dims["k"],
        p_z=dims["p_z"],
        dim_h=dims["dim_h"],
        dropout_rate=header.get("dropout_rate", 0.0),
        hyperparams=hp,
    )
