"""LSTM cell parameters and the fused sequence op for the autodiff graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import backend
from .tensor import Tensor

GATES = ("input", "forget", "candidate", "output")


@dataclass
class LstmCellParams:
    """Stacked gate parameters, gate order [input, forget, candidate, output].

    w_x is (4H, D), w_h is (4H, H), bias is (4H,). Per-gate views are
    exposed through :meth:`gate`.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    bias: np.ndarray
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        H, D = self.hidden_dim, self.input_dim
        if H <= 0:
            raise ShapeError("hidden_dim must be positive")
        if self.w_x.shape != (4 * H, D) or self.w_h.shape != (4 * H, H):
            raise ShapeError(
                f"LSTM weight shapes {self.w_x.shape}/{self.w_h.shape} do not "
                f"match dims D={D}, H={H}"
            )
        if self.bias.shape != (4 * H,):
            raise ShapeError("LSTM bias shape mismatch")

    @classmethod
    def init(cls, input_dim, hidden_dim, rng):
        """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases,
        forget-gate bias 1.0."""
        H = hidden_dim
        sx = 1.0 / np.sqrt(input_dim)
        sh = 1.0 / np.sqrt(H)
        w_x = rng.uniform(-sx, sx, size=(4 * H, input_dim))
        w_h = rng.uniform(-sh, sh, size=(4 * H, H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0
        return cls(w_x, w_h, bias, input_dim, hidden_dim)

    def gate(self, name):
        """(input-weight, recurrent-weight, bias) views for one gate."""
        i = GATES.index(name)
        H = self.hidden_dim
        sl = slice(i * H, (i + 1) * H)
        return self.w_x[sl], self.w_h[sl], self.bias[sl]


def lstm_step(params: LstmCellParams, x, h_prev, c_prev):
    """Single-step cell update on plain vectors. Returns (h, c)."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = params.hidden_dim
    if x.shape != (params.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError(
            f"lstm_step: got x{x.shape}, h{h_prev.shape}, c{c_prev.shape} for "
            f"D={params.input_dim}, H={H}"
        )
    pre = params.w_x @ x + params.w_h @ h_prev + params.bias
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i = sig(pre[:H])
    f = sig(pre[H : 2 * H])
    g = np.tanh(pre[2 * H : 3 * H])
    o = sig(pre[3 * H :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_sequence(w_x: Tensor, w_h: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Unroll the cell over a (B, T, D) input; returns hidden states (B, T, H).

    A fused graph node: forward and BPTT run in the selected kernel backend
    (compiled when available), and the four parameter/input gradients are
    computed in one backward kernel call.
    """
    kern = backend.kernels
    xv = np.ascontiguousarray(x.value)
    if xv.ndim != 3 or xv.shape[2] != w_x.value.shape[1]:
        raise ShapeError(f"lstm_sequence: input shape {xv.shape} does not match weights")
    h_seq, cache = kern.lstm_forward(xv, w_x.value, w_h.value, bias.value)

    memo = {}

    def grads(g):
        key = id(g)
        if key not in memo:
            memo.clear()
            memo[key] = kern.lstm_backward(
                np.ascontiguousarray(g), xv, w_x.value, w_h.value, cache
            )
        return memo[key]

    return Tensor(
        h_seq,
        parents=(w_x, w_h, bias, x),
        vjps=(
            lambda g: grads(g)[0],
            lambda g: grads(g)[1],
            lambda g: grads(g)[2],
            lambda g: grads(g)[3],
        ),
    )
