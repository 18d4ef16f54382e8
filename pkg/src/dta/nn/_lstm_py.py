"""Pure-numpy LSTM sequence kernels (fallback backend).

Gate order in the stacked weight layout is [input, forget, candidate,
output]; shapes are w_x (4H, D), w_h (4H, H), bias (4H,), x (B, T, D).
The compiled backend in ``_lstm_cy`` implements the identical math.
"""

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward(x, w_x, w_h, bias):
    """Unroll the cell over time. Returns (h_seq, cache) with h_seq (B, T, H)."""
    B, T, _ = x.shape
    H = w_h.shape[1]
    h_seq = np.zeros((B, T, H))
    gi = np.zeros((B, T, H))
    gf = np.zeros((B, T, H))
    gg = np.zeros((B, T, H))
    go = np.zeros((B, T, H))
    cs = np.zeros((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        pre = x[:, t] @ w_x.T + h @ w_h.T + bias
        i = _sigmoid(pre[:, :H])
        f = _sigmoid(pre[:, H : 2 * H])
        g = np.tanh(pre[:, 2 * H : 3 * H])
        o = _sigmoid(pre[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gi[:, t], gf[:, t], gg[:, t], go[:, t], cs[:, t] = i, f, g, o, c
        h_seq[:, t] = h
    return h_seq, (gi, gf, gg, go, cs, h_seq)


def lstm_backward(grad_h_seq, x, w_x, w_h, cache):
    """BPTT through the unrolled cell.

    Returns (d_w_x, d_w_h, d_bias, d_x) for the upstream gradient
    ``grad_h_seq`` (B, T, H) on the hidden-state sequence.
    """
    gi, gf, gg, go, cs, h_seq = cache
    B, T, H = grad_h_seq.shape
    d_w_x = np.zeros_like(w_x)
    d_w_h = np.zeros_like(w_h)
    d_bias = np.zeros_like(w_x[:, 0])
    d_x = np.zeros_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o, c = gi[:, t], gf[:, t], gg[:, t], go[:, t], cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
        h_prev = h_seq[:, t - 1] if t > 0 else np.zeros((B, H))
        tc = np.tanh(c)
        dh = grad_h_seq[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc**2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g**2),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        d_x[:, t] = da @ w_x
        dh_next = da @ w_h
        d_w_x += da.T @ x[:, t]
        d_w_h += da.T @ h_prev
        d_bias += da.sum(axis=0)
    return d_w_x, d_w_h, d_bias, d_x
