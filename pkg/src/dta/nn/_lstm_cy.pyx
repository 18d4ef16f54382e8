# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM sequence kernels (hot-loop backend).

Same contract and gate layout as ``_lstm_py``; see that module for the
reference implementation.

Internally this backend works time-major with one contiguous (B, H)
block per gate and step, so every elementwise pass is a single flat loop
the compiler turns into vectorized exp/tanh calls, and every per-step
matrix product runs on contiguous BLAS inputs. The public arrays are
transposed at the boundary.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #include <math.h>

    /* Forward gate math for one step over a flat batch block of n = B*H
       values per gate. xi..xo: input projections (bias folded in),
       ri..ro: recurrent projections, c_prev: previous cell state. */
    static void dta_lstm_step(const double *restrict xi, const double *restrict xf,
                              const double *restrict xc, const double *restrict xo,
                              const double *restrict ri, const double *restrict rf,
                              const double *restrict rc, const double *restrict ro,
                              const double *restrict c_prev,
                              double *restrict gi, double *restrict gf,
                              double *restrict gg, double *restrict go,
                              double *restrict cs, double *restrict h, long n) {
        long i;
        for (i = 0; i < n; i++) gi[i] = 1.0 / (1.0 + exp(-(xi[i] + ri[i])));
        for (i = 0; i < n; i++) gf[i] = 1.0 / (1.0 + exp(-(xf[i] + rf[i])));
        for (i = 0; i < n; i++) gg[i] = tanh(xc[i] + rc[i]);
        for (i = 0; i < n; i++) go[i] = 1.0 / (1.0 + exp(-(xo[i] + ro[i])));
        for (i = 0; i < n; i++) cs[i] = gf[i] * c_prev[i] + gi[i] * gg[i];
        for (i = 0; i < n; i++) h[i] = go[i] * tanh(cs[i]);
    }

    /* Backward gate math for one step: consumes the incoming hidden
       gradient (upstream gh plus carried dh), updates the carried cell
       gradient dc in place, and emits pre-activation gate gradients. */
    static void dta_lstm_backstep(const double *restrict gi, const double *restrict gf,
                                  const double *restrict gg, const double *restrict go,
                                  const double *restrict cs, const double *restrict c_prev,
                                  const double *restrict gh, const double *restrict dh,
                                  double *restrict dc,
                                  double *restrict dai, double *restrict daf,
                                  double *restrict dac, double *restrict dao, long n) {
        long i;
        for (i = 0; i < n; i++) {
            double i_v = gi[i], f_v = gf[i], g_v = gg[i], o_v = go[i];
            double tc = tanh(cs[i]);
            double dh_v = gh[i] + dh[i];
            double dc_v = dc[i] + dh_v * o_v * (1.0 - tc * tc);
            dc[i] = dc_v * f_v;
            dai[i] = dc_v * g_v * i_v * (1.0 - i_v);
            daf[i] = dc_v * c_prev[i] * f_v * (1.0 - f_v);
            dac[i] = dc_v * i_v * (1.0 - g_v * g_v);
            dao[i] = dh_v * tc * o_v * (1.0 - o_v);
        }
    }
    """
    void dta_lstm_step(const double *xi, const double *xf, const double *xc,
                       const double *xo, const double *ri, const double *rf,
                       const double *rc, const double *ro, const double *c_prev,
                       double *gi, double *gf, double *gg, double *go,
                       double *cs, double *h, long n) nogil
    void dta_lstm_backstep(const double *gi, const double *gf, const double *gg,
                           const double *go, const double *cs, const double *c_prev,
                           const double *gh, const double *dh, double *dc,
                           double *dai, double *daf, double *dac, double *dao,
                           long n) nogil


def lstm_forward(x, w_x, w_h, bias):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w_x = np.ascontiguousarray(w_x, dtype=np.float64)
    w_h = np.ascontiguousarray(w_h, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t H = w_h.shape[1]
    cdef Py_ssize_t n = B * H

    x_tb = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(T * B, D)
    w_x_T = [np.ascontiguousarray(w_x[g * H : (g + 1) * H].T) for g in range(4)]
    w_h_T = [np.ascontiguousarray(w_h[g * H : (g + 1) * H].T) for g in range(4)]

    # per-gate input projections for every step at once, bias folded in
    xg_list = []
    for g in range(4):
        xg = np.empty((T * B, H))
        np.matmul(x_tb, w_x_T[g], out=xg)
        np.add(xg, bias[g * H : (g + 1) * H], out=xg)
        xg_list.append(xg.reshape(T, B, H))

    # every cell of these is written below, so uninitialized storage is fine
    h_tb_a = np.empty((T, B, H))
    gi_a = np.empty((T, B, H))
    gf_a = np.empty((T, B, H))
    gg_a = np.empty((T, B, H))
    go_a = np.empty((T, B, H))
    cs_a = np.empty((T, B, H))
    rec_list = [np.zeros((B, H)) for _ in range(4)]
    zero_a = np.zeros((B, H))

    cdef double[:, :, ::1] xi = xg_list[0], xf = xg_list[1]
    cdef double[:, :, ::1] xc = xg_list[2], xo = xg_list[3]
    cdef double[:, :, ::1] h_tb = h_tb_a
    cdef double[:, :, ::1] gi = gi_a, gf = gf_a, gg = gg_a, go = go_a, cs = cs_a
    cdef double[:, ::1] ri = rec_list[0], rf = rec_list[1]
    cdef double[:, ::1] rc = rec_list[2], ro = rec_list[3]
    cdef double[:, ::1] zero = zero_a
    cdef Py_ssize_t t

    for t in range(T):
        if t > 0:
            for g in range(4):
                np.matmul(h_tb_a[t - 1], w_h_T[g], out=rec_list[g])
        if t == 0:
            # rec buffers start zeroed, so step 0 shares the same kernel
            dta_lstm_step(&xi[0, 0, 0], &xf[0, 0, 0], &xc[0, 0, 0], &xo[0, 0, 0],
                          &ri[0, 0], &rf[0, 0], &rc[0, 0], &ro[0, 0],
                          &zero[0, 0],
                          &gi[0, 0, 0], &gf[0, 0, 0], &gg[0, 0, 0], &go[0, 0, 0],
                          &cs[0, 0, 0], &h_tb[0, 0, 0], n)
        else:
            dta_lstm_step(&xi[t, 0, 0], &xf[t, 0, 0], &xc[t, 0, 0], &xo[t, 0, 0],
                          &ri[0, 0], &rf[0, 0], &rc[0, 0], &ro[0, 0],
                          &cs[t - 1, 0, 0],
                          &gi[t, 0, 0], &gf[t, 0, 0], &gg[t, 0, 0], &go[t, 0, 0],
                          &cs[t, 0, 0], &h_tb[t, 0, 0], n)
    h_seq = np.ascontiguousarray(h_tb_a.transpose(1, 0, 2))
    return h_seq, (gi_a, gf_a, gg_a, go_a, cs_a, h_tb_a)


def lstm_backward(grad_h_seq, x, w_x, w_h, cache):
    gi_a, gf_a, gg_a, go_a, cs_a, h_tb_a = cache
    x = np.ascontiguousarray(x, dtype=np.float64)
    w_x = np.ascontiguousarray(w_x, dtype=np.float64)
    w_h = np.ascontiguousarray(w_h, dtype=np.float64)
    grad_h_seq = np.asarray(grad_h_seq, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t H = w_h.shape[1]
    cdef Py_ssize_t n = B * H

    gh_tb_a = np.ascontiguousarray(grad_h_seq.transpose(1, 0, 2))
    w_h_blocks = [np.ascontiguousarray(w_h[g * H : (g + 1) * H]) for g in range(4)]

    da_list = [np.empty((T, B, H)) for _ in range(4)]
    dh_a = np.zeros((B, H))
    dc_a = np.zeros((B, H))
    zero_a = np.zeros((B, H))
    tmp_a = np.empty((B, H))

    cdef double[:, :, ::1] gi = gi_a, gf = gf_a, gg = gg_a, go = go_a
    cdef double[:, :, ::1] cs = cs_a, gh = gh_tb_a
    cdef double[:, :, ::1] dai = da_list[0], daf = da_list[1]
    cdef double[:, :, ::1] dac = da_list[2], dao = da_list[3]
    cdef double[:, ::1] dh = dh_a, dc = dc_a, zero = zero_a
    cdef Py_ssize_t t

    for t in range(T - 1, -1, -1):
        if t == 0:
            dta_lstm_backstep(&gi[0, 0, 0], &gf[0, 0, 0], &gg[0, 0, 0],
                              &go[0, 0, 0], &cs[0, 0, 0], &zero[0, 0],
                              &gh[0, 0, 0], &dh[0, 0], &dc[0, 0],
                              &dai[0, 0, 0], &daf[0, 0, 0], &dac[0, 0, 0],
                              &dao[0, 0, 0], n)
        else:
            dta_lstm_backstep(&gi[t, 0, 0], &gf[t, 0, 0], &gg[t, 0, 0],
                              &go[t, 0, 0], &cs[t, 0, 0], &cs[t - 1, 0, 0],
                              &gh[t, 0, 0], &dh[0, 0], &dc[0, 0],
                              &dai[t, 0, 0], &daf[t, 0, 0], &dac[t, 0, 0],
                              &dao[t, 0, 0], n)
            np.matmul(da_list[0][t], w_h_blocks[0], out=dh_a)
            for g in range(1, 4):
                np.matmul(da_list[g][t], w_h_blocks[g], out=tmp_a)
                np.add(dh_a, tmp_a, out=dh_a)

    d_w_x = np.empty_like(w_x)
    d_w_h = np.zeros_like(w_h)
    d_bias = np.empty(4 * H)
    x_tb = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(T * B, D)
    d_x_tb = np.zeros((T * B, D))
    tmp_x = np.empty((T * B, D))
    for g in range(4):
        da_flat = da_list[g].reshape(T * B, H)
        np.matmul(da_flat, w_x[g * H : (g + 1) * H], out=tmp_x)
        np.add(d_x_tb, tmp_x, out=d_x_tb)
        d_w_x[g * H : (g + 1) * H] = da_flat.T @ x_tb
        d_bias[g * H : (g + 1) * H] = da_flat.sum(axis=0)
        if T > 1:
            d_w_h[g * H : (g + 1) * H] = (
                da_list[g][1:].reshape(-1, H).T @ h_tb_a[: T - 1].reshape(-1, H)
            )
    d_x = np.ascontiguousarray(d_x_tb.reshape(T, B, D).transpose(1, 0, 2))
    return d_w_x, d_w_h, d_bias, d_x
