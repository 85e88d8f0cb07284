"""Pure NumPy peephole-LSTM sequence kernels.

Same signatures as the compiled ``_kernels_c`` module. Gate blocks are stacked
in the order (block input z, input gate i, forget gate f, output gate o), so
``W`` is (4, B, L), ``R`` is (4, B, B), ``b`` is (4, B) and the peephole
weights ``P`` are (3, B) for (i, f, o). All buffers are float64 and C-ordered.

The forward kernel fills caller-allocated buffers; the backward kernel
accumulates (``+=``) into caller-allocated gradient buffers, summing over the
batch axis.
"""

import numpy as np

Z, I, F, O = 0, 1, 2, 3


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(W, R, P, b, X, pre, act, c, u):
    n, M, _ = X.shape
    B = W.shape[1]
    y_prev = np.zeros((n, B))
    c_prev = np.zeros((n, B))
    # (4B, L) / (4B, B) views so each step is two matmuls
    W2 = W.reshape(4 * B, -1)
    R2 = R.reshape(4 * B, B)
    b2 = b.reshape(4 * B)
    for t in range(M):
        a = (X[:, t, :] @ W2.T + y_prev @ R2.T + b2).reshape(n, 4, B)
        a[:, I] += P[0] * c_prev
        a[:, F] += P[1] * c_prev
        z = np.tanh(a[:, Z])
        ig = sigmoid(a[:, I])
        fg = sigmoid(a[:, F])
        ct = z * ig + c_prev * fg
        a[:, O] += P[2] * ct
        og = sigmoid(a[:, O])
        ut = np.tanh(ct) * og
        pre[:, t] = a
        act[:, t, Z] = z
        act[:, t, I] = ig
        act[:, t, F] = fg
        act[:, t, O] = og
        c[:, t] = ct
        u[:, t] = ut
        y_prev = ut
        c_prev = ct


def lstm_backward(W, R, P, X, act, c, u, dU, gW, gR, gP, gb):
    n, M, _ = X.shape
    B = W.shape[1]
    R2 = R.reshape(4 * B, B)
    dy_next = np.zeros((n, B))
    dc_next = np.zeros((n, B))
    zeros = np.zeros((n, B))
    da = np.empty((n, 4, B))
    for t in range(M - 1, -1, -1):
        z = act[:, t, Z]
        ig = act[:, t, I]
        fg = act[:, t, F]
        og = act[:, t, O]
        ct = c[:, t]
        c_prev = c[:, t - 1] if t > 0 else zeros
        y_prev = u[:, t - 1] if t > 0 else zeros
        tc = np.tanh(ct)

        dy = dU[:, t] + dy_next
        da[:, O] = dy * tc * og * (1.0 - og)
        dc = dc_next + dy * og * (1.0 - tc * tc) + da[:, O] * P[2]
        da[:, Z] = dc * ig * (1.0 - z * z)
        da[:, I] = dc * z * ig * (1.0 - ig)
        da[:, F] = dc * c_prev * fg * (1.0 - fg)

        gP[0] += np.sum(da[:, I] * c_prev, axis=0)
        gP[1] += np.sum(da[:, F] * c_prev, axis=0)
        gP[2] += np.sum(da[:, O] * ct, axis=0)
        gb += np.sum(da, axis=0)
        gW += np.einsum("ngb,nl->gbl", da, X[:, t, :])
        gR += np.einsum("ngb,nk->gbk", da, y_prev)

        dc_next = dc * fg + da[:, I] * P[0] + da[:, F] * P[1]
        dy_next = da.reshape(n, 4 * B) @ R2
