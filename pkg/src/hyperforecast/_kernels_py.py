"""Pure numpy implementation of the recurrent hot kernels.

Same signatures as the compiled ``_kernels`` extension. Every array argument
is float64; batch is the leading axis. Gate blocks are laid out contiguously
along the last axis: GRU as (r, z, n), LSTM as (i, f, g, o).
"""
import numpy as np

BACKEND = "python"


def bmv(w, v):
    """Per-sample matvec: out[b, i] = sum_j w[b, i, j] * v[b, j]."""
    return np.matmul(w, v[:, :, None])[:, :, 0]


def bmv_backward(w, v, g):
    """Gradients of ``bmv`` w.r.t. ``w`` and ``v`` given upstream ``g``."""
    gw = g[:, :, None] * v[:, None, :]
    gv = np.matmul(g[:, None, :], w)[:, 0, :]
    return gw, gv


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gru_gates_forward(a, hb, s_prev):
    """GRU gating given input projections ``a`` and biased state projections ``hb``.

    r = sigmoid(a_r + hb_r), z = sigmoid(a_z + hb_z),
    n = tanh(a_n + r * hb_n), s = (1 - z) * n + z * s_prev.

    Returns (s, r, z, n).
    """
    d = s_prev.shape[1]
    r = _sigmoid(a[:, :d] + hb[:, :d])
    z = _sigmoid(a[:, d:2 * d] + hb[:, d:2 * d])
    n = np.tanh(a[:, 2 * d:] + r * hb[:, 2 * d:])
    s = (1.0 - z) * n + z * s_prev
    return s, r, z, n


def gru_gates_backward(gs, hb, s_prev, r, z, n):
    """Returns (grad_a, grad_hb, grad_s_prev)."""
    d = s_prev.shape[1]
    hn = hb[:, 2 * d:]
    gn = gs * (1.0 - z) * (1.0 - n * n)
    gz = gs * (s_prev - n) * z * (1.0 - z)
    gr = gn * hn * r * (1.0 - r)
    ga = np.concatenate([gr, gz, gn], axis=1)
    ghb = np.concatenate([gr, gz, gn * r], axis=1)
    gsp = gs * z
    return ga, ghb, gsp


def lstm_gates_forward(pre, c_prev):
    """LSTM gating on summed pre-activations.

    Returns (h, c, i, f, g, o, tanh_c).
    """
    d = c_prev.shape[1]
    i = _sigmoid(pre[:, :d])
    f = _sigmoid(pre[:, d:2 * d])
    g = np.tanh(pre[:, 2 * d:3 * d])
    o = _sigmoid(pre[:, 3 * d:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, i, f, g, o, tc


def lstm_gates_backward(gh, gc, c_prev, i, f, g, o, tc):
    """Returns (grad_pre, grad_c_prev)."""
    gct = gc + gh * o * (1.0 - tc * tc)
    gi = gct * g * i * (1.0 - i)
    gf = gct * c_prev * f * (1.0 - f)
    gg = gct * i * (1.0 - g * g)
    go = gh * tc * o * (1.0 - o)
    return np.concatenate([gi, gf, gg, go], axis=1), gct * f
