"""Recurrent building blocks.

Every function takes tape :class:`~hyperforecast.autodiff.Variable` objects
(or plain arrays, which are lifted to constants) with a leading batch axis:
states are ``[B, d]``, encoder outputs ``[B, T_k, d_h]``. A single sequence
is simply ``B == 1``.

Gate weights are stored stacked along the output axis, in the order
(r, z, n) for GRU and (i, f, g, o) for LSTM. Slicing a stacked matrix into
equal row blocks is exactly the equal-size chunking of the flat generated
vectors, so the generated and static cells share one code path.
"""
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

GATES = {"gru": ("r", "z", "n"), "lstm": ("i", "f", "g", "o")}


def n_gates(kind):
    return len(GATES[kind])


class _Params:
    """Mixin: lift every field onto a tape."""

    def on_tape(self, tape, requires_grad=True, prefix=""):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, _Params):
                kwargs[f.name] = value.on_tape(tape, requires_grad, f"{prefix}{f.name}.")
            elif isinstance(value, np.ndarray):
                kwargs[f.name] = tape.variable(value, requires_grad, name=prefix + f.name)
            else:
                kwargs[f.name] = value
        return type(self)(**kwargs)


@dataclass
class GruParams(_Params):
    """Static GRU weights, gate blocks stacked (r, z, n) along rows.

    w_x: [3*d_out, d_in], w_h: [3*d_out, d_out], b: [3*d_out].
    """

    w_x: object
    w_h: object
    b: object

    kind = "gru"

    def _block(self, t, gate):
        d = t.shape[0] // 3
        j = GATES["gru"].index(gate)
        return t[j * d:(j + 1) * d]

    @property
    def w_xr(self):
        return self._block(self.w_x, "r")

    @property
    def w_xz(self):
        return self._block(self.w_x, "z")

    @property
    def w_xn(self):
        return self._block(self.w_x, "n")

    @property
    def w_hr(self):
        return self._block(self.w_h, "r")

    @property
    def w_hz(self):
        return self._block(self.w_h, "z")

    @property
    def w_hn(self):
        return self._block(self.w_h, "n")

    @property
    def b_r(self):
        return self._block(self.b, "r")

    @property
    def b_z(self):
        return self._block(self.b, "z")

    @property
    def b_n(self):
        return self._block(self.b, "n")

    @classmethod
    def from_gates(cls, w_xr, w_xz, w_xn, w_hr, w_hz, w_hn, b_r, b_z, b_n):
        return cls(np.vstack([w_xr, w_xz, w_xn]), np.vstack([w_hr, w_hz, w_hn]),
                   np.concatenate([b_r, b_z, b_n]))


@dataclass
class LstmParams(_Params):
    """Static LSTM weights, gate blocks stacked (i, f, g, o) along rows."""

    w_x: object
    w_h: object
    b: object

    kind = "lstm"


@dataclass
class HyperEncoderParams(_Params):
    """Bidirectional encoder; each direction has width d_h / 2."""

    forward: object
    backward: object


@dataclass
class AttentionParams(_Params):
    """Additive score v^T tanh(w_s s + w_h h_p + b_s)."""

    v: object    # [d_a]
    w_s: object  # [d_a, d_s]
    w_h: object  # [d_a, d_h]
    b_s: object  # [d_a]


@dataclass
class WeightGenParams(_Params):
    """Maps an attention context to the main cell's weights."""

    w_c: object     # [d_v, d_h]
    w_hv: object    # [G*d_s*d_s, d_v]
    w_xv: object    # [G*d_s*d_x, d_v]
    w_bv: object    # [G*d_s, d_v]
    w_init: object  # [d_s, d_h]
    b_init: object  # [d_s]


@dataclass
class GeneratedCellWeights:
    """Per-sample main-cell weights for one time step.

    ``w_h`` is [B, G*d_s, d_s], ``w_x`` is [B, G*d_s, d_x], ``b`` is [B, G*d_s];
    ``flat`` keeps the generator outputs (W_Ih, W_Ix, W_Ib) before reshaping.
    """

    w_h: object
    w_x: object
    b: object
    flat: tuple
    kind: str = "gru"


# ---------------------------------------------------------------------------
# static cells

def _lift(tape, x):
    return x if isinstance(x, ad.Variable) else tape.constant(x)


def gru_step(p, x_t, s_prev):
    """One GRU update with static weights.

    r = sigma(W_xr x + W_hr s + b_r), z = sigma(W_xz x + W_hz s + b_z),
    n = tanh(W_xn x + r * (W_hn s + b_n)), s' = (1 - z) * n + z * s.
    """
    a = ad.linear(x_t, p.w_x)
    hb = ad.linear(s_prev, p.w_h, p.b)
    return ad.gru_gates(a, hb, s_prev)


def lstm_step(p, x_t, s_prev, cell_prev):
    """One LSTM update with static weights; returns (s, cell)."""
    pre = ad.add(ad.linear(x_t, p.w_x), ad.linear(s_prev, p.w_h, p.b))
    return _split_hc(ad.lstm_gates(pre, cell_prev), cell_prev.shape[-1])


def _split_hc(hc, d):
    return ad.slice_(hc, 0, d), ad.slice_(hc, d, 2 * d)


def run_static(p, xs, tape, reverse=False):
    """Run a static cell over a list of per-step inputs from a zero state.

    Returns the list of states in input order (for ``reverse`` the recursion
    starts at the last input but the output is still aligned with ``xs``).
    """
    batch = xs[0].shape[0]
    d = p.w_h.shape[-1]
    s = tape.constant(np.zeros((batch, d)))
    cell = tape.constant(np.zeros((batch, d))) if p.kind == "lstm" else None
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    states = [None] * len(xs)
    for t in order:
        if cell is None:
            s = gru_step(p, xs[t], s)
        else:
            s, cell = lstm_step(p, xs[t], s, cell)
        states[t] = s
    return states


def bigru_encode(p, x_bar, tape=None):
    """Encode pooled windows ``x_bar`` [B, T_k, d_x] into h [B, T_k, d_h].

    Both directions start from zero; h[:, t] = concat(forward_t, backward_t).
    Works for the LSTM encoder too (``p`` holding :class:`LstmParams`).
    """
    tape = tape or p.forward.w_x.tape
    if isinstance(x_bar, ad.Variable):
        steps = [ad.reshape(ad.slice_(x_bar, t, t + 1, axis=1), (x_bar.shape[0], x_bar.shape[2]))
                 for t in range(x_bar.shape[1])]
    else:
        x_bar = np.asarray(x_bar, dtype=np.float64)
        if x_bar.ndim != 3:
            raise DimensionError(f"bigru_encode expects [B, T_k, d_x], got {x_bar.shape}")
        steps = [tape.constant(np.ascontiguousarray(x_bar[:, t, :])) for t in range(x_bar.shape[1])]
    fwd = run_static(p.forward, steps, tape)
    bwd = run_static(p.backward, steps, tape, reverse=True)
    rows = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
    return ad.stack(rows, axis=1)


# ---------------------------------------------------------------------------
# attention and weight generation

def attention_keys(a, h):
    """Step-independent part of the score: (W_h h_p for all p, v as a row)."""
    d_a = a.v.shape[0]
    return ad.linear(h, a.w_h), ad.reshape(a.v, (1, d_a))


def attention_scores(a, s_prev, h, keys=None):
    """score_p = v^T tanh(W_s s_prev + W_h h[p] + b_s), shape [B, T_k]."""
    proj_h, v_row = keys if keys is not None else attention_keys(a, h)
    q = ad.linear(s_prev, a.w_s, a.b_s)
    e = ad.tanh(ad.broadcast_add(proj_h, q, axis=1))
    return ad.reshape(ad.linear(e, v_row), (h.shape[0], h.shape[1]))


def attend(a, s_prev, h, keys=None):
    """Context vector and attention weights for one step.

    alpha = softmax(score); c = sum_p alpha_p h[p].
    Returns (c [B, d_h], alpha [B, T_k]).
    """
    alpha = ad.softmax(attention_scores(a, s_prev, h, keys))
    return ad.wsum(alpha, h), alpha


def generate_weights(g, c_t, d_s, d_x, kind="gru"):
    """v = W_c c; (W_Ih, W_Ix, W_Ib) = (W_hv v, W_xv v, W_bv v), chunked per gate.

    No additive bias enters the generated weights.
    """
    G = n_gates(kind)
    v = ad.linear(c_t, g.w_c)
    w_ih = ad.linear(v, g.w_hv)
    w_ix = ad.linear(v, g.w_xv)
    w_ib = ad.linear(v, g.w_bv)
    batch = c_t.shape[0]
    if w_ih.shape[-1] != G * d_s * d_s or w_ix.shape[-1] != G * d_s * d_x:
        raise DimensionError(
            f"generator widths {w_ih.shape[-1]}/{w_ix.shape[-1]} do not fit d_s={d_s}, d_x={d_x}")
    return GeneratedCellWeights(
        w_h=ad.reshape(w_ih, (batch, G * d_s, d_s)),
        w_x=ad.reshape(w_ix, (batch, G * d_s, d_x)),
        b=w_ib,
        flat=(w_ih, w_ix, w_ib),
        kind=kind,
    )


def init_state(g, h):
    """s_0 = W_init h[:, -1] + b_init."""
    batch, t_k, d_h = h.shape
    last = ad.reshape(ad.slice_(h, t_k - 1, t_k, axis=1), (batch, d_h))
    return ad.linear(last, g.w_init, g.b_init)


def generated_gru_step(w, x_t, s_prev):
    a = ad.bmv(w.w_x, x_t)
    hb = ad.add(ad.bmv(w.w_h, s_prev), w.b)
    return ad.gru_gates(a, hb, s_prev)


def generated_lstm_step(w, x_t, s_prev, cell_prev):
    pre = ad.add(ad.add(ad.bmv(w.w_x, x_t), ad.bmv(w.w_h, s_prev)), w.b)
    return _split_hc(ad.lstm_gates(pre, cell_prev), cell_prev.shape[-1])


def split_generated(flat, d_s, d_x, kind="gru"):
    """Chunk one sample's flat (W_Ih, W_Ix, W_Ib) into named per-gate tensors.

    Plain-array reference of the chunk-then-reshape rule; used for audits.
    """
    from . import tensor as tn

    w_ih, w_ix, w_ib = (np.asarray(t, dtype=np.float64) for t in flat)
    G = n_gates(kind)
    out = {}
    for gate, wh, wx, b in zip(GATES[kind], tn.chunk(w_ih, G), tn.chunk(w_ix, G),
                               tn.chunk(w_ib, G)):
        out[f"w_h{gate}"] = tn.reshape_to_matrix(wh, d_s, d_s)
        out[f"w_x{gate}"] = tn.reshape_to_matrix(wx, d_s, d_x)
        out[f"b_{gate}"] = b
    return out
