import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperforecast import autodiff as ad
from hyperforecast import cells
from hyperforecast import tensor as tn


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gru(wx, wh, b, x, s):
    """Loop-by-loop GRU, gates stacked (r, z, n) along rows."""
    d = len(s)
    pre = lambda w, vec, row: sum(w[row][j] * vec[j] for j in range(len(vec)))
    r = [_sig(pre(wx, x, i) + pre(wh, s, i) + b[i]) for i in range(d)]
    z = [_sig(pre(wx, x, d + i) + pre(wh, s, d + i) + b[d + i]) for i in range(d)]
    n = [math.tanh(pre(wx, x, 2 * d + i) + r[i] * (pre(wh, s, 2 * d + i) + b[2 * d + i]))
         for i in range(d)]
    return [(1 - z[i]) * n[i] + z[i] * s[i] for i in range(d)]


def scalar_lstm(wx, wh, b, x, s, c):
    d = len(s)
    pre = [sum(wx[r][j] * x[j] for j in range(len(x))) + sum(wh[r][j] * s[j] for j in range(d))
           + b[r] for r in range(4 * d)]
    i = [_sig(pre[k]) for k in range(d)]
    f = [_sig(pre[d + k]) for k in range(d)]
    g = [math.tanh(pre[2 * d + k]) for k in range(d)]
    o = [_sig(pre[3 * d + k]) for k in range(d)]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
    return [o[k] * math.tanh(c_new[k]) for k in range(d)], c_new


def _gru(rng, d_in, d_out, scale=1.0):
    return cells.GruParams(rng.normal(size=(3 * d_out, d_in)) * scale,
                           rng.normal(size=(3 * d_out, d_out)) * scale,
                           rng.normal(size=3 * d_out) * scale)


def _step_gru(p, x, s):
    tape = ad.Tape()
    q = p.on_tape(tape, requires_grad=False)
    return cells.gru_step(q, tape.constant(x[None]), tape.constant(s[None])).value[0]


def _step_lstm(p, x, s, c):
    tape = ad.Tape()
    q = p.on_tape(tape, requires_grad=False)
    h, c2 = cells.lstm_step(q, tape.constant(x[None]), tape.constant(s[None]),
                            tape.constant(c[None]))
    return h.value[0], c2.value[0]


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p = _gru(rng, 3, 4)
    x, s = rng.normal(size=3), rng.normal(size=4)
    want = scalar_gru(p.w_x.tolist(), p.w_h.tolist(), p.b.tolist(), x.tolist(), s.tolist())
    np.testing.assert_allclose(_step_gru(p, x, s), want, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p = cells.LstmParams(rng.normal(size=(16, 2)), rng.normal(size=(16, 4)), rng.normal(size=16))
    x, s, c = rng.normal(size=2), rng.normal(size=4), rng.normal(size=4)
    want_h, want_c = scalar_lstm(p.w_x.tolist(), p.w_h.tolist(), p.b.tolist(), x.tolist(),
                                 s.tolist(), c.tolist())
    h, c2 = _step_lstm(p, x, s, c)
    np.testing.assert_allclose(h, want_h, rtol=0, atol=1e-14)
    np.testing.assert_allclose(c2, want_c, rtol=0, atol=1e-14)


def test_gru_zero_params():
    p = cells.GruParams(np.zeros((6, 3)), np.zeros((6, 2)), np.zeros(6))
    assert np.array_equal(_step_gru(p, np.array([1.0, -2.0, 3.0]), np.zeros(2)), np.zeros(2))


def test_gru_saturated_update_gate_carries_state():
    rng = np.random.default_rng(0)
    p = _gru(rng, 2, 3)
    p.b[3:6] = 1e3
    s = rng.normal(size=3)
    np.testing.assert_allclose(_step_gru(p, rng.normal(size=2), s), s, rtol=0, atol=1e-12)


def test_gru_closed_update_gate_is_bounded():
    rng = np.random.default_rng(1)
    p = _gru(rng, 2, 3, scale=5.0)
    p.b[3:6] = -1e3
    out = _step_gru(p, rng.normal(size=2), rng.normal(size=3) * 10)
    assert np.all(np.abs(out) < 1)


def test_gru_named_blocks():
    rng = np.random.default_rng(2)
    p = _gru(rng, 2, 3)
    q = cells.GruParams.from_gates(p.w_xr, p.w_xz, p.w_xn, p.w_hr, p.w_hz, p.w_hn,
                                   p.b_r, p.b_z, p.b_n)
    assert all(np.array_equal(getattr(p, k), getattr(q, k)) for k in ("w_x", "w_h", "b"))
    assert p.w_xn.shape == (3, 2) and p.w_hr.shape == (3, 3) and p.b_z.shape == (3,)


def test_lstm_zero_params_and_carry():
    p = cells.LstmParams(np.zeros((8, 1)), np.zeros((8, 2)), np.zeros(8))
    h, c = _step_lstm(p, np.array([2.0]), np.zeros(2), np.zeros(2))
    assert np.array_equal(h, np.zeros(2)) and np.array_equal(c, np.zeros(2))
    b = np.zeros(8)
    b[0:2] = -1e3   # input gate shut
    b[2:4] = 1e3    # forget gate open
    p = cells.LstmParams(np.zeros((8, 1)), np.zeros((8, 2)), b)
    c_prev = np.array([0.7, -1.2])
    _, c = _step_lstm(p, np.array([2.0]), np.array([0.1, 0.2]), c_prev)
    np.testing.assert_allclose(c, c_prev, rtol=0, atol=1e-12)


def _encoder(rng, d_x, d_h, zero=False):
    make = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
    half = d_h // 2
    return cells.HyperEncoderParams(
        cells.GruParams(make(3 * half, d_x), make(3 * half, half), make(3 * half)),
        cells.GruParams(make(3 * half, d_x), make(3 * half, half), make(3 * half)))


def _encode(p, x_bar):
    tape = ad.Tape()
    return cells.bigru_encode(p.on_tape(tape, False), x_bar, tape).value


def test_bigru_shapes_and_zero_params():
    rng = np.random.default_rng(0)
    x_bar = rng.normal(size=(2, 5, 3))
    assert _encode(_encoder(rng, 3, 6), x_bar).shape == (2, 5, 6)
    assert np.array_equal(_encode(_encoder(rng, 3, 6, zero=True), x_bar), np.zeros((2, 5, 6)))


def test_bigru_single_step():
    rng = np.random.default_rng(1)
    p = _encoder(rng, 2, 4)
    x_bar = rng.normal(size=(1, 1, 2))
    h = _encode(p, x_bar)
    assert h.shape == (1, 1, 4)
    np.testing.assert_allclose(h[0, 0, :2], _step_gru(p.forward, x_bar[0, 0], np.zeros(2)),
                               atol=1e-15)
    np.testing.assert_allclose(h[0, 0, 2:], _step_gru(p.backward, x_bar[0, 0], np.zeros(2)),
                               atol=1e-15)


def test_bigru_time_reversal_symmetry():
    rng = np.random.default_rng(2)
    p = _encoder(rng, 2, 6)
    swapped = cells.HyperEncoderParams(p.backward, p.forward)
    x_bar = rng.normal(size=(1, 4, 2))
    h = _encode(p, x_bar)
    h_rev = _encode(swapped, x_bar[:, ::-1].copy())
    np.testing.assert_allclose(h_rev[:, ::-1], np.concatenate([h[..., 3:], h[..., :3]], -1),
                               rtol=0, atol=1e-15)


def _attention(rng, d_s, d_h, d_a):
    return cells.AttentionParams(rng.normal(size=d_a), rng.normal(size=(d_a, d_s)),
                                 rng.normal(size=(d_a, d_h)), rng.normal(size=d_a))


def _attend(a, s, h):
    tape = ad.Tape()
    c, alpha = cells.attend(a.on_tape(tape, False), tape.constant(s), tape.constant(h))
    return c.value, alpha.value


def test_attention_singleton_and_identical_rows():
    rng = np.random.default_rng(0)
    a = _attention(rng, 3, 4, 5)
    h = rng.normal(size=(2, 1, 4))
    c, alpha = _attend(a, rng.normal(size=(2, 3)), h)
    assert np.array_equal(alpha, np.ones((2, 1)))
    np.testing.assert_allclose(c, h[:, 0], atol=1e-15)
    h = np.repeat(rng.normal(size=(1, 1, 4)), 6, axis=1)
    _, alpha = _attend(a, rng.normal(size=(1, 3)), h)
    np.testing.assert_allclose(alpha, np.full((1, 6), 1 / 6), rtol=1e-14)


@given(st.integers(0, 10_000), st.integers(1, 9))
def test_attention_is_a_distribution(seed, t_k):
    rng = np.random.default_rng(seed)
    a = _attention(rng, 3, 4, 5)
    _, alpha = _attend(a, rng.normal(size=(2, 3)) * 3, rng.normal(size=(2, t_k, 4)) * 3)
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)


def _gen(rng, d_s, d_x, d_h, d_v, kind="gru", ones=False):
    G = cells.n_gates(kind)
    make = (lambda *s: np.ones(s)) if ones else (lambda *s: rng.normal(size=s))
    return cells.WeightGenParams(make(d_v, d_h), make(G * d_s * d_s, d_v),
                                 make(G * d_s * d_x, d_v), make(G * d_s, d_v),
                                 make(d_s, d_h), make(d_s))


def _generate(g, c, d_s, d_x, kind="gru"):
    tape = ad.Tape()
    return cells.generate_weights(g.on_tape(tape, False), tape.constant(c), d_s, d_x, kind)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_generated_shapes_and_zero_context(kind):
    rng = np.random.default_rng(0)
    G = cells.n_gates(kind)
    g = _gen(rng, 3, 2, 4, 5, kind)
    w = _generate(g, np.zeros((2, 4)), 3, 2, kind)
    assert w.w_h.shape == (2, G * 3, 3) and w.w_x.shape == (2, G * 3, 2) and w.b.shape == (2, G * 3)
    assert [f.shape[-1] for f in w.flat] == [G * 9, G * 6, G * 3]
    assert not np.any(w.w_h.value) and not np.any(w.w_x.value) and not np.any(w.b.value)


def test_generated_weights_are_linear():
    rng = np.random.default_rng(1)
    g = _gen(rng, 3, 2, 4, 5)
    c1, c2 = rng.normal(size=(2, 1, 4))
    w1, w2 = _generate(g, c1, 3, 2), _generate(g, c2, 3, 2)
    w12, w2x = _generate(g, c1 + c2, 3, 2), _generate(g, 2 * c1, 3, 2)
    for a, b, s, d in zip(w1.flat, w2.flat, w12.flat, w2x.flat):
        np.testing.assert_allclose(s.value, a.value + b.value, rtol=0,
                                   atol=1e-12 * (1 + np.abs(s.value).max()))
        np.testing.assert_allclose(d.value, 2 * a.value, rtol=0, atol=1e-12)


def test_generated_hand_case():
    g = _gen(None, 2, 1, 1, 1, ones=True)
    w = _generate(g, np.ones((1, 1)), 2, 1)
    assert np.array_equal(w.flat[0].value[0], np.ones(12))
    parts = cells.split_generated([f.value[0] for f in w.flat], 2, 1)
    for gate in "rzn":
        assert np.array_equal(parts[f"w_h{gate}"], np.ones((2, 2)))


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_chunk_reshape_round_trip(kind):
    rng = np.random.default_rng(3)
    w = _generate(_gen(rng, 3, 2, 4, 5, kind), rng.normal(size=(1, 4)), 3, 2, kind)
    flat = [f.value[0] for f in w.flat]
    parts = cells.split_generated(flat, 3, 2, kind)
    gates = cells.GATES[kind]
    back = [np.concatenate([tn.flatten(parts[f"w_{m}{q}"]) for q in gates]) for m in "hx"]
    back.append(np.concatenate([parts[f"b_{q}"] for q in gates]))
    for a, b in zip(back, flat):
        assert np.array_equal(a, b)
    # the batched reshape used by the model agrees with per-gate chunking
    for j, q in enumerate(gates):
        assert np.array_equal(w.w_h.value[0, 3 * j:3 * j + 3], parts[f"w_h{q}"])


def _init_state(g, h):
    tape = ad.Tape()
    return cells.init_state(g.on_tape(tape, False), tape.constant(h)).value


def test_init_state_cases():
    rng = np.random.default_rng(0)
    g = _gen(rng, 3, 1, 3, 2)
    h = rng.normal(size=(1, 4, 3))
    b = g.b_init.copy()
    zero_w = cells.WeightGenParams(g.w_c, g.w_hv, g.w_xv, g.w_bv, np.zeros((3, 3)), b)
    np.testing.assert_array_equal(_init_state(zero_w, h)[0], b)
    h0 = h.copy()
    h0[:, -1] = 0
    np.testing.assert_array_equal(_init_state(g, h0)[0], b)
    ident = cells.WeightGenParams(g.w_c, g.w_hv, g.w_xv, g.w_bv, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(_init_state(ident, h)[0], h[0, -1])
