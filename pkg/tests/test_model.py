import math

import numpy as np
import pytest

from hyperforecast import cells
from hyperforecast import model as md
from hyperforecast.errors import ConfigurationError, ContractError, DataError, DimensionError


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def small(**kw):
    base = dict(d_x=2, d_y=1, d_s=3, d_h=4, d_v=3, d_a=3, T=8, k=2, T_x=3)
    base.update(kw)
    return md.ModelConfig(**base)


def test_scalar_pipeline_oracle():
    # T_x = 1 and T_k = 1 with one unit everywhere except the two encoder directions
    cfg = md.ModelConfig(d_x=1, d_y=1, d_s=1, d_h=2, d_v=1, d_a=1, T=4, k=4, T_x=1)
    m = md.init_params(cfg, seed=3)
    rng = np.random.default_rng(0)
    for name in m.params:
        m.params[name] = rng.uniform(-1, 1, size=m.params[name].shape)
    P = {k: v.tolist() for k, v in m.params.items()}
    xhat = rng.normal(size=(1, 4))
    x = rng.normal(size=(1, 1))

    def flat(name):
        return [row[0] if isinstance(row, list) else row for row in P[name]]

    def enc(d, inp):
        wx, wh, b = flat(f"enc.{d}.w_x"), flat(f"enc.{d}.w_h"), P[f"enc.{d}.b"]
        r = _sig(wx[0] * inp + b[0])
        z = _sig(wx[1] * inp + b[1])
        n = math.tanh(wx[2] * inp + r * b[2])
        return (1 - z) * n

    x_bar = float(np.mean(xhat))
    h = [enc("forward", x_bar), enc("backward", x_bar)]
    s0 = P["gen.w_init"][0][0] * h[0] + P["gen.w_init"][0][1] * h[1] + P["gen.b_init"][0]
    c = h  # one pooled step, so attention weight 1
    v = P["gen.w_c"][0][0] * c[0] + P["gen.w_c"][0][1] * c[1]
    wh = [g * v for g in flat("gen.w_hv")]
    wx = [g * v for g in flat("gen.w_xv")]
    b = [g * v for g in flat("gen.w_bv")]
    r = _sig(wx[0] * x[0, 0] + wh[0] * s0 + b[0])
    z = _sig(wx[1] * x[0, 0] + wh[1] * s0 + b[1])
    n = math.tanh(wx[2] * x[0, 0] + r * (wh[2] * s0 + b[2]))
    s1 = (1 - z) * n + z * s0
    want = P["head.w_out"][0][0] * s1 + P["head.b_out"][0]
    got = md.forward_one(m, x, xhat)
    assert got.shape == (1, 1)
    assert abs(got[0, 0] - want) < 1e-14


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_all_zero_parameters_give_zero(kind):
    m = md.init_params(small(), 0, kind)
    for v in m.params.values():
        v[...] = 0.0
    rng = np.random.default_rng(1)
    assert np.array_equal(md.forward_one(m, rng.normal(size=(2, 3)), rng.normal(size=(2, 8))),
                          np.zeros((1, 1)))


def test_forward_all_and_predict():
    m = md.init_params(small(T_y=2), 4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3))
    S = rng.normal(size=(3, 2, 8))
    outs = md.forward_all(m, x, S)
    assert [o.shape for o in outs] == [(1, 2)] * 3
    assert np.array_equal(md.forward_all(m, x, S[:1])[0], md.forward_one(m, x, S[0]))
    dup = md.forward_all(m, x, [S[0], S[0]])
    assert np.array_equal(dup[0], dup[1])
    assert all(np.array_equal(a, b) for a, b in zip(outs, md.forward_all(m, x, S, workers=3)))
    rev = md.forward_all(m, x, S[::-1])
    assert np.array_equal(rev[0], outs[2])
    assert np.array_equal(md.predict(m, x, S, "last"), outs[2])
    np.testing.assert_allclose(md.predict(m, x, S[:2], "mean"), (outs[0] + outs[1]) / 2,
                               rtol=0, atol=1e-15)
    assert np.array_equal(md.predict(m, x, S[:1], "last"), md.predict(m, x, S[:1], "mean"))
    with pytest.raises(ContractError):
        md.predict(m, x, [], "last")
    with pytest.raises(ConfigurationError):
        md.predict(m, x, S, "median")


def test_dimension_errors_name_stage():
    m = md.init_params(small(), 0)
    with pytest.raises(DimensionError, match="encoder"):
        md.forward_one(m, np.zeros((2, 3)), np.zeros((2, 7)))
    with pytest.raises(DimensionError, match="main"):
        md.forward_one(m, np.zeros((2, 4)), np.zeros((2, 8)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        small(k=3)
    with pytest.raises(ConfigurationError):
        small(d_h=5)
    with pytest.raises(ConfigurationError):
        small(task="classification", T_y=2)
    assert md.ModelConfig(d_h=6).d_v == 6 and md.ModelConfig(T=16, k=4).T_x == 16


def test_init_determinism():
    a, b = md.init_params(small(), 7), md.init_params(small(), 7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = md.init_params(small(), 8)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_init_bounds():
    cfg = small()
    m = md.init_params(cfg, 0, "lstm")
    for name, value in m.params.items():
        if name.endswith(".b") or name in ("att.b_s", "gen.b_init", "head.b_out"):
            continue
        bound = 1.0 if name in md._GENERATORS else 1 / math.sqrt(value.shape[-1])
        assert np.abs(value).max() <= bound
    assert np.array_equal(m.params["enc.forward.b"][2:4], np.ones(2))
    assert not np.any(m.params["enc.forward.b"][:2])
    damped = md.init_params(cfg, 0, damped_generators=True)
    assert np.abs(damped.params["gen.w_hv"]).max() <= 1 / cfg.d_v


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_shape_audit(kind):
    cfg = small()
    G = cells.n_gates(kind)
    shapes = {k: v.shape for k, v in md.init_params(cfg, 0, kind).params.items()}
    assert shapes["gen.w_hv"] == (G * 9, 3) and shapes["gen.w_xv"] == (G * 6, 3)
    assert shapes["gen.w_bv"] == (G * 3, 3) and shapes["gen.w_c"] == (3, 4)
    assert shapes["enc.forward.w_x"] == (G * 2, 2) and shapes["enc.backward.w_h"] == (G * 2, 2)
    assert shapes["att.w_s"] == (3, 3) and shapes["att.w_h"] == (3, 4)
    assert shapes["head.w_out"] == (1, 3) and shapes["gen.w_init"] == (3, 4)


def test_checkpoint_round_trip(tmp_path):
    for m in (md.init_params(small(), 1, "lstm"), md.init_vanilla(small(d_s=5), 2)):
        path = tmp_path / f"{m.cell_kind}.ckpt"
        md.save_checkpoint(m, path)
        back = md.load_checkpoint(path)
        assert back.cell_kind == m.cell_kind and back.config == m.config
        assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(DataError):
        md.load_checkpoint(tmp_path / "bad.ckpt")


def test_export_hidden_states(tmp_path):
    m = md.init_params(small(), 0)
    S = np.random.default_rng(3).normal(size=(128, 2, 8))
    rows = md.export_hidden_states(m, None, S, tmp_path / "a.csv")
    md.export_hidden_states(m, None, S, tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text().splitlines()
    assert rows.shape == (128, 4) and len(text) == 129 and len(text[1].split(",")) == 4
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_matched_vanilla_is_closest():
    cfg = small(d_s=32, d_h=16, d_v=16, d_a=16, d_x=1, T=64, k=8)
    v = md.matched_vanilla_config(cfg)
    target = md.init_params(cfg, 0).n_params()
    n = md.init_vanilla(v, 0).n_params()
    for d in (v.d_s - 1, v.d_s + 1):
        other = md.init_vanilla(small(**{**v.to_dict(), "d_s": d}), 0).n_params()
        assert abs(n - target) <= abs(other - target)


def test_vanilla_ignores_history():
    m = md.init_vanilla(small(), 0)
    x = np.random.default_rng(4).normal(size=(2, 3))
    assert md.forward_one(m, x, None).shape == (1, 1)
