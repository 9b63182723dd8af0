"""Hyper model assembly, inference helpers and checkpoints.

A :class:`HyperModel` owns a flat, ordered ``dict`` of named float64 arrays.
Its forward pass on a batch of (input window, historical window) pairs is:

    avg-pool history -> bidirectional encoder -> s_0 from last encoder row
    -> for each input step: attention over encoder rows -> generated cell
       weights -> main cell update
    -> affine head on the final main state

:class:`VanillaGRU` is the static-weight baseline with the same interface.
"""
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import cells
from . import tensor as tn
from .errors import ConfigurationError, ContractError, DataError, DimensionError

CELL_KINDS = ("gru", "lstm")
TASKS = ("regression", "classification")


@dataclass
class ModelConfig:
    """Dimensions of a hyper model.

    ``d_v`` and ``d_a`` default to ``d_h``; ``T_x`` defaults to ``T``. For
    classification ``d_y`` is the number of classes and ``T_y`` must be 1.
    """

    d_x: int = 1
    d_y: int = 1
    d_s: int = 32
    d_h: int = 16
    d_v: int = None
    d_a: int = None
    T: int = 64
    k: int = 8
    T_x: int = None
    T_y: int = 1
    task: str = "regression"

    def __post_init__(self):
        if self.d_v is None:
            self.d_v = self.d_h
        if self.d_a is None:
            self.d_a = self.d_h
        if self.T_x is None:
            self.T_x = self.T
        self.validate()

    def validate(self):
        for name in ("d_x", "d_y", "d_s", "d_h", "d_v", "d_a", "T", "k", "T_x", "T_y"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_h % 2:
            raise ConfigurationError(f"d_h={self.d_h} must be even (two encoder directions)")
        if self.k > self.T or self.T % self.k:
            raise ConfigurationError(f"k={self.k} must divide T={self.T}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "classification" and self.T_y != 1:
            raise ConfigurationError("classification requires T_y = 1")

    @property
    def T_k(self):
        return self.T // self.k

    @property
    def out_dim(self):
        return self.d_y * self.T_y

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class _Model:
    """Shared plumbing: ordered parameters, binding to a tape, copying."""

    kind = None
    uses_history = True

    def __init__(self, config, params, seed=0):
        self.config = config
        self.params = params
        self.seed = seed
        expected = self.shapes(config)
        if list(params) != list(expected):
            raise ContractError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape} != {shape}")

    @property
    def cell_kind(self):
        return self.kind

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return type(self)(self.config, {k: v.copy() for k, v in self.params.items()},
                          self.seed)

    def bind(self, tape, requires_grad=True):
        """Put every parameter on ``tape``; returns {name: Variable}."""
        return {name: tape.variable(value, requires_grad, name=name)
                for name, value in self.params.items()}


class HyperModel(_Model):
    """Hyper layers (bidirectional encoder + attention + weight generator)
    driving a main GRU or LSTM cell whose weights change at every step."""

    def __init__(self, config, cell_kind, params, seed=0):
        if cell_kind not in CELL_KINDS:
            raise ConfigurationError(f"cell_kind must be one of {CELL_KINDS}, got {cell_kind!r}")
        self.kind = cell_kind
        super().__init__(config, params, seed)

    def copy(self):
        return HyperModel(self.config, self.kind,
                          {k: v.copy() for k, v in self.params.items()}, self.seed)

    def shapes(self, config):
        return hyper_shapes(config, self.kind)

    def structure(self, P):
        """Group a flat {name: value} mapping into the cell parameter types."""
        enc_cls = cells.GruParams if self.kind == "gru" else cells.LstmParams
        return SimpleNamespace(
            encoder=cells.HyperEncoderParams(
                forward=enc_cls(P["enc.forward.w_x"], P["enc.forward.w_h"], P["enc.forward.b"]),
                backward=enc_cls(P["enc.backward.w_x"], P["enc.backward.w_h"],
                                 P["enc.backward.b"]),
            ),
            attention=cells.AttentionParams(P["att.v"], P["att.w_s"], P["att.w_h"], P["att.b_s"]),
            weight_gen=cells.WeightGenParams(P["gen.w_c"], P["gen.w_hv"], P["gen.w_xv"],
                                             P["gen.w_bv"], P["gen.w_init"], P["gen.b_init"]),
            w_out=P["head.w_out"],
            b_out=P["head.b_out"],
        )

    def encode(self, tape, P, xhat):
        """Encoder states h [N, T_k, d_h] for historical windows xhat [N, d_x, T]."""
        cfg = self.config
        xhat = np.asarray(xhat, dtype=np.float64)
        if xhat.ndim != 3 or xhat.shape[1:] != (cfg.d_x, cfg.T):
            raise DimensionError(
                f"encoder stage: historical windows {xhat.shape} != [N, {cfg.d_x}, {cfg.T}]")
        x_bar = np.ascontiguousarray(tn.avg_pool_1d(xhat, cfg.k).transpose(0, 2, 1))
        S = self.structure(P)
        return cells.bigru_encode(S.encoder, x_bar, tape)

    def forward(self, tape, P, x, xhat):
        """Head output [N, d_y*T_y] (logits for classification).

        x: [N, T_x, d_x] input windows; xhat: [N, d_x, T] historical windows.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (cfg.T_x, cfg.d_x) or x.shape[0] != len(xhat):
            raise DimensionError(
                f"main stage: input windows {x.shape} != [{len(xhat)}, {cfg.T_x}, {cfg.d_x}]")
        S = self.structure(P)
        h = self.encode(tape, P, xhat)
        s = cells.init_state(S.weight_gen, h)
        keys = cells.attention_keys(S.attention, h)
        cell = tape.constant(np.zeros((x.shape[0], cfg.d_s))) if self.kind == "lstm" else None
        for t in range(cfg.T_x):
            c_t, _ = cells.attend(S.attention, s, h, keys)
            w = cells.generate_weights(S.weight_gen, c_t, cfg.d_s, cfg.d_x, self.kind)
            x_t = tape.constant(np.ascontiguousarray(x[:, t, :]))
            if cell is None:
                s = cells.generated_gru_step(w, x_t, s)
            else:
                s, cell = cells.generated_lstm_step(w, x_t, s, cell)
        return ad.linear(s, S.w_out, S.b_out)


class VanillaGRU(_Model):
    """Static-weight GRU over the input window only; ignores history."""

    kind = "vanilla_gru"
    uses_history = False

    def shapes(self, config):
        return vanilla_shapes(config)

    def forward(self, tape, P, x, xhat=None):
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (cfg.T_x, cfg.d_x):
            raise DimensionError(f"input windows {x.shape} != [N, {cfg.T_x}, {cfg.d_x}]")
        p = cells.GruParams(P["gru.w_x"], P["gru.w_h"], P["gru.b"])
        steps = [tape.constant(np.ascontiguousarray(x[:, t, :])) for t in range(cfg.T_x)]
        s = cells.run_static(p, steps, tape)[-1]
        return ad.linear(s, P["head.w_out"], P["head.b_out"])


# ---------------------------------------------------------------------------
# shapes and initialization

def hyper_shapes(config, cell_kind):
    """Ordered {name: shape} for every HyperModel parameter."""
    c = config
    G = cells.n_gates(cell_kind)
    half = c.d_h // 2
    shapes = {}
    for direction in ("forward", "backward"):
        shapes[f"enc.{direction}.w_x"] = (G * half, c.d_x)
        shapes[f"enc.{direction}.w_h"] = (G * half, half)
        shapes[f"enc.{direction}.b"] = (G * half,)
    shapes.update({
        "att.v": (c.d_a,),
        "att.w_s": (c.d_a, c.d_s),
        "att.w_h": (c.d_a, c.d_h),
        "att.b_s": (c.d_a,),
        "gen.w_c": (c.d_v, c.d_h),
        "gen.w_hv": (G * c.d_s * c.d_s, c.d_v),
        "gen.w_xv": (G * c.d_s * c.d_x, c.d_v),
        "gen.w_bv": (G * c.d_s, c.d_v),
        "gen.w_init": (c.d_s, c.d_h),
        "gen.b_init": (c.d_s,),
        "head.w_out": (c.out_dim, c.d_s),
        "head.b_out": (c.out_dim,),
    })
    return shapes


def vanilla_shapes(config):
    c = config
    return {
        "gru.w_x": (3 * c.d_s, c.d_x),
        "gru.w_h": (3 * c.d_s, c.d_s),
        "gru.b": (3 * c.d_s,),
        "head.w_out": (c.out_dim, c.d_s),
        "head.b_out": (c.out_dim,),
    }


_BIASES = {"enc.forward.b", "enc.backward.b", "att.b_s", "gen.b_init", "head.b_out", "gru.b"}
_GENERATORS = {"gen.w_hv", "gen.w_xv", "gen.w_bv"}


def _init(shapes, seed, lstm_encoder, generator_bound=1.0):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name in _BIASES:
            value = np.zeros(shape)
            if lstm_encoder and name.startswith("enc."):
                d = shape[0] // 4
                value[d:2 * d] = 1.0  # forget gate
        else:
            # generators map a small context embedding to whole weight matrices,
            # so a fan-in bound would leave the generated weights far too small
            if name in _GENERATORS:
                bound = generator_bound
            else:
                bound = 1.0 / math.sqrt(shape[-1])
            value = _uniform(rng, shape, bound)
        params[name] = value
    return params


def init_params(config, seed, cell_kind="gru", damped_generators=False):
    """Deterministic HyperModel initialization.

    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) except the generator
    matrices, which are U(-1, 1); biases zero except the LSTM encoder forget
    gate (1). ``damped_generators`` instead bounds the generators by
    1/sqrt(fan_in)/sqrt(d_v), which trains markedly slower.
    """
    if cell_kind not in CELL_KINDS:
        raise ConfigurationError(f"cell_kind must be one of {CELL_KINDS}, got {cell_kind!r}")
    bound = 1.0 / config.d_v if damped_generators else 1.0
    params = _init(hyper_shapes(config, cell_kind), seed, cell_kind == "lstm", bound)
    return HyperModel(config, cell_kind, params, seed)


def init_vanilla(config, seed):
    return VanillaGRU(config, _init(vanilla_shapes(config), seed, False), seed)


def matched_vanilla_config(config, cell_kind="gru"):
    """Config of a VanillaGRU whose parameter count is closest to the hyper model's."""
    target = sum(math.prod(s) for s in hyper_shapes(config, cell_kind).values())
    best = None
    for d in range(1, 4096):
        cfg = ModelConfig(**{**config.to_dict(), "d_s": d})
        count = sum(math.prod(s) for s in vanilla_shapes(cfg).values())
        if best is None or abs(count - target) < abs(best[1] - target):
            best = (cfg, count)
        if count > target:
            break
    return best[0]


# ---------------------------------------------------------------------------
# inference

def _finish(model, out):
    if model.config.task == "classification":
        return tn.softmax(out, axis=-1)
    return out


def forward_batch(model, x, xhat, chunk_size=512):
    """Numeric forward for N rows; x [N, T_x, d_x], xhat [N, d_x, T] -> [N, d_y*T_y]."""
    n = len(x)
    out = []
    for lo in range(0, n, chunk_size):
        tape = ad.Tape()
        P = model.bind(tape, requires_grad=False)
        hi = min(n, lo + chunk_size)
        xh = None if xhat is None else xhat[lo:hi]
        out.append(model.forward(tape, P, x[lo:hi], xh).value)
    return _finish(model, np.concatenate(out, axis=0))


def forward_one(model, x, x_hat_n):
    """Prediction [d_y, T_y] from one input window x [d_x, T_x] and one
    historical window x_hat_n [d_x, T]."""
    x = np.asarray(x, dtype=np.float64)
    xh = None if x_hat_n is None else np.asarray(x_hat_n, dtype=np.float64)[None]
    out = forward_batch(model, x.T[None], xh)
    return out.reshape(model.config.d_y, model.config.T_y)


def forward_all(model, x, S, workers=None):
    """forward_one for every window in S, order preserved."""
    if len(S) == 0:
        raise ContractError("historical set is empty")
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda w: forward_one(model, x, w), S))
    return [forward_one(model, x, w) for w in S]


def predict(model, x, S, mode="last"):
    """Deployed prediction: the most recent window's output, or the mean over S."""
    if len(S) == 0:
        raise ContractError("historical set is empty")
    if mode == "last":
        return forward_one(model, x, S[-1])
    if mode == "mean":
        return np.mean(forward_all(model, x, S), axis=0)
    raise ConfigurationError(f"unknown predict mode {mode!r}")


def export_hidden_states(model, x, S, path):
    """Write one CSV row per window: the flattened final encoder state."""
    if not model.uses_history:
        raise ContractError("model has no hyper layers")
    tape = ad.Tape()
    P = model.bind(tape, requires_grad=False)
    h = model.encode(tape, P, np.asarray(S, dtype=np.float64)).value
    last = h[:, -1, :]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(f"h{j}" for j in range(last.shape[1])) + "\n")
        for row in last:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return last


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"HYPFCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model, path):
    """Header (version, config, cell kind, seed) then named little-endian tensors."""
    header = json.dumps({"version": FORMAT_VERSION, "config": model.config.to_dict(),
                         "cell_kind": model.cell_kind, "seed": int(model.seed)},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, value in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise DataError(f"{path}: not a model checkpoint")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        out = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return out

    version, hlen = take("<II")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        size = math.prod(shape)
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(
            np.float64).reshape(shape)
        pos += 8 * size
    config = ModelConfig.from_dict(header["config"])
    if header["cell_kind"] == VanillaGRU.kind:
        return VanillaGRU(config, params, header["seed"])
    return HyperModel(config, header["cell_kind"], params, header["seed"])
