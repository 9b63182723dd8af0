"""Tape-based reverse-mode differentiation over the tensor kernels.

A :class:`Tape` records every operation applied to :class:`Variable` objects
in execution order. :meth:`Tape.backward` walks the record once in reverse and
accumulates gradients. The graph is rebuilt on every forward pass, which is
what the per-step weight generation of the hyper model needs.

Ops live in a registry (``OPS``) of forward/backward function pairs::

    forward(*input_values, **attrs) -> (output_value, saved)
    backward(grad_out, saved, input_values, needs, **attrs) -> tuple of input grads

``needs[i]`` is False when input ``i`` cannot reach a trainable leaf; a
backward rule may return ``None`` for such inputs to skip work.
"""
import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError, NumericError


@dataclass(frozen=True)
class Op:
    forward: object
    backward: object


OPS = {}


def register(name, forward, backward):
    OPS[name] = Op(forward, backward)


@contextlib.contextmanager
def override_backward(name, backward):
    """Temporarily replace the backward rule of op ``name`` (test hook)."""
    original = OPS[name]
    OPS[name] = Op(original.forward, backward)
    try:
        yield
    finally:
        OPS[name] = original


class Variable:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    def __init__(self, value, tape, index, requires_grad, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.value.shape}, node={self.index})"

    def __add__(self, other):
        return self.tape.forward("add", [self, other])

    def __sub__(self, other):
        return self.tape.forward("sub", [self, other])

    def __mul__(self, other):
        return self.tape.forward("mul", [self, other])

    def __neg__(self):
        return self.tape.forward("neg", [self])


class Tape:
    """Append-only record of operations; one tape per forward/backward pass."""

    def __init__(self):
        self._ops = []
        self._inputs = []
        self._attrs = []
        self._saved = []
        self._values = []
        self._needs = []
        self._leaves = []

    def __len__(self):
        return len(self._ops)

    def _append(self, op, inputs, attrs, saved, value, requires_grad):
        self._ops.append(op)
        self._inputs.append(inputs)
        self._attrs.append(attrs)
        self._saved.append(saved)
        self._values.append(value)
        self._needs.append(requires_grad)
        return len(self._ops) - 1

    def variable(self, value, requires_grad=False, name=None):
        """Record a leaf. Trainable leaves get ``requires_grad=True``."""
        value = tn.as_tensor(value)
        idx = self._append(None, (), None, None, value, requires_grad)
        var = Variable(value, self, idx, requires_grad, name)
        self._leaves.append(var)
        return var

    def constant(self, value):
        return self.variable(value, requires_grad=False)

    def _lift(self, x):
        if isinstance(x, Variable):
            if x.tape is not self:
                raise ContractError(f"{x!r} belongs to a different tape")
            return x
        return self.constant(x)

    def forward(self, op, inputs, **attrs):
        """Apply registered ``op`` to ``inputs`` and record it."""
        try:
            rule = OPS[op]
        except KeyError:
            raise ContractError(f"unknown op {op!r}") from None
        inputs = [self._lift(x) for x in inputs]
        value, saved = rule.forward(*[x.value for x in inputs], **attrs)
        requires_grad = any(x.requires_grad for x in inputs)
        idx = self._append(op, tuple(x.index for x in inputs), attrs, saved, value,
                           requires_grad)
        return Variable(value, self, idx, requires_grad)

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every trainable leaf on this tape.

        Returns a dict keyed by leaf :class:`Variable`. Leaves that do not
        reach ``loss`` map to zeros of their own shape.
        """
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = [None] * len(self._ops)
        grads[loss.index] = np.ones_like(loss.value)
        ops, inputs, needs = self._ops, self._inputs, self._needs
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            op = ops[idx]
            if g is None or op is None:
                continue
            in_idx = inputs[idx]
            mask = tuple(needs[j] for j in in_idx)
            gin = OPS[op].backward(g, self._saved[idx], [self._values[j] for j in in_idx],
                                   mask, **self._attrs[idx])
            for j, gj, m in zip(in_idx, gin, mask):
                if gj is None or not m:
                    continue
                # never accumulate in place: backward rules may hand out aliases
                grads[j] = gj if grads[j] is None else grads[j] + gj
            if idx != loss.index:
                grads[idx] = None
        out = {}
        for leaf in self._leaves:
            if leaf.requires_grad:
                g = grads[leaf.index]
                out[leaf] = np.zeros_like(leaf.value) if g is None else g
        return out

    def replay(self, leaf_values=None):
        """Re-run every recorded op from the leaves; returns all node values.

        ``leaf_values`` optionally maps leaf Variables to substitute values.
        """
        leaf_values = leaf_values or {}
        subst = {v.index: tn.as_tensor(x) for v, x in leaf_values.items()}
        values = []
        for idx, op in enumerate(self._ops):
            if op is None:
                values.append(subst.get(idx, self._values[idx]))
            else:
                ins = [values[j] for j in self._inputs[idx]]
                values.append(OPS[op].forward(*ins, **self._attrs[idx])[0])
        return values


# ---------------------------------------------------------------------------
# op definitions

def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _add_f(a, b):
    _same_shape("add", a, b)
    return a + b, None


def _add_b(g, saved, vals, needs):
    return g, g


def _sub_f(a, b):
    _same_shape("sub", a, b)
    return a - b, None


def _sub_b(g, saved, vals, needs):
    return g, -g


def _mul_f(a, b):
    _same_shape("mul", a, b)
    return a * b, None


def _mul_b(g, saved, vals, needs):
    a, b = vals
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _neg_f(a):
    return -a, None


def _neg_b(g, saved, vals, needs):
    return (-g,)


def _scale_f(a, c):
    return a * c, None


def _scale_b(g, saved, vals, needs, c):
    return (g * c,)


def _badd_f(x, y, axis=None):
    ye = y if axis is None else np.expand_dims(y, axis)
    out = x + ye
    if out.shape != x.shape:
        raise DimensionError(f"broadcast_add: {y.shape} does not broadcast into {x.shape}")
    return out, None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _badd_b(g, saved, vals, needs, axis=None):
    x, y = vals
    gy = None
    if needs[1]:
        target = y.shape if axis is None else np.expand_dims(y, axis).shape
        gy = _unbroadcast(g, target).reshape(y.shape)
    return g, gy


def _sigmoid_f(a):
    y = tn.sigmoid(a)
    return y, y


def _sigmoid_b(g, y, vals, needs):
    return (g * y * (1.0 - y),)


def _tanh_f(a):
    y = np.tanh(a)
    return y, y


def _tanh_b(g, y, vals, needs):
    return (g * (1.0 - y * y),)


def _exp_f(a):
    y = np.exp(a)
    return y, y


def _exp_b(g, y, vals, needs):
    return (g * y,)


def _log_f(a):
    return np.log(a), None


def _log_b(g, saved, vals, needs):
    return (g / vals[0],)


def _matvec_f(m, v):
    return tn.matvec(m, v), None


def _matvec_b(g, saved, vals, needs):
    m, v = vals
    return (np.outer(g, v) if needs[0] else None), (g @ m if needs[1] else None)


def _linear_f(x, w):
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    return x @ w.T, None


def _linear_b(g, saved, vals, needs):
    x, w = vals
    gx = g @ w if needs[0] else None
    gw = None
    if needs[1]:
        gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return gx, gw


def _bmv_f(w, v):
    return tn.batched_matvec(w, v), None


def _bmv_b(g, saved, vals, needs):
    w, v = vals
    gw, gv = tn.kernels.bmv_backward(w, v, g)
    return gw, gv


def _wsum_f(alpha, h):
    if alpha.shape != h.shape[:2]:
        raise DimensionError(f"wsum: weights {alpha.shape} do not match rows {h.shape}")
    return np.matmul(alpha[:, None, :], h)[:, 0, :], None


def _wsum_b(g, saved, vals, needs):
    alpha, h = vals
    ga = np.matmul(h, g[:, :, None])[:, :, 0] if needs[0] else None
    gh = alpha[:, :, None] * g[:, None, :] if needs[1] else None
    return ga, gh


def _slice_f(x, start, stop, axis=-1):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(index)]), None


def _slice_b(g, saved, vals, needs, start, stop, axis=-1):
    x = vals[0]
    out = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    out[tuple(index)] = g
    return (out,)


def _reshape_f(x, shape):
    try:
        return x.reshape(shape), None
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None


def _reshape_b(g, saved, vals, needs, shape):
    return (g.reshape(vals[0].shape),)


def _concat_f(*xs, axis=-1):
    return np.concatenate(xs, axis=axis), None


def _concat_b(g, saved, vals, needs, axis=-1):
    bounds = np.cumsum([x.shape[axis] for x in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _stack_f(*xs, axis=0):
    return np.stack(xs, axis=axis), None


def _stack_b(g, saved, vals, needs, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))


def _pool_f(x, k):
    return tn.avg_pool_1d(x, k), None


def _pool_b(g, saved, vals, needs, k):
    return (np.repeat(g / k, k, axis=-1),)


def _softmax_f(x):
    y = tn.softmax(x, axis=-1)
    return y, y


def _softmax_b(g, y, vals, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_f(x):
    y = tn.log_softmax(x, axis=-1)
    return y, y


def _log_softmax_b(g, y, vals, needs):
    return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def _sum_f(x):
    return np.array([x.sum()]), None


def _sum_b(g, saved, vals, needs):
    return (np.full_like(vals[0], g[0]),)


def _mean_f(x):
    return np.array([x.mean()]), None


def _mean_b(g, saved, vals, needs):
    return (np.full_like(vals[0], g[0] / vals[0].size),)


def _sum_axis_f(x, axis=-1):
    return x.sum(axis=axis), None


def _sum_axis_b(g, saved, vals, needs, axis=-1):
    return (np.broadcast_to(np.expand_dims(g, axis), vals[0].shape).copy(),)


def _gru_f(a, hb, s_prev):
    d = s_prev.shape[-1]
    if a.shape != hb.shape or a.shape[-1] != 3 * d or a.shape[0] != s_prev.shape[0]:
        raise DimensionError(
            f"gru_gates: projections {a.shape}/{hb.shape} do not fit state {s_prev.shape}")
    s, r, z, n = tn.kernels.gru_gates_forward(a, hb, s_prev)
    return s, (r, z, n)


def _gru_b(g, saved, vals, needs):
    a, hb, s_prev = vals
    r, z, n = saved
    return tn.kernels.gru_gates_backward(g, hb, s_prev, r, z, n)


def _lstm_f(pre, c_prev):
    d = c_prev.shape[-1]
    if pre.shape[-1] != 4 * d or pre.shape[0] != c_prev.shape[0]:
        raise DimensionError(f"lstm_gates: {pre.shape} does not fit cell {c_prev.shape}")
    h, c, i, f, gg, o, tc = tn.kernels.lstm_gates_forward(pre, c_prev)
    return np.concatenate([h, c], axis=1), (i, f, gg, o, tc)


def _lstm_b(g, saved, vals, needs):
    pre, c_prev = vals
    i, f, gg, o, tc = saved
    d = c_prev.shape[-1]
    gh = np.ascontiguousarray(g[:, :d])
    gc = np.ascontiguousarray(g[:, d:])
    return tn.kernels.lstm_gates_backward(gh, gc, c_prev, i, f, gg, o, tc)


register("add", _add_f, _add_b)
register("sub", _sub_f, _sub_b)
register("mul", _mul_f, _mul_b)
register("neg", _neg_f, _neg_b)
register("scale", _scale_f, _scale_b)
register("broadcast_add", _badd_f, _badd_b)
register("sigmoid", _sigmoid_f, _sigmoid_b)
register("tanh", _tanh_f, _tanh_b)
register("exp", _exp_f, _exp_b)
register("log", _log_f, _log_b)
register("matvec", _matvec_f, _matvec_b)
register("linear", _linear_f, _linear_b)
register("bmv", _bmv_f, _bmv_b)
register("wsum", _wsum_f, _wsum_b)
register("slice", _slice_f, _slice_b)
register("reshape", _reshape_f, _reshape_b)
register("concat", _concat_f, _concat_b)
register("stack", _stack_f, _stack_b)
register("avg_pool_1d", _pool_f, _pool_b)
register("softmax", _softmax_f, _softmax_b)
register("log_softmax", _log_softmax_f, _log_softmax_b)
register("sum", _sum_f, _sum_b)
register("mean", _mean_f, _mean_b)
register("sum_axis", _sum_axis_f, _sum_axis_b)
register("gru_gates", _gru_f, _gru_b)
register("lstm_gates", _lstm_f, _lstm_b)


# ---------------------------------------------------------------------------
# functional helpers, so model code reads like math

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Variable):
            return x.tape
    raise ContractError("at least one operand must be a Variable")


def apply(op, *inputs, **attrs):
    return _tape_of(*inputs).forward(op, list(inputs), **attrs)


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scale(a, c):
    return apply("scale", a, c=float(c))


def broadcast_add(x, y, axis=None):
    return apply("broadcast_add", x, y, axis=axis)


def sigmoid(a):
    return apply("sigmoid", a)


def tanh(a):
    return apply("tanh", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def matvec(m, v):
    return apply("matvec", m, v)


def linear(x, w, b=None):
    out = apply("linear", x, w)
    return out if b is None else broadcast_add(out, b)


def bmv(w, v):
    return apply("bmv", w, v)


def wsum(alpha, h):
    return apply("wsum", alpha, h)


def slice_(x, start, stop, axis=-1):
    return apply("slice", x, start=start, stop=stop, axis=axis)


def chunk(x, parts, axis=-1):
    n = x.shape[axis]
    if n % parts:
        raise ContractError(f"chunk: {parts} does not divide {n}")
    size = n // parts
    return [slice_(x, i * size, (i + 1) * size, axis) for i in range(parts)]


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def concat(xs, axis=-1):
    return apply("concat", *xs, axis=axis)


def stack(xs, axis=0):
    return apply("stack", *xs, axis=axis)


def avg_pool_1d(x, k):
    return apply("avg_pool_1d", x, k=k)


def softmax(x):
    return apply("softmax", x)


def log_softmax(x):
    return apply("log_softmax", x)


def sum_(x):
    return apply("sum", x)


def mean(x):
    return apply("mean", x)


def sum_axis(x, axis=-1):
    return apply("sum_axis", x, axis=axis)


def gru_gates(a, hb, s_prev):
    return apply("gru_gates", a, hb, s_prev)


def lstm_gates(pre, c_prev):
    return apply("lstm_gates", pre, c_prev)


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_param: dict = field(default_factory=dict)

    def lines(self):
        out = [f"{name:<16} max_rel_err={err:.3e}" for name, err in self.per_param.items()]
        out.append(f"overall max_rel_err={self.max_rel_err:.3e} "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f, params, h=1e-6, tol=1e-5):
    """Compare tape gradients with central differences.

    Args:
        f: callable ``f(tape, variables) -> scalar Variable`` where
            ``variables`` maps each name in ``params`` to a trainable leaf.
        params: dict of name -> array, the point at which to check.
        h: finite-difference step.
        tol: pass threshold on the maximum relative error.

    Returns:
        GradCheckReport with the per-tensor maximum relative error.
    """
    if h <= 0 or tol <= 0:
        raise ContractError("grad_check needs h > 0 and tol > 0")
    params = {k: tn.as_tensor(v).copy() for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.variable(v, requires_grad=True, name=k) for k, v in values.items()}
        return tape, leaves, f(tape, leaves)

    tape, leaves, loss = evaluate(params)
    grads = tape.backward(loss)
    report = GradCheckReport(0.0, True)
    for name, value in params.items():
        analytic = grads[leaves[name]]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(params)[2].value[0]
            flat[i] = orig - h
            fm = evaluate(params)[2].value[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = np.unravel_index(i, value.shape)
                raise NumericError(f"non-finite loss perturbing {name}{list(coord)}")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        err = float(relative_error(analytic, numeric).max()) if value.size else 0.0
        report.per_param[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
    report.passed = report.max_rel_err <= tol
    return report
