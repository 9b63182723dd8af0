"""Training loop, objectives, AdamW and evaluation."""
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .errors import ConfigurationError, ContractError, NumericError
from .model import forward_batch

OBJECTIVES = {"L2": "regression", "cross_entropy": "classification"}


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    objective: str = "L2"
    patience: int = 10
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 0:
            raise ConfigurationError("batch_size >= 1, epochs >= 0 and patience >= 0 required")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {list(OBJECTIVES)}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# objectives

def row_criterion(out, y, objective):
    """Per-row criterion [N]: mean squared error over outputs, or cross-entropy
    against integer class labels held in ``y[:, 0]``."""
    tape = out.tape
    if objective == "L2":
        d = ad.sub(out, tape.constant(y))
        return ad.scale(ad.sum_axis(ad.mul(d, d)), 1.0 / out.shape[-1])
    if objective == "cross_entropy":
        labels = np.asarray(y, dtype=np.float64)[:, 0].astype(np.int64)
        onehot = np.zeros(out.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        return ad.scale(ad.sum_axis(ad.mul(ad.log_softmax(out), tape.constant(onehot))), -1.0)
    raise ConfigurationError(f"unknown objective {objective!r}")


def instance_weights(owner, n_instances):
    """Row weights giving the mean over each instance's windows, then over instances."""
    counts = np.bincount(owner, minlength=n_instances)
    if np.any(counts == 0):
        raise ContractError("every instance needs at least one historical window")
    return 1.0 / (counts[owner] * n_instances)


def batch_loss(model, tape, P, x, xhat, y, owner, objective):
    """Mean over instances of the per-instance window-averaged criterion."""
    check_objective(model, objective)
    out = model.forward(tape, P, x, xhat)
    rows = row_criterion(out, y, objective)
    w = instance_weights(owner, int(owner.max()) + 1)
    return ad.sum_(ad.mul(rows, tape.constant(w)))


def check_objective(model, objective):
    if OBJECTIVES.get(objective) != model.config.task:
        raise ConfigurationError(
            f"objective {objective!r} does not fit a {model.config.task} model")


def loss_instance(model, x, S, y, objective="L2", tape=None):
    """Loss of one instance: (1/L) sum_n criterion(y_hat_n, y).

    x: [d_x, T_x]; S: sequence of L windows [d_x, T]; y: [d_y, T_y].
    Returns a scalar Variable on ``tape`` (a fresh tape by default).
    """
    if len(S) == 0:
        raise ContractError("historical set is empty")
    tape = tape or ad.Tape()
    P = model.bind(tape)
    L = len(S)
    xs = np.broadcast_to(np.asarray(x, dtype=np.float64).T, (L,) + np.shape(x)[::-1])
    ys = np.broadcast_to(np.asarray(y, dtype=np.float64).reshape(-1), (L, np.size(y)))
    return batch_loss(model, tape, P, xs, np.asarray(S, dtype=np.float64), ys,
                      np.zeros(L, dtype=np.int64), objective)


# ---------------------------------------------------------------------------
# optimizer

def is_bias(name):
    return name.rsplit(".", 1)[-1].startswith("b")


@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, beta1, beta2, eps)


def adamw_step(params, grads, state, lr, weight_decay):
    """One decoupled-weight-decay Adam update, in place.

    Decay is skipped for bias vectors. Raises NumericError, leaving params and
    state untouched, if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and not is_bias(name):
            update = update + weight_decay * p
        p -= lr * update
    return params, state


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # (epoch, train_loss, valid_loss)
    best_epoch: int = 0
    best_valid: float = math.inf
    best_model: object = None
    stopped_early: bool = False

    @property
    def train_losses(self):
        return [h[1] for h in self.history]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_metric"])
            for epoch, tr, va in self.history:
                w.writerow([epoch, repr(float(tr)), repr(float(va))])


def _rows(dataset, instances, model, L_max=None):
    return dataset.batch(instances, L_max=L_max, with_history=model.uses_history)


def _concat_rows(cached, idx):
    parts = [cached[i] for i in idx]
    x = np.concatenate([p[0] for p in parts])
    xhat = None if parts[0][1] is None else np.concatenate([p[1] for p in parts])
    y = np.concatenate([p[2] for p in parts])
    owner = np.concatenate([np.full(len(p[0]), j) for j, p in enumerate(parts)])
    return x, xhat, y, owner


def dataset_loss(model, dataset, instances, objective, batch_size=256):
    """Mean instance loss over ``instances`` (no gradients)."""
    total = 0.0
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        x, xhat, y, owner = _rows(dataset, chunk, model)
        tape = ad.Tape()
        P = model.bind(tape, requires_grad=False)
        total += batch_loss(model, tape, P, x, xhat, y, owner, objective).value[0] * len(chunk)
    return total / len(instances)


def fit(model, dataset, cfg, log=print):
    """Train ``model`` in place on ``dataset.train``; returns a TrainReport.

    The report's ``best_model`` is a copy taken at the lowest validation loss.
    """
    check_objective(model, cfg.objective)
    if not dataset.train:
        raise ContractError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    cached = [_rows(dataset, [inst], model) for inst in dataset.train]
    state = AdamWState.zeros(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport(best_model=model.copy())
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(cached))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            x, xhat, y, owner = _concat_rows(cached, idx)
            tape = ad.Tape()
            P = model.bind(tape)
            loss = batch_loss(model, tape, P, x, xhat, y, owner, cfg.objective)
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at epoch {epoch}, batch {b}")
            grads = tape.backward(loss)
            named = {name: grads[var] for name, var in P.items()}
            clip_global_norm(named, cfg.clip_norm)
            adamw_step(model.params, named, state, cfg.learning_rate, cfg.weight_decay)
            total += value * len(idx)
        train_loss = total / len(cached)
        valid_loss = (dataset_loss(model, dataset, dataset.valid, cfg.objective)
                      if dataset.valid else train_loss)
        report.history.append((epoch, train_loss, valid_loss))
        if log:
            log(f"epoch={epoch} train={train_loss:.6g} valid={valid_loss:.6g}")
        if valid_loss < report.best_valid:
            report.best_valid = valid_loss
            report.best_epoch = epoch
            report.best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                report.stopped_early = True
                break
    return report


# ---------------------------------------------------------------------------
# evaluation

def predictions(model, dataset, instances, mode="last"):
    """Aggregated model outputs and targets, both in normalized units.

    Returns (pred [n, d_y*T_y], target [n, d_y*T_y]); classification outputs
    are class probabilities.
    """
    if not instances:
        raise ContractError("nothing to evaluate")
    if mode not in ("last", "mean"):
        raise ConfigurationError(f"unknown predict mode {mode!r}")
    L_max = 1 if mode == "last" else None
    x, xhat, y, owner = _rows(dataset, instances, model, L_max=L_max)
    out = forward_batch(model, x, xhat)
    counts = np.bincount(owner, minlength=len(instances))
    pred = np.zeros((len(instances), out.shape[1]))
    np.add.at(pred, owner, out)
    pred /= counts[:, None]
    target = np.stack([inst.y.reshape(-1) for inst in instances])
    return pred, target


def denormalize(dataset, flat):
    """Map normalized [n, d_y*T_y] outputs back to the original scale."""
    n = flat.shape[0]
    cube = flat.reshape(n, dataset.d_y, dataset.T_y)
    lo = dataset.norm.minimum[list(dataset.targets)][None, :, None]
    hi = dataset.norm.maximum[list(dataset.targets)][None, :, None]
    return (cube * (hi - lo) + lo).reshape(n, -1)


def evaluate(model, dataset, split="test", mode="last", scale="original"):
    instances = dataset.split(split) if isinstance(split, str) else split
    pred, target = predictions(model, dataset, instances, mode)
    if model.config.task == "classification":
        scores = mt.classification_scores(pred.argmax(axis=1), target[:, 0].astype(np.int64),
                                          model.config.d_y)
        return mt.ClassificationMetrics(count=len(instances), **scores)
    if scale == "original":
        pred, target = denormalize(dataset, pred), denormalize(dataset, target)
    elif scale != "normalized":
        raise ConfigurationError(f"unknown metric scale {scale!r}")
    return mt.regression_metrics(pred, target, scale)
