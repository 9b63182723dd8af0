"""Evaluation measures: RMSE, MAE, MAPE and macro classification scores."""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("no values to score")
    return pred, target


def rmse(pred, target):
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred, target):
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def mape(pred, target, floor=1e-8):
    """Mean absolute percentage error; |target| is floored to avoid division by zero."""
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target) / np.maximum(np.abs(target), floor)) * 100.0)


def classification_scores(pred_classes, target_classes, n_classes):
    """Accuracy plus macro-averaged precision, recall and F1.

    A class with no predictions scores precision 0 (likewise recall with no
    targets, F1 with P + R = 0) and still counts in the macro denominator.
    """
    pred = np.asarray(pred_classes)
    target = np.asarray(target_classes)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ContractError("pred and target must be equal-length label vectors")
    if pred.size == 0:
        raise ContractError("no labels to score")
    for name, labels in (("pred", pred), ("target", target)):
        if np.any(labels < 0) or np.any(labels >= n_classes) or np.any(labels != np.round(labels)):
            raise ContractError(f"{name} labels must be integers in [0, {n_classes})")
    pred = pred.astype(np.int64)
    target = target.astype(np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (target, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return {
        "acc": float(tp.sum() / pred.size),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }


@dataclass
class RegressionMetrics:
    rmse: float
    mae: float
    mape: float
    count: int
    scale: str = "original"
    task: str = "regression"


@dataclass
class ClassificationMetrics:
    acc: float
    precision: float
    recall: float
    f1: float
    count: int
    task: str = "classification"


def regression_metrics(pred, target, scale="original", floor=1e-8):
    pred, target = _pair(pred, target)
    return RegressionMetrics(rmse(pred, target), mae(pred, target), mape(pred, target, floor),
                             int(pred.shape[0]), scale)


def to_csv_line(metrics, header=False):
    d = asdict(metrics)
    if header:
        return ",".join(d)
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in d.values())


def to_table(metrics):
    d = asdict(metrics)
    width = max(len(k) for k in d)
    return "\n".join(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in d.items())
