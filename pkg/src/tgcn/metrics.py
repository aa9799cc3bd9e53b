"""Classification metrics over a node subset."""

from __future__ import annotations

import math

import numpy as np

from .errors import StructuralError, ValidationError


def _subset(Y_hat: np.ndarray, labels: np.ndarray, subset) -> tuple[np.ndarray, np.ndarray]:
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    labels = np.asarray(labels)
    if Y_hat.ndim != 2 or labels.shape != (Y_hat.shape[0],):
        raise StructuralError(f"predictions {Y_hat.shape} do not match labels {labels.shape}")
    if subset is None:
        idx = np.arange(labels.size)
    else:
        s = np.asarray(subset)
        idx = np.flatnonzero(s) if s.dtype == bool else s.astype(np.int64).ravel()
    if idx.size == 0:
        raise ValidationError("evaluation subset is empty")
    if idx.min() < 0 or idx.max() >= labels.size:
        raise StructuralError("evaluation subset indexes outside the node range")
    truth = labels[idx].astype(np.int64)
    if truth.min() < 0 or truth.max() >= Y_hat.shape[1]:
        raise ValidationError("evaluation subset contains unlabeled or out-of-range nodes")
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return np.argmax(Y_hat[idx], axis=1), truth


def predictions(Y_hat: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(Y_hat), axis=1)


def accuracy(Y_hat: np.ndarray, labels: np.ndarray, subset=None) -> float:
    """Fraction of subset nodes whose argmax prediction equals the label."""
    pred, truth = _subset(Y_hat, labels, subset)
    return float(np.count_nonzero(pred == truth)) / pred.size


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts nodes with true class ``t`` predicted as ``p``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    n_pred = cm.sum(axis=0)
    n_true = cm.sum(axis=1)
    # 0/0 precision or recall counts as 0, and so does F1 when both are 0
    prec = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    rec = np.divide(tp, n_true, out=np.zeros_like(tp), where=n_true > 0)
    denom = prec + rec
    return np.divide(2.0 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(Y_hat: np.ndarray, labels: np.ndarray, subset=None) -> float:
    """Unweighted mean of per-class F1 over all K classes.

    Classes that occur neither in the predictions nor in the truth still
    count, with F1 = 0. The sum is correctly rounded, so the result does not
    depend on class order.
    """
    pred, truth = _subset(Y_hat, labels, subset)
    K = np.asarray(Y_hat).shape[1]
    return math.fsum(per_class_f1(confusion_matrix(pred, truth, K)).tolist()) / K
