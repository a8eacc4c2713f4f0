"""Training objectives with exact gradients w.r.t. their inputs."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

DEFAULT_LAMBDA_CE = 2.0
DEFAULT_LAMBDA_COS = 5.0


@dataclass
class LossReport:
    total: float
    ce_term: float
    cos_term: float
    lambda_ce: float
    lambda_cos: float
    per_pair_cos: list = field(default_factory=list)


def ce_loss(logits, targets):
    """Mean cross-entropy of ``logits`` (N x L) against integer ``targets``.

    Returns ``(loss, grad_logits)`` where the gradient is ``(softmax - onehot) / N``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross-entropy of an empty batch")
    if targets.shape != (n,):
        raise ValueError("need one target per row")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("target index out of range")
    lse = logsumexp(logits, axis=1)
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, targets]))
    grad = np.exp(logits - lse[:, None])
    grad[rows, targets] -= 1.0
    return loss, grad / n


def pair_cosines(e_gt, e_pred, matches):
    a = np.asarray(e_gt, dtype=np.float64)[matches.gt]
    b = np.asarray(e_pred, dtype=np.float64)[matches.pred]
    return (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def cos_consistency_loss(e_gt, e_pred, matches):
    """Mean of ``1 - cos(e_gt[i], e_pred[j])`` over the matched pairs.

    Gradients are taken through the cosine itself, so they are exact for
    unnormalized inputs too. An empty match set gives zero loss and zero
    gradients.

    Returns:
        ``(loss, grad_gt, grad_pred)`` with gradients shaped like the inputs.
    """
    e_gt = np.asarray(e_gt, dtype=np.float64)
    e_pred = np.asarray(e_pred, dtype=np.float64)
    grad_gt = np.zeros_like(e_gt)
    grad_pred = np.zeros_like(e_pred)
    p = len(matches)
    if p == 0:
        return 0.0, grad_gt, grad_pred
    a = e_gt[matches.gt]
    b = e_pred[matches.pred]
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    cos = (a * b).sum(1, keepdims=True) / (na * nb)
    loss = float(np.mean(1.0 - cos))
    da = -(b / (na * nb) - cos * a / na**2) / p
    db = -(a / (na * nb) - cos * b / nb**2) / p
    np.add.at(grad_gt, matches.gt, da)
    np.add.at(grad_pred, matches.pred, db)
    return loss, grad_gt, grad_pred


def total_loss(ce, cos, lambda_ce=DEFAULT_LAMBDA_CE, lambda_cos=DEFAULT_LAMBDA_COS, per_pair_cos=()):
    """Weighted sum ``lambda_ce * ce + lambda_cos * cos``."""
    if lambda_ce < 0 or lambda_cos < 0:
        raise ValueError("loss weights must be nonnegative")
    return LossReport(
        total=lambda_ce * ce + lambda_cos * cos,
        ce_term=float(ce),
        cos_term=float(cos),
        lambda_ce=float(lambda_ce),
        lambda_cos=float(lambda_cos),
        per_pair_cos=[float(v) for v in per_pair_cos],
    )


def append_loss_log(path, step, report):
    """Append ``step,total,ce,cos`` to a CSV file, writing the header on first use."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "total", "ce", "cos"])
        writer.writerow([step, repr(report.total), repr(report.ce_term), repr(report.cos_term)])
