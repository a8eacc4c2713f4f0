"""Mask embedding extraction: cropping, pooling and activation-map aggregation.

All three return L2-normalized ``(N, C)`` embeddings that are matched against
category prototypes by cosine similarity in :func:`classify`.
"""

import csv

import numpy as np

from ._validation import check_feature_map, check_mask_batch, check_soft_masks, check_unit_rows
from .masks import downsample_masks
from .synthworld import toy_image_encoder

DEFAULT_LOGIT_SCALE = 100.0


def l2_normalize(x):
    """Row-wise L2 normalization; returns ``(unit_rows, norms)``."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"cannot normalize zero rows {np.flatnonzero(norms[:, 0] == 0).tolist()}")
    return x / norms, norms


def l2_normalize_backward(unit, norms, grad_unit):
    """Gradient through ``x / ||x||`` given the forward outputs."""
    dot = (grad_unit * unit).sum(axis=1, keepdims=True)
    return (grad_unit - unit * dot) / norms


def mask_pool(masks, features, normalize=True):
    """Area-normalized mask pooling of a feature map.

    Row n is the mask-weighted mean of the feature columns, L2-normalized
    unless ``normalize=False``.
    """
    masks = check_soft_masks(masks)
    features = check_feature_map(features)
    if masks.shape[1:] != features.shape[1:]:
        raise ValueError(f"mask resolution {masks.shape[1:]} != feature resolution {features.shape[1:]}")
    mass = masks.sum(axis=(1, 2))
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise ValueError(f"mask {int(empty[0])} has zero total mass")
    pooled = np.einsum("nyx,cyx->nc", masks, features) / mass[:, None]
    return l2_normalize(pooled)[0] if normalize else pooled


def mask_crop_embed(masks, features, stride=4):
    """Embed each mask by encoding its masked bounding-box crop."""
    masks = check_mask_batch(masks)
    features = check_feature_map(features)
    if masks.shape[0] == 0:
        return np.zeros((0, features.shape[0]))
    empty = np.flatnonzero(~masks.reshape(len(masks), -1).any(axis=1))
    if empty.size:
        raise ValueError(f"mask {int(empty[0])} is empty")
    soft = downsample_masks(masks, stride)
    return np.stack([toy_image_encoder(features, s) for s in soft])


def check_activation_stack(acts, atol=1e-4):
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 4:
        raise ValueError(f"activation stack must be (N, K, h, w), got {acts.shape}")
    if acts.size and acts.min() < 0:
        raise ValueError("activation maps must be nonnegative")
    sums = acts.sum(axis=(2, 3))
    if sums.size and np.max(np.abs(sums - 1.0)) > atol:
        raise ValueError("every activation map must sum to 1")
    return acts


def aggregate(acts, features, normalize=True):
    """Average over K of the activation-weighted feature sums.

    ``acts`` is ``(N, K, h, w)`` with each map summing to 1.
    """
    acts = check_activation_stack(acts)
    features = check_feature_map(features)
    if acts.shape[2:] != features.shape[1:]:
        raise ValueError("activation maps and features differ in resolution")
    raw = np.einsum("nkyx,cyx->nc", acts, features) / acts.shape[1]
    return l2_normalize(raw)[0] if normalize else raw


def aggregate_backward(acts, features, grad_raw):
    """Gradients of the pre-normalization aggregate.

    Returns ``(grad_acts, grad_features)`` for upstream ``grad_raw`` of shape ``(N, C)``.
    """
    k = acts.shape[1]
    g_map = np.einsum("nc,cyx->nyx", grad_raw, features) / k
    grad_acts = np.broadcast_to(g_map[:, None], acts.shape).copy()
    grad_features = np.einsum("nkyx,nc->cyx", acts, grad_raw) / k
    return grad_acts, grad_features


def class_logits(embeds, prototypes, logit_scale=DEFAULT_LOGIT_SCALE):
    embeds = check_unit_rows(embeds)
    return logit_scale * embeds @ np.asarray(prototypes).T


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify(embeds, bank, logit_scale=DEFAULT_LOGIT_SCALE, categories=None):
    """Softmax over cosine similarities to the bank prototypes.

    Args:
        embeds: L2-normalized ``(N, C)`` embeddings.
        bank: :class:`CategoryBank`.
        logit_scale: inverse temperature, >= 0.
        categories: optional index subset; columns follow its order.
    """
    if logit_scale < 0:
        raise ValueError("logit_scale must be nonnegative")
    protos = bank.prototypes if categories is None else bank.prototypes[np.asarray(categories)]
    return softmax(class_logits(embeds, protos, logit_scale))


def save_embeddings_csv(path, embeds):
    """Write one row per embedding using shortest round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(embeds, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def load_embeddings_csv(path):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=np.float64)
