"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np


def check_mask_batch(masks, name="masks"):
    """Return ``masks`` as an ``(N, H, W)`` boolean array.

    A single ``(H, W)`` mask is promoted to a batch of one. Values other than
    0/1 are rejected rather than thresholded.
    """
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (N, H, W), got {arr.shape}")
    if arr.shape[1] <= 0 or arr.shape[2] <= 0:
        raise ValueError(f"{name} must have positive height and width, got {arr.shape}")
    if arr.dtype != bool:
        if arr.size and not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} must be binary (0/1)")
        arr = arr.astype(bool)
    return arr


def check_single_mask(mask, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {arr.shape}")
    return check_mask_batch(arr, name)[0]


def check_soft_masks(masks, name="masks"):
    arr = np.asarray(masks, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (N, h, w), got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_feature_map(features, name="features"):
    """Return ``features`` as a finite ``(C, h, w)`` float64 array."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (C, h, w), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_resolution(a, b, names=("a", "b")):
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(
            f"resolution mismatch: {names[0]} is {a.shape[-2:]}, {names[1]} is {b.shape[-2:]}"
        )


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_unit_rows(embeds, atol=1e-6, name="embeddings"):
    arr = np.asarray(embeds, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape (N, C), got {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if arr.shape[0] and np.max(np.abs(norms - 1.0)) > atol:
        raise ValueError(f"{name} must be L2-normalized row-wise")
    return arr
