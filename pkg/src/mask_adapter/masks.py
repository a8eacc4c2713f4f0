"""Binary masks: overlap measures, resolution matching, perturbation and I/O.

Masks are plain numpy arrays. A batch is ``(N, H, W)`` boolean, a single mask
is ``(H, W)``. Soft masks (the output of :func:`downsample_masks`) are float64
in ``[0, 1]``.
"""

import json
from pathlib import Path

import numpy as np

from ._validation import (
    check_mask_batch,
    check_random_state,
    check_same_resolution,
    check_single_mask,
)

PERTURB_TOLERANCE = 0.05


def iou(a, b):
    """Intersection over union of two binary masks.

    Two empty masks are considered identical (IoU 1.0); an empty mask
    against a nonempty one scores 0.0.
    """
    a = check_single_mask(a, "a")
    b = check_single_mask(b, "b")
    check_same_resolution(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_matrix(gt, pred):
    """Pairwise IoU between ``gt`` (N masks) and ``pred`` (M masks) as an N x M array."""
    gt = check_mask_batch(gt, "gt")
    pred = check_mask_batch(pred, "pred")
    check_same_resolution(gt, pred, ("gt", "pred"))
    cells = gt.shape[1] * gt.shape[2]
    g = gt.reshape(len(gt), cells).astype(np.int64)
    p = pred.reshape(len(pred), cells).astype(np.int64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    out = np.ones(inter.shape, dtype=np.float64)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def downsample_masks(masks, stride):
    """Block-mean downsampling of binary masks to a coarser grid.

    Each output cell is the fraction of set pixels in its ``stride x stride``
    block, so ``soft.sum() * stride**2 == masks.sum()``.
    """
    masks = check_mask_batch(masks)
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, h, w = masks.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide mask size {h}x{w}")
    blocks = masks.reshape(n, h // stride, stride, w // stride, stride)
    return blocks.mean(axis=(2, 4), dtype=np.float64)


def _frontier(cur):
    """Pixels of ``cur`` with an outside 4-neighbour, and outside pixels touching ``cur``."""
    padded = np.pad(cur, 1, constant_values=False)
    up, down = padded[:-2, 1:-1], padded[2:, 1:-1]
    left, right = padded[1:-1, :-2], padded[1:-1, 2:]
    touches_in = up | down | left | right
    touches_out = ~(up & down & left & right)
    return cur & touches_out, ~cur & touches_in


def perturb_mask(mask, target_iou, rng=None):
    """Degrade ``mask`` by random boundary flips until its IoU with the input nears ``target_iou``.

    Flips only ever move the mask away from the original (eroding original
    pixels or growing into new ones), so the IoU decreases monotonically and
    the walk stops at a random level within ``target_iou +/- 0.04``. The result
    is guaranteed to lie within ``target_iou +/- 0.05``.

    Raises:
        ValueError: if the mask is empty, ``target_iou`` is outside ``(0, 1]``,
            or the tolerance band cannot be reached within ``10 * H * W`` flips
            (typically because the mask is too small for fine IoU steps).
    """
    orig = check_single_mask(mask)
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target_iou must lie in (0, 1], got {target_iou}")
    inter = union = int(np.count_nonzero(orig))
    if inter == 0:
        raise ValueError("cannot perturb an empty mask")
    if target_iou == 1.0:
        return orig.copy()
    rng = check_random_state(rng)

    lo = max(target_iou - PERTURB_TOLERANCE, 0.0)
    hi = min(target_iou + PERTURB_TOLERANCE, 1.0)
    stop = rng.uniform(max(target_iou - 0.04, 1e-9), min(target_iou + 0.04, 1.0 - 1e-9))
    cur = orig.copy()
    flat = cur.reshape(-1)
    budget = 10 * orig.size
    flips = 0
    while inter / union > stop:
        if flips >= budget:
            raise ValueError(f"IoU band not reached within {budget} flips")
        inner, outer = _frontier(cur)
        # only move away from the original: erode original pixels, grow into new ones
        shrink = np.flatnonzero(inner & orig)
        grow = np.flatnonzero(outer & ~orig)
        cands = np.concatenate([shrink, grow])
        if cands.size == 0:
            raise ValueError("no boundary pixels left to flip")
        needed = (inter / union - stop) * union
        k = int(min(cands.size, max(1, np.ceil(0.25 * needed))))
        for idx in rng.choice(cands, size=k, replace=False):
            if flat[idx]:
                if inter == 1:
                    continue
                inter -= 1
            else:
                union += 1
            flat[idx] = not flat[idx]
            flips += 1
            if inter / union <= stop:
                break
    achieved = inter / union
    if not lo <= achieved <= hi:
        raise ValueError(
            f"IoU band [{lo:.3f}, {hi:.3f}] unreachable for a {np.count_nonzero(orig)}-pixel mask"
        )
    return cur


# --------------------------------------------------------------------------- I/O


def write_pgm(path, image):
    """Write a 2-D integer array as a binary (P5) PGM file."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if image.size and (image.min() < 0 or image.max() > 65535):
        raise ValueError("PGM values must lie in [0, 65535]")
    maxval = 255 if image.size == 0 or image.max() <= 255 else 65535
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(image.astype(dtype).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return arr.reshape(h, w).astype(np.int64)


def save_masks_pgm(directory, masks, prefix="mask"):
    """Write one PGM per mask (0 / 255) and return the file paths."""
    masks = check_mask_batch(masks)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks):
        p = directory / f"{prefix}_{i:03d}.pgm"
        write_pgm(p, m.astype(np.uint8) * 255)
        paths.append(p)
    return paths


def load_masks_pgm(paths):
    masks = [read_pgm(p) > 0 for p in paths]
    if not masks:
        raise ValueError("no mask files given")
    return np.stack(masks)


def save_masks_bitset(path, masks):
    """Write masks as a packed row-major bitset plus a ``.json`` shape sidecar."""
    masks = check_mask_batch(masks)
    path = Path(path)
    n, h, w = masks.shape
    path.write_bytes(np.packbits(masks.reshape(-1)).tobytes())
    path.with_suffix(".json").write_text(json.dumps({"n": n, "h": h, "w": w}))


def load_masks_bitset(path):
    path = Path(path)
    shape = json.loads(path.with_suffix(".json").read_text())
    n, h, w = shape["n"], shape["h"], shape["w"]
    bits = np.unpackbits(np.frombuffer(path.read_bytes(), dtype=np.uint8), count=n * h * w)
    return bits.reshape(n, h, w).astype(bool)
