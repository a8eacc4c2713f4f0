"""Shared oracles for the test suite."""

import numpy as np

from mask_adapter.adapter import adapter_backward, adapter_forward

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def rel_err(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps exactly-zero gradients (directions the output is invariant
    to) from turning finite-difference round-off into a huge relative error.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(fn, x, index, h=1e-4):
    """Central difference of scalar ``fn()`` w.r.t. ``x[index]`` (mutates and restores x)."""
    old = x[index]
    x[index] = old + h
    fp = fn()
    x[index] = old - h
    fm = fn()
    x[index] = old
    return (fp - fm) / (2 * h)


def jitter_params(params, rng, scale=0.1):
    """Move every tensor off its init so zero biases and unit scales get exercised."""
    out = params.copy()
    for name, p in out.items():
        p += scale * rng.standard_normal(p.shape)
    return out


def tensor_rel_err(fd, an, floor=1e-6):
    """Norm-wise relative error ``||fd - an|| / max(||fd||, ||an||, floor)``.

    Elementwise ratios blow up on entries whose true gradient is tiny, where
    central-difference truncation error dominates; the vector form does not.
    """
    fd, an = np.ravel(fd), np.ravel(an)
    scale = max(np.linalg.norm(fd), np.linalg.norm(an), floor)
    return float(np.linalg.norm(fd - an) / scale)


def adapter_gradcheck(params, masks, features, upstream, entries_per_tensor=None, rng=None, h=1e-4):
    """Worst per-tensor relative error between adapter_backward and central differences.

    The scalar is ``sum(upstream * acts)``. With ``entries_per_tensor`` only a
    random subset of each tensor (and of the features) is probed. Returns
    ``{tensor_name: error}`` including a ``"features"`` entry.
    """
    acts, tape = adapter_forward(params, masks, features, want_tape=True)
    grads, gfeat = adapter_backward(tape, upstream)

    def loss():
        return float(np.sum(upstream * adapter_forward(params, masks, features)[0]))

    errors = {}
    targets = [(name, params[name], grads[name]) for name in params] + [("features", features, gfeat)]
    for name, array, grad in targets:
        flat_idx = np.arange(array.size)
        if entries_per_tensor is not None and array.size > entries_per_tensor:
            flat_idx = rng.choice(array.size, size=entries_per_tensor, replace=False)
        fd = np.empty(len(flat_idx))
        an = np.empty(len(flat_idx))
        for j, f in enumerate(flat_idx):
            idx = np.unravel_index(f, array.shape)
            fd[j] = central_fd(loss, array, idx, h)
            an[j] = grad[idx]
        errors[name] = tensor_rel_err(fd, an)
    return errors


def ce_gradcheck(rng, n=4, n_classes=5, scale=3.0, h=1e-4):
    """Relative error of ce_loss's gradient against central differences."""
    from mask_adapter.losses import ce_loss

    logits = scale * rng.standard_normal((n, n_classes))
    targets = rng.integers(0, n_classes, size=n)
    _, grad = ce_loss(logits, targets)
    fd = np.empty_like(logits)
    for idx in np.ndindex(logits.shape):
        fd[idx] = central_fd(lambda: ce_loss(logits, targets)[0], logits, idx, h)
    return tensor_rel_err(fd, grad)


def cos_gradcheck(rng, n_pairs=3, channels=8, h=1e-4):
    """Relative error of both cos_consistency_loss gradients against central differences."""
    from mask_adapter.losses import cos_consistency_loss
    from mask_adapter.matching import MatchSet

    e_gt = rng.standard_normal((n_pairs, channels))
    e_pred = rng.standard_normal((n_pairs + 1, channels))
    match = MatchSet(rng.integers(0, n_pairs, n_pairs), rng.permutation(n_pairs + 1)[:n_pairs], np.ones(n_pairs))
    _, g_gt, g_pred = cos_consistency_loss(e_gt, e_pred, match)
    errs = []
    for arr, grad in ((e_gt, g_gt), (e_pred, g_pred)):
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            fd[idx] = central_fd(lambda: cos_consistency_loss(e_gt, e_pred, match)[0], arr, idx, h)
        errs.append(tensor_rel_err(fd, grad))
    return max(errs)
