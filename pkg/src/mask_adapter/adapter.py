"""The mask adapter network: masks + features -> K spatially normalized activation maps.

Architecture, per mask:

1. patchify: 3x3 stride-2 conv (1 -> C/2), GELU, 3x3 stride-2 conv (C/2 -> C)
2. fuse: add the raw feature map
3. three ConvNeXt blocks: 7x7 depthwise conv, channel LayerNorm,
   1x1 expand (C -> 4C), GELU, 1x1 project (4C -> C), residual add
4. 1x1 predictor conv (C -> K) and a softmax over spatial positions per map

Gradients are hand-derived; :func:`adapter_backward` consumes the tape
recorded by :func:`adapter_forward`.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _nn
from ._validation import check_feature_map, check_mask_batch, check_random_state
from .synthworld import STRIDE

N_BLOCKS = 3
DW_KERNEL = 7
EXPANSION = 4
NORM_EPS = 1e-6
CHECKPOINT_FORMAT = "mask-adapter-params/1"


def param_shapes(channels, n_maps):
    """Ordered ``name -> shape`` map of every trainable tensor."""
    c, k = channels, n_maps
    shapes = {
        "patchify1.weight": (c // 2, 1, 3, 3),
        "patchify1.bias": (c // 2,),
        "patchify2.weight": (c, c // 2, 3, 3),
        "patchify2.bias": (c,),
    }
    for i in range(N_BLOCKS):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "dwconv.weight": (c, DW_KERNEL, DW_KERNEL),
                p + "dwconv.bias": (c,),
                p + "norm.scale": (c,),
                p + "norm.shift": (c,),
                p + "expand.weight": (EXPANSION * c, c),
                p + "expand.bias": (EXPANSION * c,),
                p + "project.weight": (c, EXPANSION * c),
                p + "project.bias": (c,),
            }
        )
    shapes["predictor.weight"] = (k, c)
    shapes["predictor.bias"] = (k,)
    return shapes


class AdapterParams:
    """Named float64 tensors of one adapter, in a fixed declaration order."""

    def __init__(self, tensors, seed=None, stage="init"):
        tensors = {name: np.asarray(t, dtype=np.float64) for name, t in tensors.items()}
        channels = tensors["patchify2.weight"].shape[0]
        n_maps = tensors["predictor.weight"].shape[0]
        expected = param_shapes(channels, n_maps)
        if list(tensors) != list(expected):
            raise ValueError("parameter names/order do not match the adapter layout")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
            if not np.all(np.isfinite(tensors[name])):
                raise ValueError(f"{name} contains non-finite values")
        self.tensors = tensors
        self.seed = seed
        self.stage = stage

    @property
    def channels(self):
        return self.tensors["patchify2.weight"].shape[0]

    @property
    def n_maps(self):
        return self.tensors["predictor.weight"].shape[0]

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self):
        return AdapterParams({k: v.copy() for k, v in self.items()}, self.seed, self.stage)

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def flat(self):
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def equals(self, other):
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )


def init_params(channels, n_maps, rng=None):
    """Fan-in scaled uniform weights, zero biases, identity normalization."""
    if channels % 2:
        raise ValueError(f"channels must be even, got {channels}")
    if channels < 8:
        raise ValueError(f"channels must be >= 8, got {channels}")
    if n_maps < 1:
        raise ValueError(f"n_maps must be >= 1, got {n_maps}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = check_random_state(rng)
    tensors = {}
    for name, shape in param_shapes(channels, n_maps).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            if "dwconv" in name:
                fan_in = shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("norm.scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return AdapterParams(tensors, seed=None if seed is None else int(seed))


@dataclass
class AdapterTape:
    """Inputs and intermediates of one forward pass, enough for exact reverse mode."""

    params: AdapterParams
    masks: np.ndarray
    features: np.ndarray
    caches: dict
    output: np.ndarray


def _finite(x, stage):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values after {stage}")
    return x


def adapter_forward(params, masks, features, want_tape=False):
    """Semantic activation maps for every mask.

    Args:
        params: adapter weights.
        masks: ``(N, H, W)`` binary masks at 4x the feature resolution.
        features: ``(C, h, w)`` feature map.
        want_tape: also return an :class:`AdapterTape` for :func:`adapter_backward`.

    Returns:
        ``(acts, tape)``: ``acts`` is ``(N, K, h, w)``, positive, each map summing
        to 1; ``tape`` is None unless requested.
    """
    masks = check_mask_batch(masks)
    features = check_feature_map(features)
    c, h, w = features.shape
    if c != params.channels:
        raise ValueError(f"features have {c} channels, adapter expects {params.channels}")
    if masks.shape[1:] != (STRIDE * h, STRIDE * w):
        raise ValueError(
            f"mask resolution {masks.shape[1:]} must be {STRIDE}x the feature resolution {(h, w)}"
        )
    if want_tape:
        # caches reference the weights, so the tape must own them
        params = params.copy()
    n = masks.shape[0]
    if n == 0:
        empty = np.zeros((0, params.n_maps, h, w))
        tape = AdapterTape(params, masks, features, {}, empty) if want_tape else None
        return empty, tape

    caches = {}
    x = masks[..., None].astype(np.float64)
    x, caches["patchify1"] = _nn.conv2d_forward(
        x, params["patchify1.weight"], params["patchify1.bias"], stride=2, pad=1
    )
    x, caches["patchify_act"] = _nn.gelu_forward(x)
    x, caches["patchify2"] = _nn.conv2d_forward(
        x, params["patchify2.weight"], params["patchify2.bias"], stride=2, pad=1
    )
    _finite(x, "patchify")
    x = x + features.transpose(1, 2, 0)
    for i in range(N_BLOCKS):
        p = f"blocks.{i}."
        y, caches[p + "dwconv"] = _nn.depthwise_forward(
            x, params[p + "dwconv.weight"], params[p + "dwconv.bias"]
        )
        y, caches[p + "norm"] = _nn.layernorm_forward(
            y, params[p + "norm.scale"], params[p + "norm.shift"], NORM_EPS
        )
        y, caches[p + "expand"] = _nn.linear_forward(
            y, params[p + "expand.weight"], params[p + "expand.bias"]
        )
        y, caches[p + "act"] = _nn.gelu_forward(y)
        y, caches[p + "project"] = _nn.linear_forward(
            y, params[p + "project.weight"], params[p + "project.bias"]
        )
        x = _finite(x + y, f"block {i}")
    logits, caches["predictor"] = _nn.linear_forward(
        x, params["predictor.weight"], params["predictor.bias"]
    )
    _finite(logits, "predictor")
    acts = _nn.spatial_softmax_forward(logits)
    tape = AdapterTape(params, masks, features, caches, acts) if want_tape else None
    return acts, tape


def adapter_backward(tape, upstream_grad):
    """Reverse-mode gradients of ``sum(upstream_grad * acts)``.

    Returns:
        ``(param_grads, feature_grad)``: a dict keyed like the params, and the
        ``(C, h, w)`` gradient w.r.t. the feature map through the fusion add.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {tape.output.shape}")
    params, caches = tape.params, tape.caches
    grads = {name: np.zeros_like(t) for name, t in params.items()}
    if g.shape[0] == 0:
        return grads, np.zeros_like(tape.features)

    gx = _nn.spatial_softmax_backward(tape.output, g)
    gx, grads["predictor.weight"], grads["predictor.bias"] = _nn.linear_backward(
        caches["predictor"], gx
    )
    for i in reversed(range(N_BLOCKS)):
        p = f"blocks.{i}."
        gy, grads[p + "project.weight"], grads[p + "project.bias"] = _nn.linear_backward(
            caches[p + "project"], gx
        )
        gy = _nn.gelu_backward(caches[p + "act"], gy)
        gy, grads[p + "expand.weight"], grads[p + "expand.bias"] = _nn.linear_backward(
            caches[p + "expand"], gy
        )
        gy, grads[p + "norm.scale"], grads[p + "norm.shift"] = _nn.layernorm_backward(
            caches[p + "norm"], gy
        )
        gy, grads[p + "dwconv.weight"], grads[p + "dwconv.bias"] = _nn.depthwise_backward(
            caches[p + "dwconv"], gy
        )
        gx = gx + gy
    feature_grad = gx.sum(axis=0).transpose(2, 0, 1)
    gx, grads["patchify2.weight"], grads["patchify2.bias"] = _nn.conv2d_backward(
        caches["patchify2"], gx
    )
    gx = _nn.gelu_backward(caches["patchify_act"], gx)
    _, grads["patchify1.weight"], grads["patchify1.bias"] = _nn.conv2d_backward(
        caches["patchify1"], gx
    )
    return grads, feature_grad


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, extra=None):
    """One JSON header line followed by little-endian float64 tensors in declared order."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "channels": params.channels,
        "n_maps": params.n_maps,
        "seed": params.seed,
        "stage": params.stage,
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
    }
    if extra:
        header["extra"] = extra
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors.values())
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Raises ValueError on malformed files."""
    data = Path(path).read_bytes()
    split = data.find(b"\n")
    if split < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(data[:split])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: bad checkpoint header ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    body = np.frombuffer(data, dtype="<f8", offset=split + 1)
    expected = param_shapes(header["channels"], header["n_maps"])
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        if tuple(expected.get(name, ())) != tuple(shape):
            raise ValueError(f"{path}: tensor {name} has unexpected shape {shape}")
        size = int(np.prod(shape))
        if offset + size > body.size:
            raise ValueError(f"{path}: truncated checkpoint")
        tensors[name] = body[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != body.size:
        raise ValueError(f"{path}: trailing data in checkpoint")
    return AdapterParams(tensors, seed=header.get("seed"), stage=header.get("stage", "init"))
