"""Synthetic scenes standing in for CLIP image features and text embeddings.

Each category owns a unit prototype vector (the "text embedding"). A scene is a
Voronoi partition of the feature grid into regions, each painted with a
distinct category; the feature at every cell is that category's prototype plus
isotropic Gaussian noise. The partition is drawn on the feature grid and
upsampled to image resolution, so ground-truth masks are unions of whole
``STRIDE x STRIDE`` blocks.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_feature_map, check_random_state, check_soft_masks
from .masks import load_masks_bitset, read_pgm, save_masks_bitset, write_pgm

STRIDE = 4


@dataclass
class CategoryBank:
    """Unit-norm category prototypes with names and a seen/unseen split."""

    prototypes: np.ndarray
    names: list
    seen: np.ndarray

    @property
    def n_categories(self):
        return self.prototypes.shape[0]

    @property
    def channels(self):
        return self.prototypes.shape[1]

    @property
    def seen_indices(self):
        return np.flatnonzero(self.seen)

    @property
    def unseen_indices(self):
        return np.flatnonzero(~self.seen)

    def to_dict(self):
        return {
            "prototypes": self.prototypes.tolist(),
            "names": list(self.names),
            "seen": [bool(s) for s in self.seen],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            prototypes=np.asarray(d["prototypes"], dtype=np.float64),
            names=list(d["names"]),
            seen=np.asarray(d["seen"], dtype=bool),
        )


@dataclass
class Scene:
    label_map: np.ndarray  # (H, W) int
    gt_masks: np.ndarray  # (N, H, W) bool
    gt_labels: np.ndarray  # (N,) int
    features: np.ndarray  # (C, H/4, W/4) float64
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.label_map.shape


@dataclass
class WorldConfig:
    """Knobs of the synthetic world; defaults are the desk-scale setting."""

    channels: int = 16
    image_size: int = 64
    n_categories: int = 12
    seen_fraction: float = 2 / 3
    noise_sigma: float = 0.5
    min_regions: int = 6
    max_regions: int = 12
    bank_seed: int = 0


def make_category_bank(n_categories, channels, seen_fraction, rng=None):
    """Draw isotropic unit prototypes and flag ``round(L * seen_fraction)`` of them as seen."""
    if n_categories < 2:
        raise ValueError("need at least 2 categories")
    if channels < 4:
        raise ValueError("need at least 4 channels")
    if not 0.0 < seen_fraction < 1.0:
        raise ValueError("seen_fraction must lie in (0, 1)")
    n_seen = int(np.floor(n_categories * seen_fraction + 0.5))
    if n_seen in (0, n_categories):
        raise ValueError(
            f"seen_fraction={seen_fraction} leaves no {'seen' if n_seen == 0 else 'unseen'} category"
        )
    rng = check_random_state(rng)
    protos = rng.standard_normal((n_categories, channels))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    seen = np.zeros(n_categories, dtype=bool)
    seen[rng.permutation(n_categories)[:n_seen]] = True
    names = [f"category_{i:02d}" for i in range(n_categories)]
    return CategoryBank(prototypes=protos, names=names, seen=seen)


def generate_scene(bank, height, width, regions, noise_sigma, rng=None, categories=None):
    """Generate one Voronoi scene.

    Args:
        bank: category prototypes.
        height, width: image size in pixels, both multiples of 4.
        regions: number of Voronoi sites, each given a distinct category.
        noise_sigma: std of the Gaussian noise added to every feature cell.
        rng: seed or generator.
        categories: optional subset of category indices to draw from
            (training scenes use the seen categories only).
    """
    if height % STRIDE or width % STRIDE:
        raise ValueError(f"image size must be a multiple of {STRIDE}, got {height}x{width}")
    pool = np.arange(bank.n_categories) if categories is None else np.asarray(categories)
    if not 1 <= regions <= len(pool):
        raise ValueError(f"regions must lie in [1, {len(pool)}], got {regions}")
    rng = check_random_state(rng)
    h, w = height // STRIDE, width // STRIDE

    sites = rng.uniform(0.0, 1.0, size=(regions, 2)) * (h, w)
    cats = rng.choice(pool, size=regions, replace=False)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d2 = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    block_labels = cats[np.argmin(d2, axis=0)]

    feats = bank.prototypes[block_labels].transpose(2, 0, 1).copy()
    if noise_sigma > 0:
        feats += rng.normal(0.0, noise_sigma, size=feats.shape)

    label_map = np.kron(block_labels, np.ones((STRIDE, STRIDE), dtype=block_labels.dtype))
    present = np.unique(label_map)
    gt_masks = label_map[None] == present[:, None, None]
    return Scene(
        label_map=label_map.astype(np.int64),
        gt_masks=gt_masks,
        gt_labels=present.astype(np.int64),
        features=feats,
    )


def scene_stream(bank, world, rng, categories=None):
    """Yield an endless sequence of scenes with a random region count per scene."""
    rng = check_random_state(rng)
    pool = np.arange(bank.n_categories) if categories is None else np.asarray(categories)
    hi = min(world.max_regions, len(pool))
    lo = min(world.min_regions, hi)
    while True:
        regions = int(rng.integers(lo, hi + 1))
        yield generate_scene(
            bank,
            world.image_size,
            world.image_size,
            regions,
            world.noise_sigma,
            rng,
            categories=categories,
        )


def toy_image_encoder(features, crop_mask):
    """Encode a masked crop the way a CLIP image encoder sees a masked image.

    The crop is the tight bounding box of the mask's support; cells outside the
    support are zeroed (the black background of a masked image) and the crop is
    averaged over its full box area, then L2-normalized.
    """
    features = check_feature_map(features)
    crop = check_soft_masks(crop_mask, "crop_mask")[0]
    if crop.shape != features.shape[1:]:
        raise ValueError("crop mask and features differ in resolution")
    support = crop > 0
    if not support.any():
        raise ValueError("crop mask is all zero")
    ys, xs = np.nonzero(support)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    box = features[:, y0:y1, x0:x1] * support[y0:y1, x0:x1]
    v = box.mean(axis=(1, 2))
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("crop encodes to a zero vector")
    return v / norm


# --------------------------------------------------------------------------- I/O


def save_scene(directory, scene, bank=None):
    """Export a scene directory: raw float32 features, PGM labels, bitset masks, JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(scene.features, dtype="<f4")
    (directory / "features.f32").write_bytes(feats.tobytes())
    (directory / "features.json").write_text(json.dumps({"shape": list(feats.shape)}))
    write_pgm(directory / "label_map.pgm", scene.label_map)
    save_masks_bitset(directory / "masks.bin", scene.gt_masks)
    (directory / "labels.json").write_text(json.dumps([int(x) for x in scene.gt_labels]))
    if bank is not None:
        (directory / "bank.json").write_text(json.dumps(bank.to_dict()))


def load_scene(directory):
    """Inverse of :func:`save_scene`; returns ``(scene, bank_or_None)``.

    Features come back as float64 holding the stored float32 values.
    """
    directory = Path(directory)
    shape = json.loads((directory / "features.json").read_text())["shape"]
    feats = np.frombuffer((directory / "features.f32").read_bytes(), dtype="<f4")
    scene = Scene(
        label_map=read_pgm(directory / "label_map.pgm"),
        gt_masks=load_masks_bitset(directory / "masks.bin"),
        gt_labels=np.asarray(json.loads((directory / "labels.json").read_text()), dtype=np.int64),
        features=feats.reshape(shape).astype(np.float64),
    )
    bank_path = directory / "bank.json"
    bank = CategoryBank.from_dict(json.loads(bank_path.read_text())) if bank_path.exists() else None
    return scene, bank
