import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mask_adapter.extractors import mask_pool
from mask_adapter.masks import downsample_masks
from mask_adapter.synthworld import (
    STRIDE,
    CategoryBank,
    WorldConfig,
    generate_scene,
    load_scene,
    make_category_bank,
    save_scene,
    scene_stream,
    toy_image_encoder,
)


def test_bank_contract():
    bank = make_category_bank(10, 16, 0.5, rng=0)
    assert bank.seen.sum() == 5 and (~bank.seen).sum() == 5
    assert np.allclose(np.linalg.norm(bank.prototypes, axis=1), 1.0, atol=1e-6)
    again = make_category_bank(10, 16, 0.5, rng=0)
    assert np.array_equal(bank.prototypes, again.prototypes)
    assert np.array_equal(bank.seen, again.seen)
    two = make_category_bank(2, 4, 0.5, rng=3)
    assert two.seen.sum() == 1


def test_bank_default_split_and_roundtrip():
    bank = make_category_bank(12, 16, 2 / 3, rng=0)
    assert len(bank.seen_indices) == 8 and len(bank.unseen_indices) == 4
    back = CategoryBank.from_dict(bank.to_dict())
    assert np.array_equal(back.prototypes, bank.prototypes)
    assert np.array_equal(back.seen, bank.seen)


def test_bank_errors():
    with pytest.raises(ValueError):
        make_category_bank(1, 8, 0.5)
    with pytest.raises(ValueError):
        make_category_bank(4, 8, 0.0)
    with pytest.raises(ValueError):
        make_category_bank(4, 8, 0.95)


def test_zero_noise_features_equal_prototypes(small_bank):
    scene = generate_scene(small_bank, 32, 32, 4, 0.0, rng=1)
    labels = scene.label_map[::STRIDE, ::STRIDE]
    assert np.array_equal(scene.features, small_bank.prototypes[labels].transpose(2, 0, 1))


def test_single_region_scene(small_bank):
    scene = generate_scene(small_bank, 16, 16, 1, 0.2, rng=2)
    assert len(np.unique(scene.label_map)) == 1
    assert scene.gt_masks.shape == (1, 16, 16) and scene.gt_masks.all()


def test_partition_example(small_bank):
    scene = generate_scene(small_bank, 32, 32, 3, 0.5, rng=0)
    m = scene.gt_masks
    assert np.all(m.sum(axis=0) == 1)
    for i, label in enumerate(scene.gt_labels):
        assert np.array_equal(m[i], scene.label_map == label)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from([8, 16, 24]))
def test_partition_property(seed, regions, size):
    bank = make_category_bank(6, 8, 0.5, rng=0)
    scene = generate_scene(bank, size, size, regions, 0.5, rng=seed)
    assert np.all(scene.gt_masks.sum(axis=0) == 1)
    assert len(scene.gt_labels) == len(np.unique(scene.gt_labels)) <= regions
    # block-aligned: each STRIDE x STRIDE block carries a single label
    blocks = scene.label_map.reshape(size // 4, 4, size // 4, 4)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_generation_errors(small_bank):
    with pytest.raises(ValueError):
        generate_scene(small_bank, 30, 32, 2, 0.1)
    with pytest.raises(ValueError):
        generate_scene(small_bank, 32, 32, 7, 0.1)
    with pytest.raises(ValueError):
        generate_scene(small_bank, 32, 32, 4, 0.1, categories=[0, 1])


def test_generation_reproducible(small_bank):
    a = generate_scene(small_bank, 32, 32, 4, 0.5, rng=9)
    b = generate_scene(small_bank, 32, 32, 4, 0.5, rng=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.label_map, b.label_map)


def test_zero_noise_pooling_recovers_prototype(small_bank):
    for seed in range(10):
        scene = generate_scene(small_bank, 32, 32, 5, 0.0, rng=seed)
        e = mask_pool(downsample_masks(scene.gt_masks, STRIDE), scene.features)
        cos = np.sum(e * small_bank.prototypes[scene.gt_labels], axis=1)
        assert np.all(np.abs(cos - 1.0) <= 1e-6)


def test_scene_stream_respects_categories(small_bank):
    world = WorldConfig(channels=8, image_size=16, n_categories=6, min_regions=2, max_regions=3)
    stream = scene_stream(small_bank, world, 0, categories=small_bank.seen_indices)
    for _ in range(10):
        scene = next(stream)
        assert np.all(small_bank.seen[scene.gt_labels])


def test_encoder_full_mask_uniform_features():
    v = np.array([3.0, -1.0, 2.0, 0.5])
    feats = np.broadcast_to(v[:, None, None], (4, 3, 3)).copy()
    out = toy_image_encoder(feats, np.ones((3, 3)))
    assert np.allclose(out, v / np.linalg.norm(v), atol=1e-12)


def test_encoder_single_cell(rng):
    feats = rng.standard_normal((4, 3, 3))
    mask = np.zeros((3, 3))
    mask[1, 2] = 1.0
    v = feats[:, 1, 2]
    assert np.allclose(toy_image_encoder(feats, mask), v / np.linalg.norm(v), atol=1e-12)


def test_encoder_half_box_loop_oracle():
    a = np.array([1.0, 0.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0, 0.0])
    feats = np.zeros((4, 4, 4))
    feats[:, :, :2] = a[:, None, None]
    feats[:, :, 2:] = b[:, None, None]
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0  # covers one a-column and one b-column
    mask[1, 1] = 0.0  # knocks a hole inside the box
    total = np.zeros(4)
    cells = 0
    for y in range(1, 3):
        for x in range(1, 3):
            cells += 1
            if mask[y, x] > 0:
                total += feats[:, y, x]
    expect = total / cells
    expect /= np.linalg.norm(expect)
    assert np.allclose(toy_image_encoder(feats, mask), expect, atol=1e-12)


def test_encoder_errors(rng):
    with pytest.raises(ValueError):
        toy_image_encoder(rng.standard_normal((4, 3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        toy_image_encoder(rng.standard_normal((4, 3, 3)), np.ones((2, 2)))


def test_scene_io_roundtrip(tmp_path, small_bank, small_scene):
    save_scene(tmp_path / "s", small_scene, small_bank)
    scene, bank = load_scene(tmp_path / "s")
    assert np.array_equal(scene.label_map, small_scene.label_map)
    assert np.array_equal(scene.gt_masks, small_scene.gt_masks)
    assert np.array_equal(scene.gt_labels, small_scene.gt_labels)
    assert np.array_equal(scene.features, small_scene.features.astype(np.float32).astype(np.float64))
    assert np.array_equal(bank.prototypes, small_bank.prototypes)
