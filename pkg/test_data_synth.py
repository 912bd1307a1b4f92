"""
Tests for the synthetic scenes, labeled/unlabeled splits and the two-group sampler
"""
import math
import os

import numpy as np
import pytest

from app.exceptions import SplitError
from app.models.data import SceneSpec
from app.models.training import TrainConfig
from app.services.data_synth import (
    VAL_STREAM,
    GroupSampler,
    LabeledPool,
    Shape,
    ShapeKind,
    SyntheticDataset,
    UnlabeledPool,
    build_sampler,
    color_overlap_probe,
    export_scenes,
    generate_scene,
    generate_scenes,
    make_splits,
    rasterize,
    scene_rng,
)
from app.services.transforms import apply_cutmix


@pytest.fixture
def tiny_config():
    return TrainConfig(
        num_train=16,
        num_val=4,
        labeled_ratio=0.25,
        canvas_size=16,
        crop_size=16,
        batch_size=2,
        encoder_widths=[4, 8],
        encoder_strides=[2, 2],
        decoder_widths=[8, 4],
    )


def make_pools(labeled=8, unlabeled=12, size=8):
    rng = np.random.default_rng(0)
    lab = LabeledPool(
        ids=np.arange(labeled),
        images=rng.random((labeled, 3, size, size)).astype(np.float32),
        labels=rng.integers(0, 4, size=(labeled, size, size)).astype(np.uint8),
    )
    unl = UnlabeledPool(
        ids=np.arange(labeled, labeled + unlabeled),
        images=rng.random((unlabeled, 3, size, size)).astype(np.float32),
    )
    return lab, unl


def test_scene_without_shapes_is_background():
    spec = SceneSpec(canvas_size=16, shapes_min=0, shapes_max=0)
    image, label = generate_scene(np.random.default_rng(0), spec)
    assert image.shape == (3, 16, 16) and image.dtype == np.float32
    assert (label == 0).all()
    assert image.min() >= 0.0 and image.max() <= 1.0


@pytest.mark.parametrize("radius", [8.0, 9.0, 10.0, 12.0, 15.5])
@pytest.mark.parametrize("centre", [(24.0, 24.0), (24.5, 24.5), (23.3, 24.7)])
def test_disk_area_matches_geometry(radius, centre):
    disk = Shape(kind=ShapeKind.DISK, class_id=1, cx=centre[0], cy=centre[1], radius=radius)
    area = int((rasterize([disk], 48) == 1).sum())
    assert abs(area - math.pi * radius ** 2) <= 0.02 * math.pi * radius ** 2


def test_shapes_off_the_canvas_are_clipped():
    far = Shape(kind=ShapeKind.DISK, class_id=1, cx=-20.0, cy=5.0, radius=4.0)
    assert (rasterize([far], 16) == 0).all()
    # a quarter of the disk lies on the canvas
    corner = Shape(kind=ShapeKind.DISK, class_id=2, cx=0.0, cy=0.0, radius=10.0)
    quarter = int((rasterize([corner], 16) == 2).sum())
    assert abs(quarter - math.pi * 100 / 4) <= 2


def test_later_shapes_occlude_earlier():
    big = Shape(kind=ShapeKind.RECTANGLE, class_id=1, cx=8.0, cy=8.0, radius=6.0)
    small = Shape(kind=ShapeKind.DISK, class_id=2, cx=8.0, cy=8.0, radius=3.0)
    label = rasterize([big, small], 16)
    assert label[8, 8] == 2
    assert label[3, 8] == 1
    assert label[0, 0] == 0


def test_scenes_are_deterministic_and_independent_of_workers():
    spec = SceneSpec(canvas_size=16)
    a_img, a_lab = generate_scenes(spec, 6, dataset_seed=3, stream=0, workers=1)
    b_img, b_lab = generate_scenes(spec, 6, dataset_seed=3, stream=0, workers=4)
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_lab, b_lab)
    # scene 2 alone reproduces the batch entry
    img, lab = generate_scene(scene_rng(3, 0, 2), spec)
    np.testing.assert_array_equal(img, a_img[2])
    np.testing.assert_array_equal(lab, a_lab[2])


def test_streams_and_seeds_differ():
    spec = SceneSpec(canvas_size=16, shapes_min=2)
    train, _ = generate_scenes(spec, 3, dataset_seed=0, stream=0, workers=1)
    val, _ = generate_scenes(spec, 3, dataset_seed=0, stream=VAL_STREAM, workers=1)
    other, _ = generate_scenes(spec, 3, dataset_seed=1, stream=0, workers=1)
    assert not np.array_equal(train, val)
    assert not np.array_equal(train, other)


def test_split_sizes_and_disjointness():
    labeled, unlabeled = make_splits(1024, 1 / 8, seed=0)
    assert len(labeled) == 128 and len(unlabeled) == 896
    assert not set(labeled) & set(unlabeled)
    assert sorted(np.concatenate([labeled, unlabeled]).tolist()) == list(range(1024))
    assert list(labeled) == sorted(labeled)


def test_split_depends_on_seed_only():
    a, _ = make_splits(100, 0.2, seed=5)
    b, _ = make_splits(100, 0.2, seed=5)
    c, _ = make_splits(100, 0.2, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_degenerate_splits_are_rejected():
    with pytest.raises(SplitError):
        make_splits(10, 0.01, seed=0)
    with pytest.raises(SplitError):
        make_splits(10, 0.99, seed=0)


@pytest.mark.parametrize("rho", [0.0, 0.4, 1.0])
def test_repeat_rate_follows_rho(rho):
    labeled, unlabeled = make_pools()
    sampler = GroupSampler(labeled, unlabeled, batch_size=2, rho=rho, seed=1)
    for _ in range(5000):
        g1, g2 = sampler.next_groups(with_unlabeled=False)
        if g1.repeated:
            np.testing.assert_array_equal(g1.labeled_ids, g2.labeled_ids)
            np.testing.assert_array_equal(g1.x_l, g2.x_l)
    if rho in (0.0, 1.0):
        assert sampler.repeat_rate == rho
    else:
        assert abs(sampler.repeat_rate - rho) < 0.03


def test_independent_groups_draw_their_own_order():
    labeled, unlabeled = make_pools()
    sampler = GroupSampler(labeled, unlabeled, batch_size=4, rho=0.0, seed=2)
    differs = 0
    for _ in range(10):
        g1, g2 = sampler.next_groups(with_unlabeled=False)
        differs += int(not np.array_equal(g1.labeled_ids, g2.labeled_ids))
    assert differs > 5


def test_groups_share_clean_unlabeled_batch():
    labeled, unlabeled = make_pools()
    sampler = GroupSampler(labeled, unlabeled, batch_size=3, rho=0.4, seed=3)
    for _ in range(20):
        g1, g2 = sampler.next_groups()
        assert g1.x_ul is g2.x_ul
        np.testing.assert_array_equal(g1.x_ul_t, apply_cutmix(g1.x_ul, g1.transform))
        np.testing.assert_array_equal(g2.x_ul_t, apply_cutmix(g2.x_ul, g2.transform))
    assert sampler.unlabeled_reads == 20


def test_sampler_rejects_bad_rho():
    labeled, unlabeled = make_pools()
    with pytest.raises(ValueError):
        GroupSampler(labeled, unlabeled, batch_size=2, rho=1.5, seed=0)


def test_supervised_run_never_reads_unlabeled(tiny_config):
    cfg = tiny_config.with_overrides(lam=0.0)
    dataset = SyntheticDataset(cfg, workers=1)
    sampler = build_sampler(cfg, dataset)
    assert sampler.unlabeled is None
    for _ in range(5):
        sampler.next_groups(with_unlabeled=False)
    assert sampler.unlabeled_reads == 0
    with pytest.raises(ValueError):
        sampler.next_groups()


def test_dataset_pools(tiny_config):
    dataset = SyntheticDataset(tiny_config, workers=2)
    labeled, unlabeled = dataset.labeled(), dataset.unlabeled()
    assert len(labeled) == 4 and len(unlabeled) == 12
    np.testing.assert_array_equal(labeled.images, dataset.train_images[labeled.ids])
    assert not hasattr(unlabeled, "labels")
    assert dataset.val_images.shape == (4, 3, 16, 16)


def test_color_probe_flags_separable_colours():
    labels = np.zeros((2, 8, 8), dtype=np.uint8)
    labels[:, :, 4:] = 1
    images = np.repeat(labels[:, None].astype(np.float32), 3, axis=1)
    assert color_overlap_probe(images, labels, 2) == 0.0


def test_color_probe_on_default_scenes_is_not_trivial():
    spec = SceneSpec(canvas_size=32, shapes_min=2)
    images, labels = generate_scenes(spec, 8, dataset_seed=0, stream=0, workers=1)
    assert color_overlap_probe(images, labels, spec.num_classes) > 0.0


def test_export_scenes(tmp_path):
    spec = SceneSpec(canvas_size=8)
    images, labels = generate_scenes(spec, 2, dataset_seed=0, stream=0, workers=1)
    written = export_scenes(images, labels, str(tmp_path), spec.num_classes)
    assert len(written) == 4
    assert written["0/image"].endswith("scene_0000.ppm")
    assert all(os.path.isfile(p) for p in written.values())
