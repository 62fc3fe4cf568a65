import numpy as np
import pytest

from cutswap.dataset.imageio import load_image, load_mask
from cutswap.dataset.synthetic import (
    SynthConfig,
    generate_synthetic_category,
    plant_defect,
    render_normal,
)
from cutswap.services.exceptions import ConfigError
from cutswap.utils.seeding import make_rng

SMALL = SynthConfig(
    image_size=32, n_train=4, n_test_normal=2, n_test_anomalous=3, defect_radius=3
)


def test_counts_match_configuration(tmp_path) -> None:
    index = generate_synthetic_category(SMALL, 11, tmp_path)

    assert index.category == "synthetic"
    assert len(index.train_normals) == 4
    assert len(index.test_items) == 5
    assert len(index.anomalous_items) == 3
    assert len(index.masks) == 3


def test_masks_lie_inside_the_object(tmp_path) -> None:
    index = generate_synthetic_category(SMALL, 5, tmp_path)
    first, last = SMALL.object_bounds

    for mask_path in index.masks:
        rows, cols = np.nonzero(load_mask(mask_path))
        assert rows.size > 0
        assert rows.min() >= first and rows.max() <= last
        assert cols.min() >= first and cols.max() <= last


def test_equal_seeds_write_identical_trees(tmp_path) -> None:
    first = generate_synthetic_category(SMALL, 21, tmp_path / "a")
    second = generate_synthetic_category(SMALL, 21, tmp_path / "b")

    files_a = sorted(p.relative_to(first.root) for p in first.root.rglob("*.png"))
    files_b = sorted(p.relative_to(second.root) for p in second.root.rglob("*.png"))
    assert files_a == files_b
    for relative in files_a:
        assert (first.root / relative).read_bytes() == (second.root / relative).read_bytes()


def test_different_seeds_differ(tmp_path) -> None:
    first = generate_synthetic_category(SMALL, 1, tmp_path / "a")
    second = generate_synthetic_category(SMALL, 2, tmp_path / "b")

    assert first.train_normals[0].read_bytes() != second.train_normals[0].read_bytes()


def test_zero_delta_defect_leaves_the_render_untouched(tmp_path) -> None:
    cfg = SynthConfig(
        image_size=32, n_train=1, n_test_normal=0, n_test_anomalous=2, defect_radius=3,
        defect_delta=0.0,
    )
    index = generate_synthetic_category(cfg, 8, tmp_path)

    for i, item in enumerate(index.anomalous_items):
        expected = render_normal(cfg, make_rng(8, "test-defect", i))
        assert np.array_equal(np.rint(load_image(item.path) * 255), np.rint(expected * 255))
        assert load_mask(item.mask_path).any()


@pytest.mark.parametrize("radius", [0, 1, 3, 4])
def test_blob_mask_is_the_discrete_disk(radius) -> None:
    cfg = SynthConfig(image_size=32, defect="blob", defect_radius=radius)
    img = render_normal(cfg, make_rng(0, "render"))

    _, mask = plant_defect(img, cfg, make_rng(0, "plant"))

    offsets = range(-radius, radius + 1)
    lattice_points = sum(1 for dr in offsets for dc in offsets if dr * dr + dc * dc <= radius**2)
    assert int(mask.sum()) == lattice_points


def test_planted_defect_only_changes_masked_pixels() -> None:
    cfg = SynthConfig(image_size=32, defect="scratch", scratch_length=10, scratch_width=2)
    img = render_normal(cfg, make_rng(4, "render"))

    out, mask = plant_defect(img, cfg, make_rng(4, "plant"))

    assert mask.any()
    assert np.array_equal(out[~mask], img[~mask])
    assert np.all(out[mask] >= img[mask])


def test_noise_texture_renders_in_range() -> None:
    cfg = SynthConfig(image_size=24, texture="noise")

    img = render_normal(cfg, make_rng(2, "render"))

    assert img.shape == (24, 24, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_defect_larger_than_object_is_rejected(tmp_path) -> None:
    cfg = SynthConfig(image_size=16, object_fraction=0.5, defect_radius=6)

    with pytest.raises(ConfigError):
        generate_synthetic_category(cfg, 0, tmp_path)


def test_invalid_texture_is_rejected() -> None:
    with pytest.raises(ConfigError):
        SynthConfig(texture="plaid")
