import numpy as np
import pytest

from cutswap.dataset.imageio import save_image, save_mask
from cutswap.dataset.layout import ANOMALOUS, NORMAL, scan_dataset, validate_index
from cutswap.services.exceptions import DatasetError


def _image(path, size=(4, 4)) -> None:
    save_image(np.zeros((*size, 3)), path)


def _mask(path, size=(4, 4)) -> None:
    mask = np.zeros(size, dtype=bool)
    mask[0, 0] = True
    save_mask(mask, path)


def _tree(root, *, masks=2, mask_size=(4, 4)) -> None:
    for i in range(3):
        _image(root / "train" / "good" / f"{i:03d}.png")
    for i in range(2):
        _image(root / "test" / "good" / f"{i:03d}.png")
        _image(root / "test" / "crack" / f"{i:03d}.png")
    for i in range(masks):
        _mask(root / "ground_truth" / "crack" / f"{i:03d}_mask.png", mask_size)


def test_scan_labels_and_pairs_masks(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root)

    index = scan_dataset(root)

    assert index.category == "bottle"
    assert len(index.train_normals) == 3
    assert len(index.test_items) == 4
    assert [item.label for item in index.test_items].count(NORMAL) == 2
    assert len(index.anomalous_items) == 2
    assert all(item.mask_path is not None for item in index.anomalous_items)
    assert all(item.mask_path is None for item in index.test_items if item.label == NORMAL)
    assert index.warnings == ()


def test_items_are_sorted_by_defect_then_name(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root)

    index = scan_dataset(root)

    assert [(item.defect, item.stem) for item in index.test_items] == [
        ("crack", "000"),
        ("crack", "001"),
        ("good", "000"),
        ("good", "001"),
    ]
    assert index.test_items[0].label == ANOMALOUS


def test_missing_mask_is_a_warning_not_a_failure(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root, masks=1)

    index = scan_dataset(root)

    assert len(index.anomalous_items) == 2
    assert len(index.masks) == 1
    assert len(index.warnings) == 1
    assert "001" in index.warnings[0]


def test_empty_test_directory_gives_empty_test_list(tmp_path) -> None:
    root = tmp_path / "cable"
    _image(root / "train" / "good" / "000.png")
    (root / "test").mkdir()

    index = scan_dataset(root)

    assert len(index.train_normals) == 1
    assert index.test_items == ()


def test_missing_train_directory_is_an_error(tmp_path) -> None:
    (tmp_path / "test" / "good").mkdir(parents=True)

    with pytest.raises(DatasetError):
        scan_dataset(tmp_path)


def test_non_image_files_are_ignored(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root)
    (root / "train" / "good" / "notes.txt").write_text("ignore me", encoding="utf-8")

    assert len(scan_dataset(root).train_normals) == 3


def test_rescanning_yields_identical_index(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root)

    assert scan_dataset(root) == scan_dataset(root)


def test_validation_rejects_mask_with_wrong_dims(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root, mask_size=(5, 4))

    with pytest.raises(DatasetError):
        validate_index(scan_dataset(root))


def test_validation_accepts_matching_masks(tmp_path) -> None:
    root = tmp_path / "bottle"
    _tree(root)

    validate_index(scan_dataset(root))
