"""MVTec-style dataset tree scanning and validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from cutswap.services.exceptions import DatasetError

LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
NORMAL_DIR = "good"
MASK_SUFFIX = "_mask"

NORMAL = 0
ANOMALOUS = 1


@dataclass(frozen=True)
class TestItem:
    """One test image with its label and optional ground-truth mask."""

    __test__ = False  # keep pytest from collecting this dataclass

    path: Path
    label: int
    defect: str
    mask_path: Path | None = None

    @property
    def stem(self) -> str:
        return self.path.stem


@dataclass(frozen=True)
class DatasetIndex:
    """Every file of one category, labelled and paired with masks."""

    category: str
    root: Path
    train_normals: tuple[Path, ...]
    test_items: tuple[TestItem, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def anomalous_items(self) -> tuple[TestItem, ...]:
        return tuple(item for item in self.test_items if item.label == ANOMALOUS)

    @property
    def masks(self) -> tuple[Path, ...]:
        return tuple(item.mask_path for item in self.test_items if item.mask_path is not None)


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        path
        for path in directory.iterdir()
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES
    )


def scan_dataset(root: Path) -> DatasetIndex:
    """Index ``train/good``, ``test/<defect>`` and ``ground_truth/<defect>``.

    ``test/good`` items are labelled normal, every other test subdirectory
    anomalous. Masks are paired by stem as ``<stem>_mask.png``; anomalous
    items without a mask are kept and reported as warnings.
    """
    root = Path(root)
    train_dir = root / "train" / NORMAL_DIR
    if not train_dir.is_dir():
        raise DatasetError(f"Dataset root {root} has no train/{NORMAL_DIR} directory.")
    train_normals = tuple(_list_images(train_dir))

    test_items: list[TestItem] = []
    warnings: list[str] = []
    test_root = root / "test"
    defect_dirs = (
        sorted(path for path in test_root.iterdir() if path.is_dir()) if test_root.is_dir() else []
    )
    for defect_dir in defect_dirs:
        defect = defect_dir.name
        is_normal = defect == NORMAL_DIR
        for image_path in _list_images(defect_dir):
            mask_path: Path | None = None
            if not is_normal:
                candidate = root / "ground_truth" / defect / f"{image_path.stem}{MASK_SUFFIX}.png"
                if candidate.is_file():
                    mask_path = candidate
                else:
                    message = f"Anomalous item {image_path} has no mask at {candidate}"
                    LOGGER.warning(message)
                    warnings.append(message)
            test_items.append(
                TestItem(
                    path=image_path,
                    label=NORMAL if is_normal else ANOMALOUS,
                    defect=defect,
                    mask_path=mask_path,
                )
            )
    LOGGER.debug(
        "Scanned %s: %d train normals, %d test items", root, len(train_normals), len(test_items)
    )
    return DatasetIndex(
        category=root.name,
        root=root,
        train_normals=train_normals,
        test_items=tuple(test_items),
        warnings=tuple(warnings),
    )


def _raster_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as raster:
        width, height = raster.size
    return height, width


def validate_index(index: DatasetIndex) -> None:
    """Check that every mask matches the height and width of its image."""
    for item in index.test_items:
        if item.mask_path is None:
            continue
        image_dims = _raster_size(item.path)
        mask_dims = _raster_size(item.mask_path)
        if image_dims != mask_dims:
            raise DatasetError(
                f"Mask {item.mask_path} is {mask_dims[0]}x{mask_dims[1]} but image "
                f"{item.path} is {image_dims[0]}x{image_dims[1]}."
            )
