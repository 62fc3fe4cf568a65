"""Ablation sweeps: one full in-memory pipeline run per arm and seed."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from cutswap.config import ABLATION_AXES, RunConfig
from cutswap.dataset.layout import DatasetIndex
from cutswap.models import ImageArray
from cutswap.services.exceptions import ConfigError, CutSwapError
from cutswap.services.pipeline_service import (
    PipelineService,
    TestSet,
    frozen_parameters,
    replace_section,
)
from cutswap.utils.reports import write_csv, write_workbook

LOGGER = logging.getLogger(__name__)

ABLATION_HEADER = (
    "axis",
    "arm",
    "mean_image_auc",
    "mean_pixel_auc",
    "seeds_ok",
    "seeds_total",
    "error",
)
MAX_CLUSTER_ARM = "max"


@dataclass(frozen=True)
class ArmResult:
    axis: str
    arm: str
    image_aucs: tuple[float, ...]
    pixel_aucs: tuple[float, ...]
    seeds_total: int
    error: str = ""

    @property
    def mean_image_auc(self) -> float:
        return float(np.mean(self.image_aucs)) if self.image_aucs else math.nan

    @property
    def mean_pixel_auc(self) -> float:
        return float(np.mean(self.pixel_aucs)) if self.pixel_aucs else math.nan

    def cells(self) -> tuple[str | int | float, ...]:
        return (
            self.axis,
            self.arm,
            self.mean_image_auc,
            self.mean_pixel_auc,
            len(self.image_aucs),
            self.seeds_total,
            self.error,
        )


@dataclass(frozen=True)
class AblationReport:
    axis: str
    arms: tuple[ArmResult, ...]
    warnings: tuple[str, ...] = ()


def arm_label(axis: str, value: Any) -> str:
    if axis == "level_combo":
        return "+".join(str(level) for level in value)
    return str(value)


def arm_config(base: RunConfig, axis: str, value: Any) -> RunConfig:
    """``base`` with only the swept setting changed."""
    if axis == "k":
        return replace_section(base, "augment", k=int(value))
    if axis == "cluster_choice":
        return replace_section(base, "augment", anchor_strategy=f"kmeans-{value}")
    if axis == "anchor_strategy":
        return replace_section(base, "augment", anchor_strategy=str(value))
    if axis == "level_combo":
        return replace_section(base, "saliency", indices=tuple(int(v) for v in value))
    raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def direction_check(arms: tuple[ArmResult, ...], tolerance: float) -> list[str]:
    """Warn when the max-cluster arm trails another arm by more than ``tolerance``."""
    by_name = {arm.arm: arm for arm in arms if arm.image_aucs}
    best = by_name.get(MAX_CLUSTER_ARM)
    if best is None:
        return []
    warnings = []
    for name, arm in by_name.items():
        if name == MAX_CLUSTER_ARM:
            continue
        if best.mean_image_auc < arm.mean_image_auc - tolerance:
            warnings.append(
                f"max-cluster arm image AUC {best.mean_image_auc:.4f} trails '{name}' "
                f"({arm.mean_image_auc:.4f}) by more than {tolerance}"
            )
    return warnings


def _run_arm(
    service: PipelineService,
    axis: str,
    value: Any,
    index: DatasetIndex,
    train_images: Sequence[ImageArray],
    test_set: TestSet,
) -> ArmResult:
    base = service.config
    image_aucs, pixel_aucs, errors = [], [], []
    for seed in base.ablation.seeds:
        cfg = arm_config(base.with_root_seed(seed), axis, value).resolved()
        try:
            result = service.fit(cfg, index)
            encoder, _ = frozen_parameters(result.encoder, result.head)
            outcome = service.evaluate_encoder(
                encoder, train_images, test_set, cfg.bank.coreset_ratio, cfg
            )
        except (CutSwapError, ValueError) as exc:
            LOGGER.warning("Arm %s=%s seed %d failed: %s", axis, arm_label(axis, value), seed, exc)
            errors.append(f"seed {seed}: {exc}")
            continue
        image_aucs.append(outcome.image_auc)
        pixel_aucs.append(outcome.pixel_auc)
    return ArmResult(
        axis=axis,
        arm=arm_label(axis, value),
        image_aucs=tuple(image_aucs),
        pixel_aucs=tuple(pixel_aucs),
        seeds_total=len(base.ablation.seeds),
        error="; ".join(errors),
    )


def run_ablation(service: PipelineService, axis: str) -> AblationReport:
    """Run every arm of ``axis``; arm failures are recorded and the sweep continues.

    All arms share the dataset and, for a given seed, every stage seed, so
    differences are attributable to the swept setting alone.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    values = service.config.ablation.arms(axis)
    for value in values:
        arm_config(service.config, axis, value)
    index = service.ensure_dataset()
    train_images = service.load_images(index.train_normals)
    test_set = service.load_test_set(index)
    arms = []
    for value in values:
        arms.append(_run_arm(service, axis, value, index, train_images, test_set))
        LOGGER.info(
            "Ablation %s=%s: mean image AUC %.4f",
            axis,
            arms[-1].arm,
            arms[-1].mean_image_auc,
        )
    warnings: list[str] = []
    if axis == "cluster_choice":
        warnings = direction_check(tuple(arms), service.config.ablation.direction_tolerance)
        for message in warnings:
            LOGGER.warning(message)
    report = AblationReport(axis=axis, arms=tuple(arms), warnings=tuple(warnings))
    rows = [arm.cells() for arm in report.arms]
    write_csv(service.paths.ablation_dir / f"{axis}.csv", ABLATION_HEADER, rows)
    write_workbook(
        service.paths.ablation_dir / f"{axis}.xlsx",
        {axis: (ABLATION_HEADER, rows), "warnings": (("message",), [(w,) for w in warnings])},
    )
    return report
