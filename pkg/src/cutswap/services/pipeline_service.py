"""High level orchestration of the synth, augment, train, bank, score and eval stages."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from cutswap import __version__
from cutswap.augment.cutswap import LABEL_NAMES, cutswap_all_levels
from cutswap.augment.saliency import BuiltinSaliencyProvider, ExternalSaliencyProvider
from cutswap.augment.stream import CutSwapPairSource
from cutswap.config import RunConfig, SaliencyConfig, dump_config
from cutswap.dataset.imageio import (
    load_mask,
    prepare_image,
    resample_bilinear,
    save_gray,
    save_image,
)
from cutswap.dataset.layout import (
    ANOMALOUS,
    NORMAL,
    DatasetIndex,
    TestItem,
    scan_dataset,
    validate_index,
)
from cutswap.dataset.synthetic import generate_synthetic_category
from cutswap.detection.memorybank import (
    AnomalyResult,
    MemoryBank,
    build_bank,
    extract_patch_features,
    load_bank,
    save_bank,
    score_image,
)
from cutswap.detection.metrics import ScoredSet, pixel_auc, roc_auc
from cutswap.model.checkpoint import (
    dumps_checkpoint,
    encoder_digest,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)
from cutswap.model.encoder import EncoderParams, HeadParams
from cutswap.model.training import TrainResult, feature_separation, train
from cutswap.models import (
    ImageArray,
    MaskArray,
    ProgressReporter,
    SaliencyProvider,
    SaliencyStack,
    silent_progress,
)
from cutswap.services.exceptions import MissingArtifactError, TrainingDivergedError
from cutswap.utils.parallel import ordered_map
from cutswap.utils.reports import format_cell, write_csv, write_workbook

LOGGER = logging.getLogger(__name__)

MANIFEST_HEADER = (
    "image",
    "level",
    "label",
    "label_name",
    "anchor1_row",
    "anchor1_col",
    "anchor2_row",
    "anchor2_col",
    "patch_height",
    "patch_width",
    "rotation_deg",
    "seed",
    "positive",
    "negative",
)
LOSS_HEADER = ("epoch", "mean_loss")
SCORES_HEADER = ("image", "split", "defect", "label", "image_score")
METRICS_HEADER = ("category", "coreset_ratio", "image_auc", "pixel_auc", "n_test", "seed")


@dataclass(frozen=True)
class ArtifactPaths:
    """Where every stage reads and writes below the run directory."""

    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def positives_dir(self) -> Path:
        return self.root / "augment" / "positives"

    @property
    def negatives_dir(self) -> Path:
        return self.root / "augment" / "negatives"

    @property
    def manifest(self) -> Path:
        return self.root / "augment" / "manifest.csv"

    @property
    def checkpoint(self) -> Path:
        return self.root / "model" / "encoder.csw"

    @property
    def last_good(self) -> Path:
        return self.root / "model" / "encoder.last_good.csw"

    @property
    def loss_csv(self) -> Path:
        return self.root / "model" / "loss.csv"

    @property
    def train_warnings(self) -> Path:
        return self.root / "model" / "warnings.txt"

    @property
    def bank(self) -> Path:
        return self.root / "bank" / "bank.csb"

    @property
    def scores_csv(self) -> Path:
        return self.root / "scores" / "scores.csv"

    @property
    def heatmaps_dir(self) -> Path:
        return self.root / "scores" / "heatmaps"

    @property
    def heatmap_scale(self) -> Path:
        return self.root / "scores" / "heatmap_scale.txt"

    @property
    def metrics_csv(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def report_yaml(self) -> Path:
        return self.root / "report.yaml"

    @property
    def report_xlsx(self) -> Path:
        return self.root / "report.xlsx"

    @property
    def ablation_dir(self) -> Path:
        return self.root / "ablation"

    @property
    def snapshot(self) -> Path:
        return self.root / "config.snapshot.yaml"


@dataclass(frozen=True)
class ScoreRecord:
    image: str
    split: str
    defect: str
    label: int
    image_score: float


@dataclass(frozen=True)
class MetricsRow:
    category: str
    coreset_ratio: float
    image_auc: float
    pixel_auc: float
    n_test: int
    seed: int

    def cells(self) -> tuple[str | int | float, ...]:
        return (
            self.category,
            self.coreset_ratio,
            self.image_auc,
            self.pixel_auc,
            self.n_test,
            self.seed,
        )


@dataclass(frozen=True)
class ExperimentReport:
    """Metrics rows with everything needed to reproduce and audit the run."""

    rows: tuple[MetricsRow, ...]
    config_snapshot: dict[str, Any]
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class TestSet:
    """Prepared test images with labels and working-resolution masks."""

    __test__ = False

    items: tuple[TestItem, ...]
    images: tuple[ImageArray, ...]
    masks: tuple[MaskArray | None, ...]

    @property
    def labels(self) -> list[int]:
        return [item.label for item in self.items]


@dataclass(frozen=True, eq=False)
class EvaluationOutcome:
    image_auc: float
    pixel_auc: float
    results: tuple[AnomalyResult, ...]
    warnings: tuple[str, ...] = ()


def saliency_provider(cfg: SaliencyConfig) -> SaliencyProvider:
    """Builtin multiscale proxy or maps exported by an external extractor."""
    if cfg.source == "external":
        return ExternalSaliencyProvider(
            directory=Path(cfg.directory or "."),
            indices=cfg.indices,
            total_levels=cfg.total_levels,
        )
    return BuiltinSaliencyProvider(
        indices=cfg.indices,
        total_levels=cfg.total_levels,
        sigma_min=cfg.sigma_min,
        sigma_max=cfg.sigma_max,
    )


def frozen_parameters(
    encoder: EncoderParams, head: HeadParams
) -> tuple[EncoderParams, HeadParams]:
    """Parameters exactly as a checkpoint stores them (float32 precision)."""
    return loads_checkpoint(dumps_checkpoint(encoder, head))


def _flatten(values: dict[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    flat: list[tuple[str, Any]] = []
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.extend(_flatten(value, f"{name}."))
        else:
            flat.append((name, value))
    return flat


def _resize_mask(mask: MaskArray, size: int) -> MaskArray:
    if mask.shape == (size, size):
        return mask
    return resample_bilinear(mask.astype(np.float64), size, size) >= 0.5


class PipelineService:
    """Facade running each stage against one run directory."""

    def __init__(
        self,
        config: RunConfig,
        out_dir: Path,
        progress: ProgressReporter = silent_progress,
        workers: int | None = None,
    ) -> None:
        self.config = config.resolved()
        self.paths = ArtifactPaths(Path(out_dir))
        self._progress = progress
        self._workers = workers

    def synth(self) -> DatasetIndex:
        """Write the seeded synthetic category under ``data/``."""
        cfg = self.config
        self._progress(f"Synthesizing category '{cfg.synth.category}'", 0.0)
        index = generate_synthetic_category(cfg.synth, cfg.stage_seed("synth"), self.paths.data_dir)
        self._snapshot()
        self._progress("Synthetic category ready", 100.0)
        return index

    def dataset(self) -> DatasetIndex:
        """Index the configured dataset root, or the synthesized category."""
        root = (
            Path(self.config.data.root)
            if self.config.data.root
            else self.paths.data_dir / self.config.synth.category
        )
        if not (root / "train").is_dir():
            raise MissingArtifactError(
                f"No dataset at {root}; run 'synth' first or set data.root."
            )
        index = scan_dataset(root)
        validate_index(index)
        if not index.train_normals:
            raise MissingArtifactError(f"Dataset {root} has no training images.")
        return index

    def ensure_dataset(self) -> DatasetIndex:
        try:
            return self.dataset()
        except MissingArtifactError:
            if self.config.data.root:
                raise
            return self.synth()

    def load_images(self, paths: Sequence[Path]) -> list[ImageArray]:
        size = self.config.data.image_size
        return ordered_map(lambda path: prepare_image(path, size), paths, self._workers)

    def load_test_set(self, index: DatasetIndex) -> TestSet:
        size = self.config.data.image_size
        items = index.test_items
        if not items:
            raise MissingArtifactError(f"Dataset {index.root} has no test images.")

        def mask_for(item: TestItem) -> MaskArray | None:
            if item.label != ANOMALOUS:
                return np.zeros((size, size), dtype=bool)
            if item.mask_path is None:
                return None
            return _resize_mask(load_mask(item.mask_path), size)

        return TestSet(
            items=items,
            images=tuple(self.load_images([item.path for item in items])),
            masks=tuple(ordered_map(mask_for, items, self._workers)),
        )

    def stacks_for(
        self, images: Sequence[ImageArray], stems: Sequence[str], cfg: RunConfig
    ) -> list[SaliencyStack]:
        provider = saliency_provider(cfg.saliency)
        return ordered_map(
            lambda pair: provider.stack_for(pair[0], pair[1]),
            list(zip(images, stems)),
            self._workers,
        )

    def pair_source(
        self, images: Sequence[ImageArray], stems: Sequence[str], cfg: RunConfig
    ) -> CutSwapPairSource:
        return CutSwapPairSource(
            images=tuple(images),
            stacks=tuple(self.stacks_for(images, stems, cfg)),
            cfg=cfg.augment,
            seed=cfg.stage_seed("augment"),
            stems=tuple(stems),
            include_scar=cfg.train.three_way,
            workers=self._workers,
        )

    def augment(self) -> int:
        """Write the first epoch's positives, negatives and manifest; returns the negative count."""
        index = self.dataset()
        stems = [path.stem for path in index.train_normals]
        images = self.load_images(index.train_normals)
        source = self.pair_source(images, stems, self.config)
        rows = []
        for position, (stem, image) in enumerate(zip(stems, images)):
            rng_seed = source.image_seed(0, position)
            sweep = cutswap_all_levels(
                image,
                source.stacks[position],
                self.config.augment.k,
                rng_seed,
                self.config.augment,
                include_scar=source.include_scar,
            )
            save_image(sweep.positive, self.paths.positives_dir / f"{stem}.png")
            for pair in sweep.pairs:
                name = f"{stem}_L{pair.level}_{LABEL_NAMES[pair.label]}.png"
                save_image(pair.negative, self.paths.negatives_dir / name)
                patch = pair.patches[0]
                rows.append(
                    (
                        stem,
                        pair.level,
                        pair.label,
                        LABEL_NAMES[pair.label],
                        pair.anchors.a1[0],
                        pair.anchors.a1[1],
                        pair.anchors.a2[0],
                        pair.anchors.a2[1],
                        patch.height,
                        patch.width,
                        patch.rotation_deg,
                        pair.seed,
                        f"positives/{stem}.png",
                        f"negatives/{name}",
                    )
                )
            self._progress(f"Augmented {stem}", 100.0 * (position + 1) / len(images))
        written = write_csv(self.paths.manifest, MANIFEST_HEADER, rows)
        self._snapshot()
        LOGGER.info("Wrote %d negatives to %s", written, self.paths.negatives_dir)
        return written

    def fit(self, cfg: RunConfig, index: DatasetIndex) -> TrainResult:
        """Train encoder and head on the normal images of ``index`` (in memory)."""
        stems = [path.stem for path in index.train_normals]
        images = self.load_images(index.train_normals)
        source = self.pair_source(images, stems, cfg)
        result = train(source, cfg.train, progress=self._progress)
        try:
            feature_separation(result.encoder, source.groups(0))
        except ValueError as exc:
            LOGGER.warning("Feature separation diagnostic skipped: %s", exc)
        return result

    def train(self) -> TrainResult:
        """Train, then write the checkpoint and the loss curve."""
        index = self.dataset()
        try:
            result = self.fit(self.config, index)
        except TrainingDivergedError as exc:
            if exc.last_good is not None:
                encoder, head = exc.last_good
                save_checkpoint(self.paths.last_good, encoder, head)
                LOGGER.error("Last finite parameters saved to %s", self.paths.last_good)
            raise
        save_checkpoint(self.paths.checkpoint, result.encoder, result.head)
        self.paths.train_warnings.write_text(
            "".join(f"{warning}\n" for warning in result.warnings), encoding="utf-8"
        )
        write_csv(
            self.paths.loss_csv,
            LOSS_HEADER,
            [(epoch, loss) for epoch, loss in enumerate(result.loss_curve, start=1)],
        )
        self._snapshot()
        return result

    def load_encoder(self) -> tuple[EncoderParams, HeadParams]:
        return load_checkpoint(self.paths.checkpoint)

    def bank_for(
        self,
        encoder: EncoderParams,
        train_images: Sequence[ImageArray],
        ratio: float,
        cfg: RunConfig | None = None,
    ) -> MemoryBank:
        cfg = cfg or self.config
        self._progress(f"Building memory bank (ratio {ratio:g})", None)
        return build_bank(
            encoder,
            train_images,
            cfg.bank.grid,
            ratio,
            cfg.stage_seed("bank"),
            min_size=cfg.bank.min_size,
            quiet=False,
        )

    def build_bank(self) -> MemoryBank:
        """Encode the training normals with the saved encoder and write the bank."""
        encoder, _ = self.load_encoder()
        index = self.dataset()
        bank = self.bank_for(
            encoder, self.load_images(index.train_normals), self.config.bank.coreset_ratio
        )
        save_bank(bank, self.paths.bank)
        self._snapshot()
        return bank

    def score_images(
        self, encoder: EncoderParams, bank: MemoryBank, images: Sequence[ImageArray]
    ) -> list[AnomalyResult]:
        size = self.config.data.image_size
        sigma = self.config.score.smooth_sigma

        def score_one(img: ImageArray) -> AnomalyResult:
            patches = extract_patch_features(encoder, img, bank.grid_dims)
            return score_image(bank, patches, (size, size), sigma)

        return ordered_map(score_one, images, self._workers)

    def score(self) -> list[ScoreRecord]:
        """Score the configured split against the saved bank and write heatmaps."""
        encoder, _ = self.load_encoder()
        bank = load_bank(self.paths.bank, expected_checksum=encoder_digest(encoder))
        index = self.dataset()
        split = self.config.score.split
        if split == "train":
            items = [TestItem(path=p, label=NORMAL, defect="good") for p in index.train_normals]
        else:
            items = list(index.test_items)
        if not items:
            raise MissingArtifactError(f"No images in split '{split}' of {index.root}.")
        results = self.score_images(encoder, bank, self.load_images([i.path for i in items]))
        records = [
            ScoreRecord(
                image=item.path.relative_to(index.root).as_posix(),
                split=split,
                defect=item.defect,
                label=item.label,
                image_score=result.image_score,
            )
            for item, result in zip(items, results)
        ]
        write_csv(
            self.paths.scores_csv,
            SCORES_HEADER,
            [(r.image, r.split, r.defect, r.label, r.image_score) for r in records],
        )
        self._write_heatmaps(items, results)
        self._snapshot()
        return records

    def _write_heatmaps(self, items: Sequence[TestItem], results: Sequence[AnomalyResult]) -> None:
        scale = max(float(result.heatmap.max()) for result in results)
        for item, result in zip(items, results):
            normalized = result.heatmap / scale if scale > 0 else np.zeros_like(result.heatmap)
            save_gray(normalized, self.paths.heatmaps_dir / f"{item.defect}_{item.stem}.png")
        self.paths.heatmap_scale.parent.mkdir(parents=True, exist_ok=True)
        self.paths.heatmap_scale.write_text(format_cell(scale) + "\n", encoding="utf-8")

    def evaluate_encoder(
        self,
        encoder: EncoderParams,
        train_images: Sequence[ImageArray],
        test_set: TestSet,
        ratio: float,
        cfg: RunConfig | None = None,
    ) -> EvaluationOutcome:
        """Build a bank at ``ratio``, score the test set and compute both AUCs."""
        cfg = cfg or self.config
        bank = self.bank_for(encoder, train_images, ratio, cfg)
        results = self.score_images(encoder, bank, test_set.images)
        image_level = roc_auc(
            ScoredSet.of([r.image_score for r in results], test_set.labels)
        )
        warnings = []
        heatmaps, masks = [], []
        for item, result, mask in zip(test_set.items, results, test_set.masks):
            if mask is None:
                warnings.append(f"{item.path} has no mask; excluded from pixel AUC")
                continue
            heatmaps.append(result.heatmap)
            masks.append(mask)
        pixel_level = pixel_auc(heatmaps, masks, cfg.eval.pixel_auc_mode)
        return EvaluationOutcome(
            image_auc=image_level,
            pixel_auc=pixel_level,
            results=tuple(results),
            warnings=tuple(warnings),
        )

    def evaluate(self) -> ExperimentReport:
        """One metrics row per configured coreset ratio, plus YAML and Excel reports."""
        timings: dict[str, float] = {}
        started = time.perf_counter()
        encoder, _ = self.load_encoder()
        index = self.dataset()
        train_images = self.load_images(index.train_normals)
        test_set = self.load_test_set(index)
        timings["load"] = time.perf_counter() - started

        rows = []
        warnings: list[str] = list(index.warnings)
        if self.paths.train_warnings.is_file():
            warnings.extend(self.paths.train_warnings.read_text(encoding="utf-8").splitlines())
        for ratio in self.config.eval.coreset_ratios:
            started = time.perf_counter()
            outcome = self.evaluate_encoder(encoder, train_images, test_set, ratio)
            timings[f"ratio_{ratio:g}"] = time.perf_counter() - started
            warnings.extend(w for w in outcome.warnings if w not in warnings)
            rows.append(
                MetricsRow(
                    category=index.category,
                    coreset_ratio=ratio,
                    image_auc=outcome.image_auc,
                    pixel_auc=outcome.pixel_auc,
                    n_test=len(test_set.items),
                    seed=self.config.seed,
                )
            )
            LOGGER.info(
                "%s ratio %g: image AUC %.4f, pixel AUC %.4f",
                index.category,
                ratio,
                outcome.image_auc,
                outcome.pixel_auc,
            )
        report = ExperimentReport(
            rows=tuple(rows),
            config_snapshot=self.config.to_dict(),
            timings=timings,
            warnings=tuple(warnings),
        )
        self.write_report(report)
        return report

    def write_report(self, report: ExperimentReport) -> None:
        metric_rows = [row.cells() for row in report.rows]
        write_csv(self.paths.metrics_csv, METRICS_HEADER, metric_rows)
        document = {
            "version": report.version,
            "metrics": [dict(zip(METRICS_HEADER, row)) for row in metric_rows],
            "timings": report.timings,
            "warnings": list(report.warnings),
            "config": report.config_snapshot,
        }
        self.paths.report_yaml.write_text(
            yaml.safe_dump(document, sort_keys=False), encoding="utf-8"
        )
        config_rows = [(key, str(value)) for key, value in _flatten(report.config_snapshot)]
        write_workbook(
            self.paths.report_xlsx,
            {
                "metrics": (METRICS_HEADER, metric_rows),
                "config": (("key", "value"), config_rows),
                "timings": (("stage", "seconds"), list(report.timings.items())),
            },
        )
        self._snapshot()

    def with_config(self, config: RunConfig) -> PipelineService:
        """Same run directory and workers under another configuration."""
        return PipelineService(config, self.paths.root, self._progress, self._workers)

    def _snapshot(self) -> None:
        dump_config(self.config, self.paths.snapshot)


def create_pipeline_service(
    config: RunConfig,
    out_dir: Path,
    progress: ProgressReporter = silent_progress,
    workers: int | None = None,
) -> PipelineService:
    """Factory validating the run directory before handing out a service."""
    out_dir = Path(out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise ValueError(f"Output path {out_dir} exists and is not a directory.")
    out_dir.mkdir(parents=True, exist_ok=True)
    return PipelineService(config, out_dir, progress, workers)


def replace_section(config: RunConfig, section: str, **changes: Any) -> RunConfig:
    """Copy of ``config`` with fields of one section changed."""
    return replace(config, **{section: replace(getattr(config, section), **changes)})
