"""Per-epoch streams of positive samples grouped with their negatives."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

from cutswap.augment.cutswap import AugmentConfig, LevelSweep, cutswap_all_levels
from cutswap.models import ImageArray, SaliencyStack
from cutswap.utils.parallel import ordered_map
from cutswap.utils.seeding import derive_seed

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingGroup:
    """One positive sample, every negative derived from it and the levels it skipped."""

    positive: ImageArray
    negatives: tuple[tuple[ImageArray, int], ...]
    source: str = ""
    warnings: tuple[str, ...] = ()

    @classmethod
    def from_sweep(cls, sweep: LevelSweep, source: str) -> TrainingGroup:
        return cls(
            positive=sweep.positive,
            negatives=tuple((pair.negative, pair.label) for pair in sweep.pairs),
            source=source,
            warnings=sweep.warnings,
        )


class PairSource(Protocol):
    """Strategy interface feeding the trainer one list of groups per epoch."""

    def __len__(self) -> int:
        ...

    def groups(self, epoch: int) -> list[TrainingGroup]:
        """Return the groups of ``epoch`` in a deterministic order."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class StaticPairSource:
    """Replays the same groups every epoch."""

    fixed: tuple[TrainingGroup, ...]

    def __len__(self) -> int:
        return len(self.fixed)

    def groups(self, epoch: int) -> list[TrainingGroup]:
        del epoch
        return list(self.fixed)


@dataclass(frozen=True, eq=False)
class CutSwapPairSource:
    """Regenerates CutSwap (and optionally scar) negatives for every epoch.

    Image ``i`` of epoch ``e`` is augmented with the seed derived from
    ``(seed, e, i)``; groups are assembled on worker threads but returned
    by position, so the stream is identical for any worker count.
    """

    images: tuple[ImageArray, ...]
    stacks: tuple[SaliencyStack, ...]
    cfg: AugmentConfig
    seed: int
    stems: tuple[str, ...] = ()
    include_scar: bool = False
    workers: int | None = None

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError("A pair source needs at least one training image.")
        if len(self.images) != len(self.stacks):
            raise ValueError("Exactly one saliency stack is required per training image.")
        if self.stems and len(self.stems) != len(self.images):
            raise ValueError("stems must name every training image.")

    def __len__(self) -> int:
        return len(self.images)

    def image_seed(self, epoch: int, index: int) -> int:
        return derive_seed(self.seed, "epoch", epoch, "image", index)

    def _build(self, epoch: int, index: int) -> TrainingGroup:
        normal = self.images[index]
        rng_seed = self.image_seed(epoch, index)
        sweep = cutswap_all_levels(
            normal,
            self.stacks[index],
            self.cfg.k,
            rng_seed,
            self.cfg,
            include_scar=self.include_scar,
        )
        return TrainingGroup.from_sweep(sweep, self.stems[index] if self.stems else str(index))

    def groups(self, epoch: int) -> list[TrainingGroup]:
        built = ordered_map(
            lambda index: self._build(epoch, index), range(len(self.images)), self.workers
        )
        empty = sum(1 for group in built if not group.negatives)
        if empty:
            LOGGER.warning("Epoch %d: %d image(s) produced no negatives", epoch, empty)
        return built
