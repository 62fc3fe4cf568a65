import pytest

from cutswap.config import (
    RunConfig,
    config_from_dict,
    dump_config,
    load_config,
    parse_override,
)
from cutswap.services.exceptions import ConfigError
from cutswap.utils.seeding import derive_seed


def test_defaults_without_a_file() -> None:
    config = load_config()

    assert config == RunConfig()
    assert config.seed == 0
    assert config.augment.k == 4
    assert config.saliency.indices == (4, 9, 16, 23, 30)
    assert config.bank.grid == (8, 8)
    assert config.eval.coreset_ratios == (0.01, 0.001)


def test_overrides_are_parsed_as_yaml() -> None:
    config = load_config(overrides=["train.epochs=8", "bank.grid=[4, 4]", "seed=7"])

    assert config.train.epochs == 8
    assert config.bank.grid == (4, 4)
    assert config.seed == 7


def test_seed_argument_wins_over_overrides() -> None:
    assert load_config(overrides=["seed=7"], seed=3).seed == 3


def test_yaml_file_then_overrides(tmp_path) -> None:
    path = tmp_path / "run.yaml"
    path.write_text("seed: 5\ntrain:\n  epochs: 3\n  learning_rate: 0.1\n", encoding="utf-8")

    config = load_config(path, overrides=["train.epochs=4"])

    assert config.seed == 5
    assert config.train.epochs == 4
    assert config.train.learning_rate == 0.1


def test_empty_section_keeps_defaults(tmp_path) -> None:
    path = tmp_path / "run.yaml"
    path.write_text("train:\n", encoding="utf-8")

    assert load_config(path).train == RunConfig().train


@pytest.mark.parametrize(
    "override",
    [
        "train.bogus=1",
        "bogus.key=1",
        "train.epochs",
        "a.b.c=1",
        "epochs=3",
        "train.epochs=0",
        "train.epochs=abc",
        "augment.k=0",
        "score.split=valid",
        "ablation.level_combos=[[31]]",
        "seed=-1",
        "data.image_size=32",
        "augment.scar_width_range=[2, 12]",
    ],
)
def test_invalid_overrides_are_config_errors(override) -> None:
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_tiles_must_stay_encodable() -> None:
    assert load_config(overrides=["data.image_size=64"]).bank.grid == (8, 8)
    assert load_config(overrides=["data.image_size=32", "bank.grid=[4, 4]"]).data.image_size == 32

    with pytest.raises(ConfigError, match="8px"):
        load_config(overrides=["data.image_size=56"])


def test_missing_file_is_a_config_error(tmp_path) -> None:
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_non_mapping_document_is_rejected(tmp_path) -> None:
    path = tmp_path / "run.yaml"
    path.write_text("- just\n- a list\n", encoding="utf-8")

    with pytest.raises(ConfigError):
        load_config(path)


def test_parse_override_splits_path_and_value() -> None:
    assert parse_override("eval.coreset_ratios=[1.0, 0.5]") == (
        ["eval", "coreset_ratios"],
        [1.0, 0.5],
    )


def test_snapshot_replays_the_resolved_run(tmp_path) -> None:
    config = load_config(overrides=["train.epochs=2", "augment.seed=99"], seed=4)
    snapshot = tmp_path / "config.snapshot.yaml"

    dump_config(config, snapshot)

    assert load_config(snapshot) == config.resolved()


def test_stage_seeds_are_explicit_or_derived() -> None:
    config = config_from_dict({"seed": 3, "train": {"seed": 11}})

    assert config.stage_seed("train") == 11
    assert config.stage_seed("augment") == derive_seed(3, "augment")
    assert config.stage_seed("augment") != config.stage_seed("bank")


def test_resolved_config_pins_every_stage_seed() -> None:
    resolved = RunConfig(seed=2).resolved()

    assert resolved.synth.seed == derive_seed(2, "synth")
    assert resolved.train.seed == derive_seed(2, "train")
    assert resolved.resolved() == resolved


def test_with_root_seed_drops_explicit_stage_seeds() -> None:
    config = config_from_dict({"seed": 1, "bank": {"seed": 8}})

    moved = config.with_root_seed(6)

    assert moved.seed == 6
    assert moved.bank.seed is None
    assert moved.stage_seed("bank") == derive_seed(6, "bank")


def test_ablation_arms_per_axis() -> None:
    ablation = RunConfig().ablation

    assert ablation.arms("k") == (1, 2, 3, 4, 5, 6)
    assert ablation.arms("cluster_choice") == ("random", "min", "max")
    assert (4, 9, 16, 23, 30) in ablation.arms("level_combo")
    with pytest.raises(ConfigError):
        ablation.arms("colour")
