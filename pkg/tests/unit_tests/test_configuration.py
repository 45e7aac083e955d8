import math

import pytest

from spssot.configuration import (
    Configuration,
    LossWeights,
    PreprocessConfiguration,
    SyntheticSpec,
    TrainConfiguration,
    read_config_file,
)
from spssot.errors import ConfigurationError


def test_configuration_from_none() -> None:
    Configuration.from_runnable_config({"configurable": {"user_id": "foo"}})


def test_defaults_match_published_settings() -> None:
    config = TrainConfiguration()
    assert config.loss_weights() == LossWeights(alpha=0.05, theta_s=1.0, beta=0.15, lam=0.5)
    assert config.iterations == 1000
    assert config.batch_size == 128
    assert config.learning_rate == 0.001
    assert config.hardness().n_members == 5
    assert config.parse_generator_dims() == [256, 128]


def test_from_runnable_config_coerces_strings() -> None:
    config = TrainConfiguration.from_runnable_config(
        {"configurable": {"iterations": "12", "alpha": "0.5", "debug": "true", "thread_id": "x"}}
    )
    assert config.iterations == 12
    assert config.alpha == 0.5
    assert config.debug is True


def test_from_file_reads_keys_and_synthetic_aliases(tmp_path) -> None:
    path = tmp_path / "run.conf"
    path.write_text(
        "# comment\nmethods=spssot,target_only\nseeds=0,1\niterations=20\nrotation_degrees=45\nn_src=100\n"
    )
    config = Configuration.from_file(path, iterations=7)
    assert config.parse_methods() == ["spssot", "target_only"]
    assert config.parse_seeds() == [0, 1]
    assert config.iterations == 7

    spec = SyntheticSpec.from_mapping(read_config_file(path))
    assert spec.n_source == 100
    assert spec.shift_rotation_angle == pytest.approx(math.pi / 4)


def test_unknown_key_names_the_key(tmp_path) -> None:
    path = tmp_path / "bad.conf"
    path.write_text("iterations=10\nlearning_speed=3\n")
    with pytest.raises(ConfigurationError) as info:
        Configuration.from_file(path)
    assert info.value.key == "learning_speed"


def test_uncoercible_value_names_the_key() -> None:
    with pytest.raises(ConfigurationError) as info:
        Configuration.from_mapping({"iterations": "many"})
    assert info.value.key == "iterations"


@pytest.mark.parametrize(
    "overrides",
    [
        {"batch_size": 7},
        {"alpha": -1.0},
        {"solver": "simplex"},
        {"n_bins": 0},
        {"hardness_kind": "hinge"},
        {"labeled_fraction": 0.9},
        {"seeds": ""},
    ],
)
def test_invalid_values_are_rejected(overrides) -> None:
    with pytest.raises(ConfigurationError):
        Configuration(**overrides)


def test_grid_values_become_method_variants() -> None:
    config = Configuration(methods="spssot", grid_alpha="0.1,0.2", grid_lambda="0")
    assert config.parse_methods() == [
        "spssot",
        "spssot[alpha=0.1]",
        "spssot[alpha=0.2]",
        "spssot[lam=0]",
    ]


def test_label_fraction_sweep_overrides_single_fraction() -> None:
    assert Configuration().parse_label_fractions() == [0.01]
    config = Configuration(label_fractions="0.005,0.01,0.02")
    assert config.parse_label_fractions() == [0.005, 0.01, 0.02]


def test_config_hash_is_stable_and_sensitive() -> None:
    a = TrainConfiguration(seed=1)
    assert a.config_hash() == TrainConfiguration(seed=1).config_hash()
    assert a.config_hash() != a.with_overrides(beta=0.0).config_hash()


def test_scalar_translation_has_the_given_norm() -> None:
    spec = SyntheticSpec(feature_dim=4, shift_translation="2.0")
    vector = spec.translation_vector()
    assert vector == pytest.approx([1.0, 1.0, 1.0, 1.0])
    assert math.sqrt(sum(v * v for v in vector)) == pytest.approx(2.0)


def test_translation_vector_length_must_match() -> None:
    with pytest.raises(ConfigurationError):
        SyntheticSpec(feature_dim=3, shift_translation="1,2")


def test_preprocess_configuration_lists() -> None:
    config = PreprocessConfiguration(indicator_names="HR, Temp", demographic_names="Age")
    assert config.parse_indicator_names() == ["HR", "Temp"]
    assert config.parse_demographic_names() == ["Age"]
    assert PreprocessConfiguration().parse_indicator_names() is None
