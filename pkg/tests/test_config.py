import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from animotion.config import (ConfigError, Config, apply_overrides, config_from_dict, desk_config,
                              dump_config, load_config, paper_config, profile_config)


@pytest.mark.parametrize("make", [paper_config, desk_config])
def test_dump_load_dump_is_byte_identical(make):
    text = dump_config(make())
    assert dump_config(load_config(text)) == text
    assert load_config(text) == make()


def test_paper_config_lists_every_training_hyperparameter_by_name():
    data = yaml.safe_load(dump_config(paper_config()))
    assert data["schema_version"] == 1 and data["profile"] == "paper"
    assert data["train"]["batch_size"] == 20
    assert data["train"]["learning_rate"] == 0.0002
    assert data["train"]["epochs"] == 50
    assert data["loss_weights"] == {"eq": 10.0, "key": 100.0, "rec_l1": 10.0, "rec_perc": 10.0,
                                    "gan_g": 1.0, "gan_d": 1.0, "feat": 10.0}
    assert data["model"]["detector"]["num_kp"] == 10 and data["model"]["detector"]["num_sup"] == 2


def test_desk_profile_reductions():
    c = desk_config()
    assert c.model.resolution == 64 and c.model.num_channels == 1
    assert c.train.batch_size == 8 and c.train.epochs == 10
    assert (c.model.detector.num_kp, c.model.detector.num_sup) == (10, 2)
    assert c.loss_weights == paper_config().loss_weights


@pytest.mark.parametrize("overrides, fragment", [
    ({"train": {"epochz": 3}}, "train.epochz"),
    ({"model": {"detector": {"num_keypoints": 3}}}, "model.detector.num_keypoints"),
    ({"bogus": 1}, "bogus"),
])
def test_unknown_keys_are_rejected(overrides, fragment):
    with pytest.raises(ConfigError, match=fragment):
        apply_overrides(paper_config(), overrides)


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(paper_config(), {"loss_weights": {"key": -1}})
    with pytest.raises(ConfigError):
        config_from_dict({"profile": "laptop"})
    with pytest.raises(ConfigError):
        config_from_dict({"schema_version": 99})
    with pytest.raises(ConfigError):
        apply_overrides(paper_config(), {"train": 5})


def test_file_values_fall_back_to_profile(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("profile: desk\ntrain:\n  epochs: 3\n")
    c = load_config(path)
    assert c.train.epochs == 3 and c.train.batch_size == desk_config().train.batch_size
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_config("train: [unclosed\n")


def test_profile_lookup():
    assert profile_config("paper") == Config()
    with pytest.raises(ConfigError):
        profile_config("cloud")


@settings(max_examples=30, deadline=None)
@given(epochs=st.integers(0, 1000), lr=st.floats(1e-6, 1.0), kp=st.integers(1, 32),
       weight=st.floats(0, 1000))
def test_overridden_configs_round_trip(epochs, lr, kp, weight):
    c = apply_overrides(desk_config(), {"train": {"epochs": epochs, "learning_rate": lr},
                                        "model": {"detector": {"num_kp": kp}},
                                        "loss_weights": {"feat": weight}})
    text = dump_config(c)
    assert load_config(text) == c and dump_config(load_config(text)) == text
