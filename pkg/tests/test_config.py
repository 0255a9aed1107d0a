import numpy as np
import pytest

from app.backend.config.config import (
    DataPaths,
    EvalConfig,
    PostprocessConfig,
    SynthConfig,
    TrainConfig,
    describe_keys,
    load_config_file,
    parse_overrides,
    split_config,
)
from app.backend.exceptions import ConfigError, DataIOError


def test_defaults_follow_training_recipe():
    train = TrainConfig()
    assert (train.learning_rate, train.batch_size, train.dropout_p, train.d) == (1e-5, 8, 0.5, 100)
    post = PostprocessConfig()
    assert post.smooth_size == 3 and post.nms_iou == 0.4
    np.testing.assert_allclose(post.thresholds, np.linspace(0.01, 0.4, 40))
    assert EvalConfig().iou_thresholds == [0.1, 0.2, 0.3, 0.4, 0.5]


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nlearning_rate = 1e-3\n\nmodalities = audio, rgb  # reordered\nnms_iou = 0.5\n")
    raw = {**load_config_file(path), **parse_overrides(["max_steps=10"])}
    train, post = split_config(raw, TrainConfig, PostprocessConfig)
    assert train.learning_rate == 1e-3
    assert train.max_steps == 10
    assert train.modalities == ["rgb", "audio"]
    assert post.nms_iou == 0.5


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as err:
        split_config({"learning_rat": "1"}, TrainConfig)
    assert err.value.key == "learning_rat"
    assert err.value.exit_code == 2


@pytest.mark.parametrize("key,value", [
    ("batch_size", "0"),
    ("learning_rate", "-1"),
    ("modalities", ""),
    ("variant", "other"),
])
def test_invalid_train_values(key, value):
    with pytest.raises(ConfigError) as err:
        split_config({key: value}, TrainConfig)
    assert err.value.key == key


def test_postprocess_invariants():
    with pytest.raises(ConfigError):
        split_config({"smooth_size": "4"}, PostprocessConfig)
    with pytest.raises(ConfigError):
        split_config({"threshold_min": "0.5", "threshold_max": "0.4"}, PostprocessConfig)


def test_synth_silent_entries():
    cfg = SynthConfig(silent="audio:verb:1, rgb:noun:0")
    assert cfg.silent == ["audio:verb:1", "rgb:noun:0"]
    with pytest.raises(ValueError):
        SynthConfig(silent="audio:verb:99")
    with pytest.raises(ValueError):
        SynthConfig(silent="sound:verb:1")


def test_missing_config_file(tmp_path):
    with pytest.raises(DataIOError):
        load_config_file(tmp_path / "absent.cfg")


def test_malformed_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate 1e-3\n")
    with pytest.raises(ConfigError):
        load_config_file(path)


def test_describe_keys_lists_every_key_with_default():
    text = describe_keys(TrainConfig, DataPaths)
    for key in list(TrainConfig.model_fields) + list(DataPaths.model_fields):
        assert f"  {key} = " in text
    assert "learning_rate = 1e-05" in text
    assert "modalities = rgb,flow,audio" in text
