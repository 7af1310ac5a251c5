import os
import pytest
from synthreg.command_line.runconfig import RunConfig
from synthreg.regtools.ptools import RunConfigError


def test_default_configuration_should_give_desk_scale_settings():
    config = RunConfig()
    assert config.shape() == (32, 32, 32)
    assert config.pair_config().channels == 16
    assert config.model_config().stages == 4
    assert config.train_config("pretrain").learning_rate == 4e-4
    assert config.train_config("finetune").learning_rate == 1e-4
    assert config.downstream_config().split == (64, 16, 16)
    assert config.ss_config().steps == 7


def test_overrides_should_change_values_and_build_typed_configurations():
    config = RunConfig(overrides=["synth.shape=16 8 24", "net.stages=2", "run.seed=9"])
    assert config.shape() == (16, 8, 24)
    model_cfg = config.model_config("backbone")
    assert model_cfg.mode == "backbone" and model_cfg.stages == 2 and model_cfg.seed == 9


def test_unknown_keys_and_malformed_values_should_raise_a_config_error():
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["synth.bogus=1"])
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["nosection.key=1"])
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["synth.shape"])
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["synth.channels=many"]).pair_config()
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["synth.shape=4 4"]).shape()
    with pytest.raises(RunConfigError):
        RunConfig(overrides=["synth.channels=1"]).pair_config()


def test_user_file_should_override_defaults_and_reject_unknown_sections(tmp_path):
    path = os.path.join(tmp_path, "user.cfg")
    with open(path, "w") as outfile:
        outfile.write("[losses]\nlam = 0.5\n")
    assert RunConfig(path).train_config().lam == 0.5
    with open(path, "w") as outfile:
        outfile.write("[extras]\nanswer = 42\n")
    with pytest.raises(RunConfigError):
        RunConfig(path)


def test_written_configuration_should_read_back_identically(tmp_path):
    config = RunConfig(overrides=["train.epochs=5"])
    path = os.path.join(tmp_path, "effective.cfg")
    config.write(path)
    assert RunConfig(path).as_dict() == config.as_dict()
    assert config.as_dict()["train.epochs"] == "5"
