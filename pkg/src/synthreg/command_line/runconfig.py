"""
NAME
runconfig

DESCRIPTION
Configuration of a command line run. The packaged default.cfg is read first, then an optional user file and
then overrides of the form section.key=value. Sections and keys that are not in default.cfg are rejected.
The effective configuration is written next to the run output and builds the configuration objects of
regtools.

CLASSES
RunConfig
"""

import io
import logging
import configparser
from importlib import resources
from ..regtools.ptools import RunConfigError, atomic_write
from ..regtools.synth import PairConfig, DownstreamConfig
from ..regtools.deform import SsConfig
from ..regtools.network import ModelConfig
from ..regtools.train import TrainConfig
from . import config

logger = logging.getLogger(__name__)


def default_config_text() -> str:
    return resources.files(config).joinpath("default.cfg").read_text()


class RunConfig:
    """
    Sectioned run configuration.

    METHODS
    set             override one value, given as section.key=value or as separate arguments
    write           write the effective configuration
    as_dict         flat dict "section.key" -> value, for the run manifest
    pair_config, model_config, train_config, downstream_config     typed configuration objects
    """

    def __init__(self, path=None, overrides=()):
        self._parser = configparser.ConfigParser()
        self._parser.read_string(default_config_text())
        if path is not None:
            user = configparser.ConfigParser()
            try:
                with open(path) as infile:
                    user.read_file(infile)
            except configparser.Error as error:
                raise RunConfigError("Could not parse {}: {}".format(path, error)) from error
            for section in user.sections():
                for key, value in user.items(section, raw=True):
                    self.set(section, key, value)
        for override in overrides:
            self.set_assignment(override)

    def set_assignment(self, assignment: str):
        name, sep, value = assignment.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise RunConfigError("Expected section.key=value, got {!r}".format(assignment))
        self.set(section, key, value.strip())

    def set(self, section: str, key: str, value):
        if not self._parser.has_section(section):
            raise RunConfigError("Unknown configuration section [{}]".format(section))
        if not self._parser.has_option(section, key):
            raise RunConfigError("Unknown configuration key {}.{}".format(section, key))
        self._parser.set(section, key, str(value))

    def get(self, section, key):
        return self._parser.get(section, key)

    def _typed(self, getter, section, key):
        try:
            return getter(section, key)
        except ValueError as error:
            raise RunConfigError("Invalid value for {}.{}: {}".format(section, key, error)) from error

    def getint(self, section, key):
        return self._typed(self._parser.getint, section, key)

    def getfloat(self, section, key):
        return self._typed(self._parser.getfloat, section, key)

    def getboolean(self, section, key):
        return self._typed(self._parser.getboolean, section, key)

    def shape(self):
        try:
            values = [int(v) for v in self.get("synth", "shape").replace(",", " ").split()]
        except ValueError as error:
            raise RunConfigError("Invalid shape: {}".format(error)) from error
        if len(values) == 1:
            values = values * 3
        if len(values) != 3:
            raise RunConfigError("Expected one or three sizes for synth.shape, got {}".format(values))
        return tuple(values)

    def as_dict(self) -> dict:
        return {"{}.{}".format(section, key): value
                for section in self._parser.sections() for key, value in self._parser.items(section)}

    def write(self, path: str):
        buffer = io.StringIO()
        self._parser.write(buffer)
        atomic_write(path, buffer.getvalue())

    def _build(self, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as error:
            raise RunConfigError(str(error)) from error

    def pair_config(self) -> PairConfig:
        return self._build(PairConfig, shape=self.shape(), channels=self.getint("synth", "channels"),
                           svf_amplitude=self.getfloat("synth", "svf_amplitude"),
                           svf_frequency=self.getint("synth", "svf_frequency"),
                           ss_steps=self.getint("deform", "ss_steps"),
                           intensity_seed_policy=self.get("synth", "intensity_seed_policy"),
                           emit_labels=True,
                           label_frequency=self.getint("synth", "label_frequency"),
                           label_octaves=self.getint("synth", "label_octaves"))

    def ss_config(self) -> SsConfig:
        return self._build(SsConfig, steps=self.getint("deform", "ss_steps"))

    def model_config(self, mode="pretrain") -> ModelConfig:
        return self._build(ModelConfig, stages=self.getint("net", "stages"),
                           base_channels=self.getint("net", "base_channels"),
                           decoder_channels=self.getint("net", "decoder_channels"), mode=mode,
                           dtype=self.get("net", "dtype"), ss_steps=self.getint("deform", "ss_steps"),
                           seed=self.getint("run", "seed"))

    def train_config(self, phase="pretrain", output_dir=None) -> TrainConfig:
        lr_key = "pretrain_lr" if phase == "pretrain" else "finetune_lr"
        return self._build(TrainConfig, phase=phase, epochs=self.getint("train", "epochs"),
                           pairs_per_epoch=self.getint("train", "pairs_per_epoch"),
                           data_fraction=self.getfloat("train", "data_fraction"), seed=self.getint("run", "seed"),
                           similarity=self.get("losses", "similarity"), lam=self.getfloat("losses", "lam"),
                           eta=self.getfloat("losses", "eta"), lr=self.getfloat("train", lr_key),
                           ncc_window=self.getint("losses", "ncc_window"),
                           eval_every=self.getint("train", "eval_every"), output_dir=output_dir,
                           pretrain_source=self.get("train", "pretrain_source"),
                           random_flip=self.getboolean("train", "random_flip"),
                           prefetch=self.getint("train", "prefetch"))

    def downstream_config(self) -> DownstreamConfig:
        split = tuple(self.getint("downstream", key) for key in ("train", "val", "test"))
        return self._build(DownstreamConfig, shape=self.shape(), labels=self.getint("downstream", "labels"),
                           frequency=self.getint("downstream", "frequency"),
                           svf_frequency=self.getint("downstream", "frequency"),
                           svf_amplitude=self.getfloat("downstream", "svf_amplitude"),
                           ss_steps=self.getint("deform", "ss_steps"), noise=self.getfloat("downstream", "noise"),
                           split=split, seed=self.getint("downstream", "seed"))

    def describe(self):
        """Decisions that are not in the configuration file, recorded in the manifest."""
        return {"batch_size": 1, "validation": "every eval_every epochs on the validation subjects",
                "augmentation": "random flip" if self.getboolean("train", "random_flip") else "none"}
