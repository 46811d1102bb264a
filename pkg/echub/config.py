"""config - settings documents and command line overrides

A settings file is one JSON object with up to three sections:

    {"train":      {... TrainConfig fields ...},
     "generator":  {... GeneratorSpec fields ...},
     "preprocess": {... PreprocessConfig fields ...}}

Overrides from the command line look like "train.epochs=40"; a key
without a section goes to "train". Values are parsed as JSON when
they can be, otherwise kept as strings.
"""

import dataclasses
import json
import os

from echub.errors import ConfigError
from echub.preprocessing import PreprocessConfig
from echub.synthetic import GeneratorSpec
from echub.training import TrainConfig

OUTPUT_DIR_ENV = "ECHUB_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"


def _preprocess_from_dict(data):
    known = set(f.name for f in dataclasses.fields(PreprocessConfig))
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("unknown preprocess keys: %s" % ", ".join(unknown), stage=unknown[0])
    data = dict(data)
    if "band" in data:
        data["band"] = tuple(data["band"])
    if data.get("alignment", "riemann") not in ("riemann", "euclid", "none"):
        raise ConfigError("alignment must be riemann, euclid or none", stage="alignment")
    return PreprocessConfig(**data)


SECTIONS = {"train": TrainConfig.from_dict,
            "generator": GeneratorSpec.from_dict,
            "preprocess": _preprocess_from_dict}


@dataclasses.dataclass(frozen=True)
class Settings:
    train: TrainConfig
    generator: GeneratorSpec
    preprocess: PreprocessConfig

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def parse_override(text):
    """'section.key=value' -> (section, key, value)"""
    if "=" not in text:
        raise ConfigError("override %r is not of the form key=value" % text, stage=text)
    key, raw = text.split("=", 1)
    key = key.strip()
    section, _, name = key.rpartition(".")
    section = section or "train"
    if section not in SECTIONS:
        raise ConfigError("unknown settings section %r" % section, stage=key)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return section, name, value


def read_document(path):
    try:
        with open(path) as f:
            document = json.load(f)
    except IOError as e:
        raise ConfigError("cannot read settings file %s: %s" % (path, e), stage="file")
    except ValueError as e:
        raise ConfigError("%s is not valid JSON: %s" % (path, e), stage="file")
    if not isinstance(document, dict):
        raise ConfigError("%s must hold a JSON object" % path, stage="file")
    unknown = sorted(set(document) - set(SECTIONS))
    if unknown:
        raise ConfigError("unknown settings section(s): %s" % ", ".join(unknown),
                          stage=unknown[0])
    return document


def load_settings(path=None, overrides=()):
    """Settings from an optional file with the overrides applied on top"""
    document = read_document(path) if path else {}
    sections = {name: dict(document.get(name) or {}) for name in SECTIONS}
    for text in overrides:
        section, key, value = parse_override(text)
        sections[section][key] = value
    return Settings(**{name: SECTIONS[name](values) for name, values in sections.items()})


def output_dir(requested=None):
    """-o wins, then $ECHUB_OUTPUT_DIR, then ./runs"""
    return requested or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
