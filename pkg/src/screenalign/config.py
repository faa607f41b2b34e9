"""Run configuration files.

Plain text, one `key = value` per line. `#` starts a comment. Dotted keys
nest (`train.image.layers = 2`); each CLI command reads its own top-level
section (`synth.`, `train.`, `eval.`). Values parse as int, float, bool
(true/false), comma lists, or strings, in that order of preference.

Example:

    # desk-scale screen
    synth.n_perturbations = 64
    synth.seed = 7
    train.epochs = 50
    train.loss = total
    train.image.layers = 2
    eval.n_perms = 10000
"""

from __future__ import annotations

import dataclasses

from .image_encoder import EncoderConfig
from .synth import SynthConfig
from .training import TrainConfig


def parse_value(text):
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",")]
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text):
    tree = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"line {lineno}: key {key!r} clashes with a value")
        node[parts[-1]] = parse_value(value)
    return tree


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def section(config, name):
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must hold nested keys")
    return value


def _from_fields(cls, values, context):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown {context} keys: {', '.join(unknown)}")
    return cls(**values)


def train_config_from(values):
    values = dict(values)
    image = values.pop("image", {})
    if image:
        values["image"] = _from_fields(EncoderConfig, image, "train.image")
    return _from_fields(TrainConfig, values, "train")


def synth_config_from(values):
    return _from_fields(SynthConfig, dict(values), "synth")
