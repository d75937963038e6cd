"""Declarative run configuration.

A run is described by one TOML file with [model], [trainer], [data],
and [output] sections. Unknown keys are rejected outright so a typo'd
hyperparameter fails the run instead of being silently ignored.
Individual keys can be overridden on the command line with
``--set section.key=value``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import Dataset, load_csv_dataset, load_idx_dataset, make_blob_split
from .layers import ModelConfig, config_hash
from .trainer import RunConfig, default_lr, default_weight_decay


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {"arch", "bits", "boundary_bits", "input_dim", "hidden", "classes",
               "input_shape", "conv_channels", "kernel", "conv_stride", "fc_hidden"}
_TRAINER_KEYS = {"epochs", "lr0", "momentum", "weight_decay", "batch_size", "seed",
                 "distill", "distill_weight", "temperature", "schedule",
                 "gscale", "gscale_mult"}
_DATA_KEYS = {"kind", "n_samples", "n_test", "n_features", "noise", "seed",
              "train_images", "train_labels", "test_images", "test_labels",
              "train_path", "test_path"}
_OUTPUT_KEYS = {"dir"}
_SECTIONS = {"model": _MODEL_KEYS, "trainer": _TRAINER_KEYS,
             "data": _DATA_KEYS, "output": _OUTPUT_KEYS}


@dataclass
class Config:
    model: ModelConfig
    trainer: RunConfig
    data: dict
    out_dir: str
    raw: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"bad override {text!r}; expected section.key=value")
    key, raw_value = text.split("=", 1)
    section, name = key.split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value  # bare string
    return section.strip(), name.strip(), value


def _check_keys(doc: dict) -> None:
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise ConfigError(
                f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _parse_bits(value) -> int | None:
    if value in (None, "fp", "full", 0):
        return None
    if isinstance(value, int):
        return value
    raise ConfigError(f"bits must be an integer or 'fp', got {value!r}")


def load_config(path, overrides: list[str] | None = None) -> Config:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    for ov in overrides or []:
        section, name, value = _parse_override(ov)
        doc.setdefault(section, {})[name] = value
    _check_keys(doc)

    m = dict(doc.get("model", {}))
    bits = _parse_bits(m.pop("bits", None))
    for key in ("hidden", "input_shape", "conv_channels"):
        if key in m:
            m[key] = tuple(m[key])
    try:
        model = ModelConfig(bits=bits, **m)
        model.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[model]: {e}") from e

    t = dict(doc.get("trainer", {}))
    t.setdefault("lr0", default_lr(bits))
    t.setdefault("weight_decay", default_weight_decay(bits))
    if bits == 8:
        t.setdefault("epochs", 1)  # 8-bit fine-tunes briefly by default
    try:
        trainer = RunConfig(bits=bits, **t)
        trainer.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[trainer]: {e}") from e

    data = dict(doc.get("data", {}))
    data.setdefault("kind", "blobs")
    if data["kind"] not in ("blobs", "idx", "csv"):
        raise ConfigError(f"[data]: unknown kind {data['kind']!r}")

    out_dir = doc.get("output", {}).get("dir", "out/run")
    root = os.environ.get("LSQ_OUT")
    if root:
        out_dir = os.path.join(root, out_dir)

    raw = json.loads(json.dumps(doc))  # normalized copy for hashing
    return Config(model=model, trainer=trainer, data=data,
                  out_dir=out_dir, raw=raw)


def build_datasets(cfg: Config) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) datasets from the [data] section."""
    d = cfg.data
    kind = d["kind"]
    if kind == "blobs":
        model = cfg.model
        if model.arch == "cnn":
            shape = model.input_shape
            n_features = int(shape[0] * shape[1] * shape[2])
        else:
            shape = None
            n_features = model.input_dim
        n_features = d.get("n_features", n_features)
        return make_blob_split(d.get("n_samples", 4000), d.get("n_test", 1000),
                               n_features, model.classes, d.get("noise", 0.8),
                               seed=d.get("seed", 7), image_shape=shape)
    if kind == "idx":
        flatten = cfg.model.arch == "mlp"
        try:
            train = load_idx_dataset(d["train_images"], d["train_labels"], flatten)
            test = load_idx_dataset(d["test_images"], d["test_labels"], flatten)
        except KeyError as e:
            raise ConfigError(f"[data]: missing required key {e}") from e
        return train, test
    try:
        return load_csv_dataset(d["train_path"]), load_csv_dataset(d["test_path"])
    except KeyError as e:
        raise ConfigError(f"[data]: missing required key {e}") from e
