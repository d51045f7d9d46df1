"""Run configuration: flat dotted-key TOML files, named presets, and validation.

A config file is a list of ``section.key = value`` lines.  Either every field
is given, or a ``preset = "<name>"`` line (or ``--preset``) supplies the
defaults and the file overrides individual keys.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import Dataset, MixtureSpec, generate_mixture, read_idx, standardize
from .losses import DistillConfig
from .optim import Schedule
from .train import METHODS, SgdConfig


class ConfigError(ValueError):
    pass


# Hyperparameter tables keyed by teacher.  Values are (alpha, beta, gamma).
CIFAR_NO_SERIALIZATION = {
    "resnet56": (1.0, 2.0, 0.25), "resnet110": (1.0, 2.0, 0.25),
    "wrn-40-2": (1.0, 6.0, 0.5), "vgg13": (1.0, 6.0, 0.5),
    "resnet50": (1.0, 8.0, 0.5), "resnet32x4": (1.0, 8.0, 0.5),
}
CIFAR_SAME_ARCH = {
    "resnet56": (0.5, 1.0, 0.05), "resnet110": (0.5, 1.0, 0.05),
    "wrn-40-2": (0.5, 3.0, 0.1), "vgg13": (0.5, 3.0, 0.1),
    "resnet32x4": (0.5, 4.0, 0.1),
}
CIFAR_DIFF_ARCH = {
    "wrn-40-2": (0.5, 6.0, 0.1), "vgg13": (0.5, 6.0, 0.1),
    "resnet50": (0.5, 8.0, 0.1), "resnet32x4": (0.5, 8.0, 0.1),
}
IMAGENET = {
    "deit-tiny": (1.0, 1.0, 0.25), "resnet34": (1.0, 1.0, 0.25),
    "resnet50": (1.0, 2.0, 0.25), "swin-tiny": (1.0, 2.0, 0.25),
}

# Every key a resolved configuration carries, with its expected type.
FIELDS: dict[str, type] = {
    "data.source": str,
    "data.num_classes": int,
    "data.dim": int,
    "data.clusters_per_class": int,
    "data.cluster_std": float,
    "data.inter_class_margin": float,
    "data.train_size": int,
    "data.test_size": int,
    "data.latent_dim": int,
    "data.train_images": str,
    "data.train_labels": str,
    "data.test_images": str,
    "data.test_labels": str,
    "model.teacher_hidden": list,
    "model.student_hidden": list,
    "distill.alpha": float,
    "distill.beta": float,
    "distill.gamma": float,
    "distill.temperature": float,
    "distill.ce_weight": float,
    "distill.warmup_epochs": int,
    "distill.ablate_target_confidence_term": bool,
    "distill.serialization": str,
    "distill.head_width": int,
    "distill.head_nonlinear": bool,
    "schedule.total_epochs": int,
    "schedule.decay_start_epoch": float,
    "schedule.decay_period": float,
    "schedule.decay_factor": float,
    "optim.lr": float,
    "optim.momentum": float,
    "optim.weight_decay": float,
    "optim.batch_size": int,
    "seed.data": int,
    "seed.init": int,
    "seed.shuffle": int,
    "run.method": str,
    "run.out_dir": str,
    "run.teacher_checkpoint": str,
}

_DESK = {
    "data.source": "mixture",
    "data.num_classes": 20,
    "data.dim": 64,
    "data.clusters_per_class": 4,
    "data.cluster_std": 0.45,
    "data.inter_class_margin": 1.0,
    "data.train_size": 20000,
    "data.test_size": 4000,
    "data.latent_dim": 8,
    "data.train_images": "",
    "data.train_labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    "model.teacher_hidden": [256, 256],
    "model.student_hidden": [64],
    "distill.alpha": 1.0,
    "distill.beta": 1.0,
    "distill.gamma": 0.25,
    "distill.temperature": 1.0,
    "distill.ce_weight": 1.0,
    "distill.warmup_epochs": 5,
    "distill.ablate_target_confidence_term": False,
    "distill.serialization": "off",
    "distill.head_width": 0,
    "distill.head_nonlinear": False,
    "schedule.total_epochs": 60,
    "schedule.decay_start_epoch": 37.5,
    "schedule.decay_period": 7.5,
    "schedule.decay_factor": 0.1,
    "optim.lr": 0.02,
    "optim.momentum": 0.9,
    "optim.weight_decay": 5e-4,
    "optim.batch_size": 64,
    "seed.data": 1,
    "seed.init": 1,
    "seed.shuffle": 1,
    "run.method": "aekt",
    "run.out_dir": "runs/desk",
    "run.teacher_checkpoint": "",
}

_CIFAR_OPTIM = {
    "schedule.total_epochs": 240,
    "schedule.decay_start_epoch": 150.0,
    "schedule.decay_period": 30.0,
    "schedule.decay_factor": 0.1,
    "distill.warmup_epochs": 20,
    "distill.temperature": 4.0,
    "optim.lr": 0.05,
    "optim.weight_decay": 5e-4,
    "optim.batch_size": 64,
}


def _abg(table: dict, teacher: str) -> dict:
    a, b, g = table[teacher]
    return {"distill.alpha": a, "distill.beta": b, "distill.gamma": g}


PRESETS: dict[str, dict] = {
    "desk": _DESK,
    "paper-cifar-same": {**_DESK, **_CIFAR_OPTIM, **_abg(CIFAR_SAME_ARCH, "resnet32x4"),
                         "distill.serialization": "linear",
                         "run.out_dir": "runs/paper-cifar-same"},
    "paper-cifar-diff": {**_DESK, **_CIFAR_OPTIM, **_abg(CIFAR_DIFF_ARCH, "resnet32x4"),
                         "distill.serialization": "linear", "optim.lr": 0.01,
                         "run.out_dir": "runs/paper-cifar-diff"},
    "paper-cifar-noser": {**_DESK, **_CIFAR_OPTIM, **_abg(CIFAR_NO_SERIALIZATION, "resnet32x4"),
                          "run.out_dir": "runs/paper-cifar-noser"},
    "paper-imagenet": {**_DESK, **_abg(IMAGENET, "resnet34"),
                       "distill.temperature": 1.0, "distill.warmup_epochs": 0,
                       "schedule.total_epochs": 100, "schedule.decay_start_epoch": 30.0,
                       "schedule.decay_period": 30.0, "schedule.decay_factor": 0.1,
                       "optim.lr": 0.1, "optim.weight_decay": 1e-4, "optim.batch_size": 512,
                       "run.out_dir": "runs/paper-imagenet"},
}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    kind = FIELDS[key]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"{key}: expected a list of positive integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict
    preset: Optional[str] = None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def method(self) -> str:
        return self.values["run.method"]

    @property
    def num_classes(self) -> int:
        return self.values["data.num_classes"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run.out_dir"])

    def with_overrides(self, **flat) -> "RunConfig":
        vals = dict(self.values)
        for key, value in flat.items():
            key = key.replace("__", ".")
            if key not in FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = _coerce(key, value)
        return validate(vals, self.preset)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.with_overrides(**{"seed.data": seed, "seed.init": seed, "seed.shuffle": seed})

    # -- typed views ----------------------------------------------------------------

    def mixture_spec(self) -> MixtureSpec:
        v = self.values
        return MixtureSpec(v["data.num_classes"], v["data.dim"], v["data.clusters_per_class"],
                           v["data.cluster_std"], v["data.inter_class_margin"],
                           v["data.train_size"], v["data.test_size"], v["seed.data"],
                           v["data.latent_dim"])

    def distill_config(self) -> DistillConfig:
        v = self.values
        ser = v["distill.serialization"]
        return DistillConfig(alpha=v["distill.alpha"], beta=v["distill.beta"],
                             gamma=v["distill.gamma"], temperature=v["distill.temperature"],
                             ce_weight=v["distill.ce_weight"],
                             warmup_epochs=v["distill.warmup_epochs"],
                             ablate_target_confidence_term=v["distill.ablate_target_confidence_term"],
                             serialization=ser,
                             head_width=v["distill.head_width"] if ser == "two_layer" else None,
                             head_nonlinear=v["distill.head_nonlinear"])

    def schedule(self) -> Schedule:
        v = self.values
        return Schedule(v["schedule.total_epochs"], v["schedule.decay_start_epoch"],
                        v["schedule.decay_period"], v["schedule.decay_factor"],
                        v["distill.warmup_epochs"])

    def sgd(self) -> SgdConfig:
        v = self.values
        return SgdConfig(v["optim.lr"], v["optim.momentum"], v["optim.weight_decay"],
                         v["optim.batch_size"])

    def teacher_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.values["model.teacher_hidden"], self.num_classes]

    def student_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.values["model.student_hidden"], self.num_classes]

    def load_data(self) -> tuple[Dataset, Dataset]:
        """Train/test splits, standardized with train statistics."""
        v = self.values
        if v["data.source"] == "mixture":
            return standardize(*generate_mixture(self.mixture_spec()))
        C = self.num_classes
        train = read_idx(v["data.train_images"], v["data.train_labels"], C)
        test = read_idx(v["data.test_images"], v["data.test_labels"], C)
        return standardize(train, test)

    def to_toml(self) -> str:
        """Resolved snapshot; loading it back gives an equal config."""
        lines = ["# resolved run configuration"]
        if self.preset:
            lines.append(f"# derived from preset {self.preset}")
        section = None
        for key in FIELDS:
            head = key.split(".", 1)[0]
            if head != section:
                lines.append("")
                section = head
            lines.append(f"{key} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(str(x) for x in v) + "]"
    return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'


def validate(values: dict, preset: Optional[str] = None) -> RunConfig:
    for key in values:
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    for key in FIELDS:
        if key not in values:
            raise ConfigError(f"missing config field {key!r}")
    v = {k: _coerce(k, values[k]) for k in FIELDS}
    if v["data.source"] not in ("mixture", "idx"):
        raise ConfigError("data.source must be 'mixture' or 'idx'")
    if v["data.source"] == "idx":
        for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
            if not v[key]:
                raise ConfigError(f"missing config field {key!r} (needed for data.source = 'idx')")
    if v["run.method"] not in METHODS:
        raise ConfigError(f"run.method must be one of {METHODS}, got {v['run.method']!r}")
    if v["distill.serialization"] not in ("off", "linear", "two_layer"):
        raise ConfigError("distill.serialization must be 'off', 'linear' or 'two_layer'")
    if v["distill.serialization"] == "two_layer" and v["distill.head_width"] < 1:
        raise ConfigError("distill.head_width must be positive for a two_layer head")
    cfg = RunConfig(v, preset)
    # Build the typed views once so their own checks surface as config errors.
    try:
        if v["data.source"] == "mixture":
            cfg.mixture_spec()
        cfg.distill_config()
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if v["optim.lr"] <= 0 or v["optim.batch_size"] < 1:
        raise ConfigError("optim.lr must be positive and optim.batch_size at least 1")
    return cfg


def from_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return validate(dict(PRESETS[name]), name)


def load_config(path=None, preset: Optional[str] = None) -> RunConfig:
    """Read ``path`` on top of ``preset`` (or the file's own ``preset`` key).

    With neither a file nor a preset the desk preset is used.  A file without
    any preset must list every field.
    """
    if path is None:
        return from_preset(preset or "desk")
    try:
        with open(path, "rb") as fh:
            raw = flatten(tomllib.load(fh))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    file_preset = raw.pop("preset", None)
    name = preset or file_preset
    if name and name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = dict(PRESETS[name]) if name else {}
    for key in raw:
        if key not in FIELDS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
    base.update(raw)
    return validate(base, name)
