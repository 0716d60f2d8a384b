"""Flat text configuration: ``section.key=value`` lines.

Three sections map onto the three config dataclasses: ``model.*`` →
:class:`cvvt.model.ModelConfig`, ``train.*`` → :class:`cvvt.train.TrainConfig`,
``data.*`` → :class:`DataConfig`.  Resolution order is dataclass defaults,
then the config file, then ``--set`` overrides; unknown keys are hard
errors so typos cannot silently fall back to defaults.  The resolved
config can be rendered back to text (:func:`config_to_text`) and
re-parsed to the identical result, which is how runs echo their exact
settings into the output directory.
"""

import dataclasses
from dataclasses import dataclass

from .data import SynthTaskSpec
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(Exception):
    """Invalid configuration text, key, or value."""


@dataclass(frozen=True)
class DataConfig:
    """Synthetic-task geometry plus dataset sizing and optional manifests.

    When a manifest path is set, that split is read from disk instead of
    being generated; the remaining fields still describe the expected
    clip geometry.
    """
    num_classes: int = 4
    frames: int = 8
    height: int = 64
    width: int = 64
    blob_radius: float = 6.0
    speed: float = 2.0
    noise_std: float = 0.05
    distractors: int = 3
    train_clips: int = 400
    test_clips: int = 100
    train_manifest: str = ""
    test_manifest: str = ""

    def __post_init__(self):
        if self.train_clips < 1 or self.test_clips < 0:
            raise ValueError("train_clips must be >= 1 and test_clips >= 0")

    def task_spec(self):
        return SynthTaskSpec(num_classes=self.num_classes,
                             frames=self.frames, height=self.height,
                             width=self.width, blob_radius=self.blob_radius,
                             speed=self.speed, noise_std=self.noise_std,
                             distractors=self.distractors)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig


def _parse_value(text, field, key):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        # remaining config fields are integer tuples like "64,128"
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text, source="config"):
    """Parse ``section.key=value`` lines into a flat dict of strings."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected key=value, "
                              f"got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise ConfigError(f"{source} line {lineno}: duplicate key "
                              f"{key!r}")
        entries[key] = value.strip()
    return entries


def parse_overrides(pairs):
    """Parse repeatable ``--set key=value`` arguments."""
    entries = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set {pair!r}: expected key=value")
        key, value = pair.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _known_fields():
    table = {}
    for section, cls in SECTIONS.items():
        for field in dataclasses.fields(cls):
            table[f"{section}.{field.name}"] = (section, field)
    return table


def resolve_config(file_text=None, overrides=(), model_defaults=None):
    """Build a :class:`RunConfig` from defaults, file text, and overrides.

    ``model_defaults`` substitutes a different base ModelConfig (the
    gradient-check command starts from a micro model, for example).
    ``model.num_classes`` follows ``data.num_classes`` unless explicitly
    set, in which case the two must agree.
    """
    table = _known_fields()
    merged = {}
    if file_text is not None:
        merged.update(parse_config_text(file_text))
    merged.update(parse_overrides(list(overrides)))

    values = {section: {} for section in SECTIONS}
    for key, text in merged.items():
        if key not in table:
            known = ", ".join(sorted(table))
            raise ConfigError(f"unknown config key {key!r}; known keys: "
                              f"{known}")
        section, field = table[key]
        values[section][field.name] = _parse_value(text, field, key)

    try:
        base_model = model_defaults if model_defaults is not None \
            else ModelConfig()
        model = dataclasses.replace(base_model, **values["model"])
        train = TrainConfig(**values["train"])
        data = DataConfig(**values["data"])
        if "num_classes" not in values["model"]:
            model = dataclasses.replace(model,
                                        num_classes=data.num_classes)
        elif model.num_classes != data.num_classes:
            raise ConfigError(
                f"model.num_classes={model.num_classes} does not match "
                f"data.num_classes={data.num_classes}")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, train=train, data=data)


def config_to_text(run):
    """Render a RunConfig to sorted ``key=value`` lines.

    Parsing the result with :func:`resolve_config` reproduces ``run``
    exactly.
    """
    lines = []
    for section in SECTIONS:
        obj = getattr(run, section)
        for field in dataclasses.fields(type(obj)):
            lines.append(f"{section}.{field.name}="
                         f"{_format_value(getattr(obj, field.name))}")
    return "\n".join(sorted(lines)) + "\n"
