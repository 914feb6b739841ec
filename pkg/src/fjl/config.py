"""Experiment configuration: one INI-style text file, flat ``section.key`` schema.

Every key has a default; unknown sections or keys are rejected. Values are
parsed according to the type of their default. Tuples are comma separated.

Sections and the objects they build:

========== ===========================================================
run        seed, out_dir, test_fraction
datagen    :class:`fjl.datagen.DatagenConfig`
model      :class:`fjl.model.ModelConfig`
federation :class:`fjl.federation.FederationConfig` (minus nested configs)
relational :class:`fjl.objectives.RelationalConfig`
pck        :class:`fjl.objectives.PckConfig`
train      epochs used by ``train --mode central``
ablation   reduced budget for the 4 x 2 grid
eval       thresholds, max_windows
========== ===========================================================
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .datagen import DatagenConfig
from .federation.core import FederationConfig
from .model import ModelConfig
from .objectives import PckConfig, RelationalConfig


class ConfigKeyError(ValueError):
    """Invalid key or value; the message names the offending ``section.key``."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out_dir: str = "runs"
    test_fraction: float = 0.2


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30  # central mode: one round per epoch


@dataclass(frozen=True)
class AblationSettings:
    rounds: int = 6
    local_epochs: int = 1
    samples_per_epoch: int = 3200
    eval_windows: int = 0
    beta: float = 0.001


@dataclass(frozen=True)
class EvalSettings:
    thresholds: tuple = (0.05, 0.1, 0.2)
    max_windows: int = 0


_FED_SKIP = ("relational", "pck")

SECTIONS = {
    "run": RunSettings,
    "datagen": DatagenConfig,
    "model": ModelConfig,
    "federation": FederationConfig,
    "relational": RelationalConfig,
    "pck": PckConfig,
    "train": TrainSettings,
    "ablation": AblationSettings,
    "eval": EvalSettings,
}


def _keys(section):
    cls = SECTIONS[section]
    return {f.name: f for f in fields(cls) if not (section == "federation" and f.name in _FED_SKIP)}


def _key_name(section, name):
    # ``lambda`` is a keyword in Python; the config spells it plainly
    return "lambda" if (section, name) == ("federation", "lambda_") else name


def _field_name(section, key):
    return "lambda_" if (section, key) == ("federation", "lambda") else key


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _parse(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        return text
    except ValueError as exc:
        raise ConfigKeyError(key, str(exc)) from None


def _culprit(obj, section, changes):
    """The first key whose change alone makes the section invalid."""
    for name, value in changes.items():
        try:
            dataclasses.replace(obj, **{name: value})
        except (ValueError, TypeError):
            return f"{section}.{_key_name(section, name)}"
    return section


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSettings = field(default_factory=RunSettings)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    relational: RelationalConfig = field(default_factory=RelationalConfig)
    pck: PckConfig = field(default_factory=PckConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        # the federation config carries the objective settings it trains with
        fed = self.federation
        if fed.relational != self.relational or fed.pck != self.pck:
            object.__setattr__(
                self, "federation", fed.replace(relational=self.relational, pck=self.pck)
            )
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigKeyError("model", str(exc)) from None
        if self.model.window_p != self.datagen.window_p:
            raise ConfigKeyError(
                "model.window_p",
                f"must equal datagen.window_p ({self.datagen.window_p})",
            )
        if not 0 < self.run.test_fraction < 1:
            raise ConfigKeyError("run.test_fraction", "must be in (0, 1)")

    @property
    def seed(self):
        return self.run.seed

    def flat(self):
        """``{"section.key": value}`` for every key."""
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for name in _keys(section):
                out[f"{section}.{_key_name(section, name)}"] = getattr(obj, name)
        return out

    def with_overrides(self, overrides):
        """Apply ``{"section.key": value}``; string values are parsed."""
        values = {s: {} for s in SECTIONS}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in SECTIONS:
                raise ConfigKeyError(dotted, "unknown section")
            f = _keys(section).get(_field_name(section, key))
            if f is None:
                raise ConfigKeyError(dotted, "unknown key")
            if isinstance(value, str):
                value = _parse(dotted, value, _default(f))
            values[section][f.name] = value
        parts = {}
        for section, changes in values.items():
            obj = getattr(self, section)
            if not changes:
                parts[section] = obj
                continue
            try:
                parts[section] = dataclasses.replace(obj, **changes)
            except (ValueError, TypeError) as exc:
                raise ConfigKeyError(_culprit(obj, section, changes), str(exc)) from None
        return ExperimentConfig(**parts)

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            cp[section] = {}
            obj = getattr(self, section)
            for name in _keys(section):
                cp[section][_key_name(section, name)] = _format(getattr(obj, name))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def parse_config(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigKeyError("config", str(exc).splitlines()[0]) from None
    overrides = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigKeyError(section, "unknown section")
        for key, value in cp[section].items():
            overrides[f"{section}.{key}"] = value
    return ExperimentConfig().with_overrides(overrides)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
