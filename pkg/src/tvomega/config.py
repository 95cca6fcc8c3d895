"""Experiment configuration as sectioned key-value text.

Every section maps onto one dataclass; values are parsed according to the
field annotation. ``None`` is written as ``none``, tuples as comma lists
and floats with ``repr`` so a config survives a write/read cycle exactly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields, replace

from .drift import DriftSchedule, ScheduleError
from .rl import RLConfig
from .trainers import PROTOCOLS, ModelConfig, OmegaConfig, _parse_protocol


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seeds: tuple = (0, 1, 2)
    protocols: tuple = ("everything", "recent", "finetune", "omega_weighted", "beta_weighted")
    out: str = "runs/default"
    test_size: int = 2000
    start: int = 1
    stop: int | None = None
    # scoring window for summaries: steps t >= score_from
    score_from: int = 0
    # epochs for the stand-alone estimator fit used by train-omega / validate
    omega_epochs: int = 50


SECTIONS = {"run": RunConfig, "schedule": DriftSchedule, "omega": OmegaConfig, "model": ModelConfig,
            "rl": RLConfig}


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse(text: str, hint, key: str):
    text = text.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    if text.lower() == "none":
        raise ConfigError(f"{key}: none is not allowed")
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or typing.get_origin(hint) is tuple:
            return tuple(_scalar(p.strip()) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _hints(cls) -> dict:
    import sys

    return typing.get_type_hints(cls, vars(sys.modules[cls.__module__]))


def _section_values(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.init and not f.name.startswith("_")}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    schedule: DriftSchedule = field(default_factory=DriftSchedule)
    omega: OmegaConfig = field(default_factory=OmegaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rl: RLConfig = field(default_factory=RLConfig)

    def validate(self) -> "ExperimentConfig":
        """Check every block up front; raises :class:`ConfigError`."""
        try:
            self.schedule.validate()
        except ScheduleError as exc:
            raise ConfigError(str(exc)) from exc
        r = self.run
        if not r.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if any(not isinstance(s, int) or s < 0 for s in r.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        for p in r.protocols:
            try:
                _parse_protocol(p)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        stop = self.schedule.horizon if r.stop is None else r.stop
        if not 0 <= r.start < stop <= self.schedule.horizon:
            raise ConfigError("need 0 <= start < stop <= horizon")
        if r.test_size < 1 or r.omega_epochs < 1:
            raise ConfigError("test_size and omega_epochs must be positive")
        o, m = self.omega, self.model
        if o.mode not in ("method1", "method2"):
            raise ConfigError("omega.mode must be method1 or method2")
        if o.clip is not None and o.clip <= 0:
            raise ConfigError("omega.clip must be positive or none")
        for name, v in (("omega.lr", o.lr), ("model.lr", m.lr)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive")
        for name, v in (("omega.epochs", o.epochs), ("omega.epochs_per_step", o.epochs_per_step),
                        ("omega.batch_size", o.batch_size), ("omega.beta_epochs", o.beta_epochs),
                        ("model.epochs", m.epochs), ("model.batch_size", m.batch_size)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1")
        rl = self.rl
        try:
            rl.grid()
        except ValueError as exc:
            raise ConfigError(f"rl: {exc}") from exc
        if not (0.0 < rl.gamma <= 1.0 and 0.0 < rl.tau <= 1.0):
            raise ConfigError("rl.gamma and rl.tau must lie in (0, 1]")
        if rl.buffer_capacity < 1 or rl.refresh_every < 1 or rl.episodes < 1 or rl.batch_size < 1:
            raise ConfigError("rl sizes must be positive")
        if not 0 <= rl.burn_in < rl.episodes:
            raise ConfigError("rl.burn_in must be smaller than rl.episodes")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in _section_values(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(cp.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            hints = _hints(klass)
            known = {f.name for f in fields(klass) if f.init and not f.name.startswith("_")}
            kw = {}
            if cp.has_section(name):
                for key, raw in cp[name].items():
                    if key not in known:
                        raise ConfigError(f"unknown key {name}.{key}")
                    kw[key] = _parse(raw, hints[key], f"{name}.{key}")
            try:
                parts[name] = klass(**kw)
            except (ScheduleError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seeds=(int(seed),))
        if out is not None:
            run = replace(run, out=str(out))
        return replace(self, run=run)


def _preset(**sections) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for name, kw in sections.items():
        setattr(cfg, name, replace(getattr(cfg, name), **kw))
    return cfg


def presets() -> dict[str, ExperimentConfig]:
    """Desk-scale settings used by the acceptance suite and the shipped config files."""
    return {
        "gaussian": _preset(
            run=dict(protocols=("everything", "recent", "finetune", "omega_weighted:method1",
                                "omega_weighted:method2"), out="runs/gaussian", score_from=10),
            schedule=dict(kind="gaussian_walk", horizon=40, n_per_step=500, flip_period=10, d=1.0),
        ),
        "label_shift": _preset(
            run=dict(out="runs/label_shift"),
            schedule=dict(kind="label_shift", horizon=60, n_per_step=200, steps_per_pair=6, n_classes=10),
            model=dict(hidden=()),
            omega=dict(epochs_per_step=5),
        ),
        "mmd": _preset(
            run=dict(seeds=(0,), protocols=("omega_weighted",), out="runs/mmd"),
            schedule=dict(kind="gaussian_walk", horizon=40, n_per_step=200, flip_period=50),
            omega=dict(use_labels=False),
        ),
        "rl": _preset(
            run=dict(seeds=tuple(range(10)), protocols=("omega_weighted",), out="runs/rl"),
        ),
        "long_gaussian": _preset(
            run=dict(out="runs/long_gaussian", protocols=PROTOCOLS[:4]),
            schedule=dict(kind="gaussian_walk", horizon=160, n_per_step=2000, flip_period=50),
            model=dict(lr=9e-4),
        ),
    }
