"""Experiment configuration: one JSON document covering data, architecture
and every training stage.

Unknown keys are rejected at any level.  The top-level ``seed`` is the only
seed; it is propagated to the generator, the split and every trainer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from . import data, nets
from .experiment import DeskConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


@dataclass
class SplitConfig:
    n_test_per_race: int = 50
    val_fraction: float = 0.1

    def validate(self):
        if self.n_test_per_race < 0:
            raise ValueError(f"n_test_per_race: must be >= 0, got {self.n_test_per_race}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction: must be in [0, 1), got {self.val_fraction}")


def _desk():
    return DeskConfig()


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: str | None = None  # None: synthesize from ``synth``
    out: str = "out"
    synth: data.SynthConfig = field(default_factory=lambda: _desk().synth)
    arch: nets.ArchSpec = field(default_factory=lambda: _desk().arch)
    split: SplitConfig = field(default_factory=lambda: SplitConfig(_desk().n_test_per_race,
                                                                   _desk().val_fraction))
    fader: TrainConfig = field(default_factory=lambda: _desk().fader)
    ae: TrainConfig = field(default_factory=lambda: _desk().ae)
    clf: TrainConfig = field(default_factory=lambda: _desk().clf)
    probe: TrainConfig = field(default_factory=lambda: _desk().probe)

    def seeded(self, seed=None):
        """Copy with ``seed`` (default: own seed) pushed into every section."""
        seed = self.seed if seed is None else seed
        r = dataclasses.replace
        return r(self, seed=seed, synth=r(self.synth, seed=seed), fader=r(self.fader, seed=seed),
                 ae=r(self.ae, seed=seed), clf=r(self.clf, seed=seed), probe=r(self.probe, seed=seed))

    def to_dict(self):
        d = {"seed": self.seed, "dataset": self.dataset, "out": self.out}
        for name in _SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            sec.pop("seed", None)
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self):
        """Content hash of everything but the output directory."""
        d = self.to_dict()
        del d["out"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def desk(self) -> DeskConfig:
        return DeskConfig(self.synth, self.arch, self.fader, self.ae, self.clf, self.probe,
                          self.split.n_test_per_race, self.split.val_fraction)

    def validate(self):
        for name in _SECTIONS:
            try:
                getattr(self, name).validate()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}.{exc}") from None
        if self.synth.K != self.arch.num_attrs:
            raise ConfigError(f"synth.K: {self.synth.K} differs from arch.num_attrs {self.arch.num_attrs}")
        if self.dataset is None and (self.synth.image_size != self.arch.input_size
                                     or self.synth.channels != self.arch.input_channels):
            raise ConfigError("synth.image_size: synthetic images must match arch input size and channels")
        return self


_SECTIONS = {
    "synth": data.SynthConfig,
    "arch": nets.ArchSpec,
    "split": SplitConfig,
    "fader": TrainConfig,
    "ae": TrainConfig,
    "clf": TrainConfig,
    "probe": TrainConfig,
}
_TOP = {"seed": int, "dataset": (str, type(None)), "out": str}


def _coerce(value, default, key):
    """Check a JSON value against the type of the field's declared default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) or default is None:
        ok = isinstance(value, int) and not isinstance(value, bool) or (default is None and value is None)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in value)
        value = tuple(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def _section(base, raw, name):
    """``base`` with the keys of ``raw`` replaced."""
    cls = type(base)
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    proto = cls()
    known = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    kw = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    if cls is nets.ArchSpec and "latent_channels" not in raw:
        kw["latent_channels"] = None  # re-derive from base_channels and depth
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        kw[key] = _coerce(value, getattr(proto, key) if key != "latent_channels" else None,
                          f"{name}.{key}")
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}.{exc}") from None


def from_dict(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for key in raw:
        if key not in _TOP and key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    for key, typ in _TOP.items():
        if key in raw and (not isinstance(raw[key], typ) or isinstance(raw[key], bool)):
            raise ConfigError(f"{key}: wrong type {json.dumps(raw[key])}")
    base = ExperimentConfig()
    kw = {k: raw[k] for k in _TOP if k in raw}
    for name in _SECTIONS:
        kw[name] = _section(getattr(base, name), raw[name], name) if name in raw else getattr(base, name)
    return ExperimentConfig(**kw).seeded().validate()


def load_config(path=None, seed=None, out=None) -> ExperimentConfig:
    """Read and validate a config file (defaults when ``path`` is None);
    ``seed`` and ``out`` override the file."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
    if seed is not None:
        raw = {**raw, "seed": seed}
    if out is not None:
        raw = {**raw, "out": out}
    return from_dict(raw)
