"""Experiment configuration: a flat ``key = value`` file plus environment overrides.

Precedence, lowest first: built-in defaults, the config file, ``ANYSHOT_*``
environment variables, explicit command-line flags.  Keys are the field names
of the world, split, training, loss and threshold settings (the loss uses its
flat names, e.g. ``lambda``), plus ``shots``, ``seeds``, ``semantics_mode``,
``loss_scheme`` and ``out_dir``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .evaluation import Thresholds
from .loss import LossConfig
from .synthdata import SplitSpec, WorldSpec
from .trainer import TrainConfig

ENV_PREFIX = "ANYSHOT_"

_WORLD_KEYS = {f.name for f in fields(WorldSpec)}
_SPLIT_KEYS = {f.name for f in fields(SplitSpec)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "seed"}
_LOSS_KEYS = set(LossConfig().to_flat())
_THRESHOLD_KEYS = {f.name for f in fields(Thresholds)}
_TOP_KEYS = {"shots", "seeds", "semantics_mode", "out_dir"}


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    shots: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    semantics_mode: str = "trainable"
    out_dir: str = "runs"
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.shots < 0:
            raise ConfigError("shots must be non-negative")
        if self.semantics_mode not in ("fixed", "trainable"):
            raise ConfigError(f"unknown semantics_mode {self.semantics_mode!r}")

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=(int(seed),))

    def to_flat(self) -> dict:
        flat = {}
        flat.update(asdict(self.world))
        flat.update(asdict(self.split))
        flat.update({k: v for k, v in asdict(self.train).items() if k in _TRAIN_KEYS})
        flat.update(self.loss.to_flat())
        flat.update(asdict(self.thresholds))
        flat.update(shots=self.shots, semantics_mode=self.semantics_mode, out_dir=self.out_dir,
                    seeds=",".join(str(s) for s in self.seeds))
        return flat


def known_keys() -> set:
    return _WORLD_KEYS | _SPLIT_KEYS | _TRAIN_KEYS | _LOSS_KEYS | _THRESHOLD_KEYS | _TOP_KEYS


def _coerce(key: str, raw, like):
    """Convert ``raw`` to the type of the current value ``like``."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key == "seeds":
            return tuple(int(s) for s in text.replace(" ", "").split(",") if s)
        if key == "ft_seen_shots" and text.lower() in ("", "none"):
            return None
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int) or (like is None and key == "ft_seen_shots"):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return ``cfg`` with flat ``key -> value`` overrides applied (strings are parsed)."""
    unknown = set(overrides) - known_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    flat = cfg.to_flat()
    current = {**flat, "seeds": cfg.seeds}
    new = {k: _coerce(k, v, current[k]) for k, v in overrides.items()}
    merged = {**current, **new}

    def pick(keys):
        return {k: merged[k] for k in keys}

    try:
        loss = LossConfig.from_flat(pick(_LOSS_KEYS))
        train = TrainConfig(**pick(_TRAIN_KEYS), seed=cfg.train.seed, loss=loss)
        return ExperimentConfig(
            world=WorldSpec(**pick(_WORLD_KEYS)),
            split=SplitSpec(**pick(_SPLIT_KEYS)),
            shots=merged["shots"],
            train=train,
            thresholds=Thresholds(**pick(_THRESHOLD_KEYS)),
            semantics_mode=merged["semantics_mode"],
            out_dir=merged["out_dir"],
            seeds=tuple(merged["seeds"]),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (S, F, U)
    try:
        parser.read_string("[anyshot]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return dict(parser["anyshot"])


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    keys = {k.lower(): k for k in known_keys()}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        raw = name[len(ENV_PREFIX):]
        key = raw if raw in known_keys() else keys.get(raw.lower())
        if key is None:
            raise ConfigError(f"unknown environment override {name}")
        out[key] = value
    return out


def load_config(path=None, environ=None, **flags) -> ExperimentConfig:
    """Defaults, then ``path`` (if given), then environment, then ``flags``."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply_overrides(cfg, parse_config_text(text))
    cfg = apply_overrides(cfg, env_overrides(environ))
    flags = {k: v for k, v in flags.items() if v is not None}
    if flags:
        cfg = apply_overrides(cfg, flags)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(cfg.to_flat().items())]
    return "\n".join(lines) + "\n"
