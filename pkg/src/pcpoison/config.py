"""Experiment configuration: typed fields over an ini-style file.

The file uses ``[section]`` headers and ``key = value`` lines.  Every
key is declared in the schema below with its type and default; unknown
sections or keys are rejected by name, and values that fail to parse or
violate a cross-field constraint raise ConfigError with the offending
location.  ``section.key=value`` override strings (the CLI's --set)
apply on top of whatever the file said.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

from .defense import AdConfig
from .data import CLASS_NAMES
from .geometry import GS, GeometrySpec
from .location import LagrangianConfig
from .network import TrainConfig

__all__ = [
    "ConfigError", "ExperimentConfig",
    "default_config", "load_config", "loads_config", "apply_overrides",
    "save_config", "config_to_string",
]


class ConfigError(ValueError):
    """Bad configuration file, key, value, or combination of values."""


_BOOL_STATES = {"1": True, "yes": True, "true": True, "on": True,
                "0": False, "no": False, "false": False, "off": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_STATES[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}")


# (section, key, attribute, type, default)
_SCHEMA = [
    ("run", "seed", "seed", int, 0),
    ("data", "attacker_manifest", "attacker_manifest", str, ""),
    ("data", "train_manifest", "train_manifest", str, ""),
    ("data", "test_manifest", "test_manifest", str, ""),
    ("data", "trainer_per_class", "trainer_per_class", int, 200),
    ("data", "attacker_per_class", "attacker_per_class", int, 50),
    ("data", "test_per_class", "test_per_class", int, 50),
    ("data", "n_points", "n_points", int, 512),
    ("attack", "source_class", "source_class", int, 0),
    ("attack", "target_class", "target_class", int, 3),
    ("attack", "poison_count", "poison_count", int, 15),
    ("attack", "density_match", "density_match", bool, False),
    ("geometry", "kind", "geometry_kind", str, "RS"),
    ("geometry", "n_prime", "n_prime", int, 32),
    ("geometry", "radius", "radius", float, 0.04),
    ("geometry", "gs_rows", "gs_rows", int, 4),
    ("geometry", "gs_cols", "gs_cols", int, 8),
    ("geometry", "knn_k", "knn_k", int, 4),
    ("geometry", "mc_samples", "mc_samples", int, 50),
    ("geometry", "match_radius", "match_radius", bool, True),
    ("location", "epsilon", "epsilon", float, 0.02),
    ("location", "delta", "delta", float, 0.01),
    ("location", "tau_max", "tau_max", int, 3000),
    ("location", "alpha", "alpha", float, 1.5),
    ("location", "lambda_init", "lambda_init", float, 1e-5),
    ("location", "restarts", "restarts", int, 10),
    ("surrogate", "epochs", "surrogate_epochs", int, 120),
    ("surrogate", "batch_size", "surrogate_batch_size", int, 16),
    ("surrogate", "learning_rate", "surrogate_learning_rate", float, 1e-2),
    ("surrogate", "lr_decay_factor", "surrogate_lr_decay_factor", float, 0.5),
    ("surrogate", "lr_decay_every", "surrogate_lr_decay_every", int, 30),
    ("surrogate", "subsample_m", "surrogate_subsample_m", int, 256),
    ("victim", "epochs", "victim_epochs", int, 120),
    ("victim", "batch_size", "victim_batch_size", int, 16),
    ("victim", "learning_rate", "victim_learning_rate", float, 1e-2),
    ("victim", "lr_decay_factor", "victim_lr_decay_factor", float, 0.5),
    ("victim", "lr_decay_every", "victim_lr_decay_every", int, 30),
    ("victim", "subsample_m", "victim_subsample_m", int, 256),
    ("evaluate", "subsample_m", "eval_subsample_m", int, 256),
    ("defense", "ad_k", "ad_k", int, 2),
    ("defense", "ad_band", "ad_band", float, 1.1),
    ("defense", "trials", "defense_trials", int, 20000),
    ("defense", "keep_fraction", "keep_fraction", float, 0.5),
]

_BY_LOCATION = {(s, k): (attr, typ) for s, k, attr, typ, _ in _SCHEMA}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    attacker_manifest: str
    train_manifest: str
    test_manifest: str
    trainer_per_class: int
    attacker_per_class: int
    test_per_class: int
    n_points: int
    source_class: int
    target_class: int
    poison_count: int
    density_match: bool
    geometry_kind: str
    n_prime: int
    radius: float
    gs_rows: int
    gs_cols: int
    knn_k: int
    mc_samples: int
    match_radius: bool
    epsilon: float
    delta: float
    tau_max: int
    alpha: float
    lambda_init: float
    restarts: int
    surrogate_epochs: int
    surrogate_batch_size: int
    surrogate_learning_rate: float
    surrogate_lr_decay_factor: float
    surrogate_lr_decay_every: int
    surrogate_subsample_m: int
    victim_epochs: int
    victim_batch_size: int
    victim_learning_rate: float
    victim_lr_decay_factor: float
    victim_lr_decay_every: int
    victim_subsample_m: int
    eval_subsample_m: int
    ad_k: int
    ad_band: float
    defense_trials: int
    keep_fraction: float

    @property
    def from_manifests(self) -> bool:
        return bool(self.attacker_manifest or self.train_manifest or self.test_manifest)

    # -- derived builders; these reuse the validation of the target types --

    def geometry_spec(self) -> GeometrySpec:
        return GeometrySpec(self.geometry_kind, self.n_prime, self.radius,
                            gs_grid=(self.gs_rows, self.gs_cols))

    def lagrangian_config(self) -> LagrangianConfig:
        return LagrangianConfig(delta=self.delta, tau_max=self.tau_max,
                                alpha=self.alpha, lambda_init=self.lambda_init)

    def ad_config(self) -> AdConfig:
        return AdConfig(self.ad_k, self.ad_band)

    def _train_config(self, prefix: str, seed: int) -> TrainConfig:
        g = lambda name: getattr(self, f"{prefix}_{name}")
        return TrainConfig(epochs=g("epochs"), batch_size=g("batch_size"),
                           learning_rate=g("learning_rate"),
                           lr_decay_factor=g("lr_decay_factor"),
                           lr_decay_every=g("lr_decay_every"), seed=seed)

    def surrogate_train_config(self, seed: int) -> TrainConfig:
        return self._train_config("surrogate", seed)

    def victim_train_config(self, seed: int) -> TrainConfig:
        return self._train_config("victim", seed)

    def validate(self) -> "ExperimentConfig":
        try:
            self.geometry_spec()
            self.lagrangian_config()
            self.ad_config()
            self._train_config("surrogate", 0)
            self._train_config("victim", 0)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not self.from_manifests:
            n_classes = len(CLASS_NAMES)
            if not (0 <= self.source_class < n_classes
                    and 0 <= self.target_class < n_classes):
                raise ConfigError(
                    f"source/target class must be in [0, {n_classes}) for the "
                    f"{n_classes}-class corpus")
        elif not (self.attacker_manifest and self.train_manifest and self.test_manifest):
            raise ConfigError(
                "manifest mode needs all of attacker_manifest, train_manifest, "
                "test_manifest")
        if self.source_class == self.target_class:
            raise ConfigError("source and target class must differ")
        if min(self.source_class, self.target_class) < 0:
            raise ConfigError("class indices must be >= 0")
        if min(self.trainer_per_class, self.attacker_per_class,
               self.test_per_class, self.n_points) < 1:
            raise ConfigError("per-class counts and n_points must be >= 1")
        if self.poison_count < 0:
            raise ConfigError("poison_count must be >= 0")
        if not self.from_manifests and self.poison_count > self.attacker_per_class:
            raise ConfigError(
                f"poison_count {self.poison_count} exceeds the attacker's "
                f"{self.attacker_per_class} clouds per class")
        if self.geometry_kind == GS and (self.density_match or self.match_radius):
            raise ConfigError(
                "the GS grid keeps its manual radius; disable density_match "
                "and match_radius for kind = GS")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.knn_k < 1 or self.knn_k >= self.n_prime:
            raise ConfigError("need 1 <= knn_k < n_prime")
        if self.mc_samples < 1 or self.restarts < 1:
            raise ConfigError("mc_samples and restarts must be >= 1")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("keep_fraction must be in (0, 1]")
        if self.defense_trials < 1:
            raise ConfigError("defense trials must be >= 1")
        if min(self.surrogate_subsample_m, self.victim_subsample_m,
               self.eval_subsample_m) < 0:
            raise ConfigError("subsample_m must be >= 0 (0 disables)")
        return self


def default_config() -> ExperimentConfig:
    return ExperimentConfig(**{attr: default for _, _, attr, _, default in _SCHEMA})


def _convert(section: str, key: str, text: str):
    attr, typ = _BY_LOCATION[(section, key)]
    try:
        value = _parse_bool(text) if typ is bool else typ(text)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e
    return attr, value


def _from_parser(parser: configparser.ConfigParser, origin: str) -> ExperimentConfig:
    values = {attr: default for _, _, attr, _, default in _SCHEMA}
    for section in parser.sections():
        for key, text in parser.items(section):
            if (section, key) not in _BY_LOCATION:
                known = sorted(k for s, k in _BY_LOCATION if s == section)
                hint = f"; keys in [{section}]: {', '.join(known)}" if known \
                    else f"; unknown section [{section}]"
                raise ConfigError(f"{origin}: unknown key [{section}] {key}{hint}")
            attr, value = _convert(section, key, text)
            values[attr] = value
    return ExperimentConfig(**values).validate()


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def loads_config(text: str, origin: str = "<string>") -> ExperimentConfig:
    parser = _new_parser()
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    return _from_parser(parser, origin)


def load_config(path) -> ExperimentConfig:
    path = str(path)
    parser = _new_parser()
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    return _from_parser(parser, path)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply "section.key=value" strings on top of an existing config."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r}: expected section.key=value")
        key, _, text = pair.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"override {pair!r}: key must be section.key")
        section, _, name = key.partition(".")
        if (section, name) not in _BY_LOCATION:
            raise ConfigError(f"override {pair!r}: unknown key [{section}] {name}")
        attr, value = _convert(section, name, text.strip())
        updates[attr] = value
    if not updates:
        return cfg
    return dataclasses.replace(cfg, **updates).validate()


def config_to_string(cfg: ExperimentConfig) -> str:
    """Canonical serialization; parses back to an equal config."""
    lines = []
    current = None
    for section, key, attr, typ, _ in _SCHEMA:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        value = getattr(cfg, attr)
        if typ is bool:
            value = "true" if value else "false"
        elif typ is float:
            value = repr(float(value))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(config_to_string(cfg))
