"""Experiment configuration: one YAML file, optionally overridden from the command line.

Every key is optional. A minimal file::

    seed: 7
    out: results
    data:
      synthetic: {ids: [0x0DE, 0x0FB, 0x116], frames: 20000}
    federation: {vehicles: 5, epochs: 1, max_rounds: 60}

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .autoencoder import OptimizerConfig
from .errors import CanFedError
from .federation import FederationConfig


class ConfigError(CanFedError):
    pass


@dataclass
class SyntheticSource:
    ids: list[int] = field(default_factory=lambda: [0x0DE, 0x0FB, 0x116])
    frames: int = 20_000
    period: float = 0.01
    profile: str = "detection"  # "detection" | "random"
    checksum_prob: float = 0.0


@dataclass
class DataConfig:
    log: str | None = None
    synthetic: SyntheticSource | None = None
    layouts: str | None = None


@dataclass
class AttackConfig:
    kinds: list[str] = field(default_factory=lambda: ["INJECT_REPLAY", "MASQ_FUZZ", "MASQ_SEAMLESS"])
    validation_per_kind: int = 3
    test_per_kind: int = 4
    length: int = 25
    gap: int = 80
    manifest: str | None = None


@dataclass
class ModelConfig:
    enc_hidden: int = 32
    latent: int = 16
    dec_hidden: int = 32
    train_stride: int = 1
    eval_stride: int = 1


@dataclass
class TransportConfig:
    kind: str = "loopback"
    address: str = "127.0.0.1:1883"
    token: str = ""
    seed: int = 0
    drop: float = 0.0
    dup: float = 0.0
    delay: float = 0.0
    timeout: float = 1.0
    max_retries: int = 10
    publish_latency: float = 0.0
    receive_latency: float = 0.0
    stall_timeout: float = 600.0


@dataclass
class OverheadConfig:
    update_size: int | None = None  # None: use the measured RoundUpdate size
    t_sub: float = 0.180
    t_pub: float = 0.411
    raw_packet_bytes: int = 102


@dataclass
class ExperimentConfig:
    seed: int = 0
    ids: list[int] | None = None
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    modes: list[str] = field(default_factory=lambda: ["centralized", "federated"])
    out: str = "results"
    workers: int = 1
    figures: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] = field(default_factory=dict)
    transport: TransportConfig = field(default_factory=TransportConfig)
    overhead: OverheadConfig = field(default_factory=OverheadConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ConfigError(f"split must be three positive fractions summing to 1, got {self.split}")
        if self.ids is not None and not self.ids:
            raise ConfigError("ids must be non-empty (omit it to use every id)")
        bad = set(self.modes) - {"centralized", "federated"}
        if bad or not self.modes:
            raise ConfigError(f"modes must be drawn from centralized/federated, got {self.modes}")
        if self.transport.kind not in ("loopback", "tcp"):
            raise ConfigError(f"transport.kind must be loopback or tcp, got {self.transport.kind!r}")
        if self.data.log is None and self.data.synthetic is None:
            self.data.synthetic = SyntheticSource()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.federation_config()

    def optimizer_config(self) -> OptimizerConfig:
        return _build(OptimizerConfig, self.optimizer, "optimizer")

    def federation_config(self, **overrides) -> FederationConfig:
        raw = {"seed": self.seed, **self.federation, **overrides}
        raw["optimizer"] = self.optimizer_config()
        return _build(FederationConfig, raw, "federation")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _resolve(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _resolve(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (inner,) = typing.get_args(tp)
        return [_resolve(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    return value


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _resolve(hints[k], v, f"{where}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (CanFedError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` in place; the value is parsed as YAML."""
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a mapping")
    node[parts[-1]] = yaml.safe_load(text)


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    return _build(ExperimentConfig, raw, "config")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)
