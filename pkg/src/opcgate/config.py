"""Gateway configuration file (JSON) with sections gateway, ledger, controller, harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataplane.pipeline import OPCUA_PORT, PipelineConfig
from .ledger.simnet import PRESETS


class ConfigInvalid(ValueError):
    pass


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ConfigInvalid(f"address {text!r} is not host:port")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigInvalid(f"address {text!r} has a non-numeric port") from None


@dataclass
class GatewaySection:
    listen: str = "127.0.0.1:4841"
    upstream: str = "127.0.0.1:4840"
    opcua_port: int = OPCUA_PORT
    validation_enabled: bool = True
    max_chunks: int = 100
    table_capacity: int = 1024
    drop_mode: str = "silent"
    metrics_listen: str | None = None
    metrics_path: str | None = "gateway-metrics.json"

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            opcua_port=self.opcua_port,
            validation_enabled=self.validation_enabled,
            max_chunks=self.max_chunks,
            table_capacity=self.table_capacity,
            drop_mode=self.drop_mode,
        )


@dataclass
class LedgerSection:
    layer: str = "L1"
    path: str = "ledger.jsonl"
    link: str = "zero"
    seed: int = 0
    admin_public_keys: list = field(default_factory=list)
    poll_interval: float = 1.0


@dataclass
class ControllerSection:
    snapshot: str | None = "controller-snapshot.json"
    expire_interval: float = 60.0


@dataclass
class HarnessSection:
    timeout: float = 5.0
    link: str = "zero"


@dataclass
class Config:
    gateway: GatewaySection = field(default_factory=GatewaySection)
    ledger: LedgerSection = field(default_factory=LedgerSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    harness: HarnessSection = field(default_factory=HarnessSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def admin_keys(self) -> set[bytes]:
        try:
            return {bytes.fromhex(k) for k in self.ledger.admin_public_keys}
        except ValueError as exc:
            raise ConfigInvalid(f"ledger.admin_public_keys: {exc}") from None


_SECTIONS = {"gateway": GatewaySection, "ledger": LedgerSection, "controller": ControllerSection,
             "harness": HarnessSection}


def _build(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigInvalid(f"unknown keys in {name!r}: {sorted(unknown)}")
    default = cls()
    for key, value in raw.items():
        expected = type(getattr(default, key))
        if getattr(default, key) is None or value is None:
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigInvalid(f"{name}.{key} should be {expected.__name__}, got {type(value).__name__}")
    return cls(**raw)


def from_dict(raw: dict, base_dir: Path | None = None) -> Config:
    if not isinstance(raw, dict):
        raise ConfigInvalid("top level must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigInvalid(f"unknown sections: {sorted(unknown)}")
    cfg = Config(**{name: _build(cls, name, raw.get(name, {})) for name, cls in _SECTIONS.items()})
    if base_dir is not None:
        cfg.base_dir = base_dir
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    try:
        cfg.gateway.pipeline()
    except ValueError as exc:
        raise ConfigInvalid(f"gateway: {exc}") from None
    parse_address(cfg.gateway.listen)
    parse_address(cfg.gateway.upstream)
    if cfg.gateway.metrics_listen:
        parse_address(cfg.gateway.metrics_listen)
    if cfg.ledger.layer not in ("L1", "L2"):
        raise ConfigInvalid("ledger.layer must be L1 or L2")
    for name, link in (("ledger.link", cfg.ledger.link), ("harness.link", cfg.harness.link)):
        if link not in PRESETS:
            raise ConfigInvalid(f"{name} must be one of {sorted(PRESETS)}")
    if cfg.ledger.poll_interval <= 0 or cfg.controller.expire_interval <= 0:
        raise ConfigInvalid("intervals must be positive")
    cfg.admin_keys()


def load(path) -> Config:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    return from_dict(raw, path.resolve().parent)
