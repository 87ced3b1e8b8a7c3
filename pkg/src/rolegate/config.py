"""Service configuration: defaults, JSON config file, CLI overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .decision import ObligationPolicy
from .directory import RbacError

DEFAULT_PORT = 8640


class ConfigError(RbacError):
    code = "config-error"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    data_dir: Path = Path("./rolegate-data")
    snapshot_dir: Optional[Path] = None  # defaults to <data_dir>/snapshots
    snapshot_interval_seconds: int = 0  # 0 = scheduled snapshots disabled
    snapshot_keep_last: int = 10
    anomaly_log: Optional[Path] = None  # defaults to <data_dir>/anomalies.log
    api_token: Optional[str] = None
    plain_rbac: bool = False
    obligations: list[ObligationPolicy] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.data_dir = Path(self.data_dir)
        if self.snapshot_dir is None:
            self.snapshot_dir = self.data_dir / "snapshots"
        self.snapshot_dir = Path(self.snapshot_dir)
        if self.anomaly_log is None:
            self.anomaly_log = self.data_dir / "anomalies.log"
        self.anomaly_log = Path(self.anomaly_log)
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port must be in 1..65535, got {self.port}")
        if self.snapshot_interval_seconds < 0:
            raise ConfigError("snapshot-interval-seconds must be >= 0")
        if self.snapshot_keep_last < 1:
            raise ConfigError("snapshot-keep-last must be >= 1")
        paths = {
            self.data_dir.resolve(),
            self.snapshot_dir.resolve(),
            self.anomaly_log.resolve(),
        }
        if len(paths) != 3:
            raise ConfigError("data dir, snapshot dir and anomaly log must be distinct paths")

    @property
    def live_path(self) -> Path:
        return self.data_dir / "live.rbak"


def _parse_obligation(raw: dict, index: int) -> ObligationPolicy:
    try:
        return ObligationPolicy(
            id=raw["id"],
            modality=raw["modality"],
            action_token=raw["action"],
            applies_to=frozenset(raw.get("applies-to", [])),
            condition=dict(raw.get("condition", {})),
        )
    except (KeyError, TypeError, ValueError, RbacError) as exc:
        raise ConfigError(f"bad obligation at index {index}: {exc}") from exc


def load_config(path: Optional[Path] = None, **overrides) -> ServiceConfig:
    """Build a ServiceConfig from an optional JSON file plus keyword overrides.

    Recognized keys mirror the dataclass fields with hyphens:
    listen ("host:port"), data-dir, snapshot-dir, snapshot-interval-seconds,
    snapshot-keep-last, anomaly-log, api-token, plain-rbac, obligations.
    """
    values: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        known = {
            "listen",
            "data-dir",
            "snapshot-dir",
            "snapshot-interval-seconds",
            "snapshot-keep-last",
            "anomaly-log",
            "api-token",
            "plain-rbac",
            "obligations",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "listen" in raw:
            values["host"], values["port"] = parse_listen(raw["listen"])
        if "data-dir" in raw:
            values["data_dir"] = Path(raw["data-dir"])
        if "snapshot-dir" in raw:
            values["snapshot_dir"] = Path(raw["snapshot-dir"])
        if "snapshot-interval-seconds" in raw:
            values["snapshot_interval_seconds"] = int(raw["snapshot-interval-seconds"])
        if "snapshot-keep-last" in raw:
            values["snapshot_keep_last"] = int(raw["snapshot-keep-last"])
        if "anomaly-log" in raw:
            values["anomaly_log"] = Path(raw["anomaly-log"])
        if "api-token" in raw:
            values["api_token"] = raw["api-token"]
        if "plain-rbac" in raw:
            values["plain_rbac"] = bool(raw["plain-rbac"])
        if "obligations" in raw:
            if not isinstance(raw["obligations"], list):
                raise ConfigError("obligations must be a list")
            values["obligations"] = [
                _parse_obligation(o, i) for i, o in enumerate(raw["obligations"])
            ]
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ServiceConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = str(value).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"listen must be host:port, got {value!r}")
    return host or "127.0.0.1", int(port)
