"""Server configuration from environment variables and a JSON config file.

Environment:
    AIDE_DATA_DIR    storage root (default ./aide-data)
    AIDE_API_KEY     static bearer token; unset disables auth
    AIDE_HTTP_ADDR   host:port to serve on (default 127.0.0.1:7465)
    AIDE_CONFIG      path to the JSON config file

The config file can set any field below plus per-project evaluator specs,
monitor rules, and defaults for experiments and gate configs:

    {
      "api_key": "secret",
      "auto_create_projects": true,
      "gate_defaults": {"baseline_window": 10, "relative_drop_threshold": 0.1},
      "experiment_defaults": {"allocation_fraction": 0.05},
      "projects": {
        "demo": {
          "evaluators": [{"name": "polite", "kind": "regex_absent",
                          "params": {"pattern": "\\\\bdamn\\\\b"}}],
          "rules": [ ... ]
        }
      }
    }
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ValidationError
from .wire import decode_json

DEFAULT_HTTP_ADDR = "127.0.0.1:7465"

GATE_DEFAULTS = {
    "baseline_window": 10,
    "relative_drop_threshold": 0.10,
    "k_sigma": 2.0,
    "min_baseline_runs": 3,
    "direction": "higher_is_better",
}

EXPERIMENT_DEFAULTS = {
    "allocation_fraction": 0.05,
    "min_samples_per_arm": 50,
    "promotion_delta": 0.05,
    "objective_metric": "quality",
}


@dataclass
class ServerConfig:
    data_dir: Path = Path("aide-data")
    api_key: str | None = None
    http_addr: str = DEFAULT_HTTP_ADDR
    auto_create_projects: bool = True
    batch_max: int = 500
    defer_batch_eval: bool = False
    queue_depth: int = 1024
    auto_promote: bool = False
    monitor_interval_ms: int = 1000
    fsync: bool = True
    max_log_bytes: int | None = None
    snapshot_every_records: int = 0  # 0 disables the background snapshotter
    gate_defaults: dict = field(default_factory=lambda: dict(GATE_DEFAULTS))
    experiment_defaults: dict = field(default_factory=lambda: dict(EXPERIMENT_DEFAULTS))
    project_evaluators: dict[str, list[dict]] = field(default_factory=dict)
    project_rules: dict[str, list[dict]] = field(default_factory=dict)

    @property
    def host(self) -> str:
        return self.http_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.http_addr.rsplit(":", 1)[1])

    @classmethod
    def load(
        cls,
        env: Mapping[str, str] | None = None,
        config_path: str | Path | None = None,
    ) -> ServerConfig:
        env = dict(env if env is not None else os.environ)
        config = cls()
        path = config_path or env.get("AIDE_CONFIG")
        if path:
            config = cls._apply_file(config, Path(path))
        if env.get("AIDE_DATA_DIR"):
            config.data_dir = Path(env["AIDE_DATA_DIR"])
        if env.get("AIDE_API_KEY"):
            config.api_key = env["AIDE_API_KEY"]
        if env.get("AIDE_HTTP_ADDR"):
            config.http_addr = env["AIDE_HTTP_ADDR"]
        return config

    @staticmethod
    def _apply_file(config: ServerConfig, path: Path) -> ServerConfig:
        try:
            raw = decode_json(path.read_bytes())
        except (OSError, ValueError) as exc:
            raise ValidationError("config", f"cannot read config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config", "config file must contain a JSON object")
        scalar_fields = {
            "api_key": str,
            "http_addr": str,
            "auto_create_projects": bool,
            "batch_max": int,
            "defer_batch_eval": bool,
            "queue_depth": int,
            "auto_promote": bool,
            "monitor_interval_ms": int,
            "fsync": bool,
            "max_log_bytes": int,
            "snapshot_every_records": int,
        }
        for key, expected in scalar_fields.items():
            if key in raw and raw[key] is not None:
                value = raw[key]
                if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
                    raise ValidationError(f"config.{key}", f"must be {expected.__name__}")
                setattr(config, key, value)
        if raw.get("data_dir"):
            config.data_dir = Path(raw["data_dir"])
        for key in ("gate_defaults", "experiment_defaults"):
            if isinstance(raw.get(key), dict):
                getattr(config, key).update(raw[key])
        projects = raw.get("projects") or {}
        if not isinstance(projects, dict):
            raise ValidationError("config.projects", "must be an object")
        for project_id, section in projects.items():
            if not isinstance(section, dict):
                raise ValidationError(f"config.projects.{project_id}", "must be an object")
            if section.get("evaluators"):
                config.project_evaluators[project_id] = list(section["evaluators"])
            if section.get("rules"):
                config.project_rules[project_id] = list(section["rules"])
        return config
