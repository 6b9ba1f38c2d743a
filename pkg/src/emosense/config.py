"""Runtime configuration: TOML file with flag-style overrides.

Every setting has a default so the system runs with no config file at
all; a bad file fails fast with the offending field named.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bus import DevicePolicy, TopicFilter, TopicRule
from .inference import DEFAULT_RECOMMENDATIONS, Subscription
from .learn import Hyperparams
from .sensors import DEFAULT_REGIMES, EmotionRegime, GsrConverter


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


@dataclass
class Config:
    store_root: str = "./emosense-data"
    data_bucket: str = "sensor-data"
    artifact_bucket: str = "artifacts"
    seed: int = 0
    device_id: str = "sensor-hub"
    policy_prefix: str = "iotsensors/#"
    rule_workers: int = 1
    tcp_host: Optional[str] = None  # set to enable the TCP bus front-end
    tcp_port: int = 1883
    flush_rows: int = 500
    flush_interval_s: float = 60.0
    window_s: int = 10
    result_timeout_s: float = 10.0
    session_tick_s: float = 1.0  # sensing sample period; tests shrink it
    demo_regime: str = "Happy"
    test_fraction: float = 0.2
    smote_k: int = 5
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    regimes: dict[str, EmotionRegime] = field(default_factory=lambda: dict(DEFAULT_REGIMES))
    recommendations: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_RECOMMENDATIONS))
    sinks: list[Subscription] = field(default_factory=lambda: [Subscription(kind="console")])
    divider: GsrConverter = field(default_factory=GsrConverter)
    extra_rules: list[TopicRule] = field(default_factory=list)
    extra_policies: list[DevicePolicy] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must be in [0, 1)")
        if self.window_s < 1:
            raise ConfigError("window_s must be >= 1")
        if self.flush_rows < 1:
            raise ConfigError("flush_rows must be >= 1")
        try:
            Path(self.store_root).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"store_root {self.store_root!r} is not creatable: {exc}")


def _regime_from_table(label: str, table: dict) -> EmotionRegime:
    try:
        return EmotionRegime(
            label=label,
            gsr_mean=float(table["gsr_mean"]),
            gsr_std=float(table["gsr_std"]),
            bpm_mean=float(table["bpm_mean"]),
            bpm_std=float(table["bpm_std"]),
        )
    except KeyError as exc:
        raise ConfigError(f"regimes.{label.lower()}: missing field {exc.args[0]}") from exc
    except ValueError as exc:
        raise ConfigError(f"regimes.{label.lower()}: {exc}") from exc


def load_config(path: Optional[str] = None, **overrides) -> Config:
    """Build a Config from an optional TOML file plus keyword overrides
    (overrides win, matching CLI flag precedence)."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path!r}: {exc}")

    kwargs: dict = {}
    scalars = [
        "store_root", "data_bucket", "artifact_bucket", "seed", "device_id",
        "policy_prefix", "rule_workers", "tcp_host", "tcp_port", "flush_rows",
        "flush_interval_s", "window_s", "result_timeout_s", "session_tick_s",
        "demo_regime", "test_fraction", "smote_k",
    ]
    for name in scalars:
        if name in doc:
            kwargs[name] = doc[name]

    if "hyperparams" in doc:
        try:
            kwargs["hyperparams"] = Hyperparams(**doc["hyperparams"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"hyperparams: {exc}")
    if "regimes" in doc:
        regimes = {}
        for key, table in doc["regimes"].items():
            label = key.capitalize()
            regimes[label] = _regime_from_table(label, table)
        kwargs["regimes"] = regimes
    if "recommendations" in doc:
        kwargs["recommendations"] = dict(doc["recommendations"])
    if "sinks" in doc:
        sinks = []
        for i, table in enumerate(doc["sinks"]):
            try:
                sinks.append(Subscription(**table))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sinks[{i}]: {exc}")
        kwargs["sinks"] = sinks
    if "divider" in doc:
        try:
            kwargs["divider"] = GsrConverter(**doc["divider"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"divider: {exc}")
    if "rules" in doc:
        rules = []
        for i, table in enumerate(doc["rules"]):
            try:
                rules.append(
                    TopicRule(table["name"], table["query"], list(table["actions"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"rules[{i}]: {exc}")
        kwargs["extra_rules"] = rules
    if "policies" in doc:
        policies = []
        for i, table in enumerate(doc["policies"]):
            try:
                policies.append(
                    DevicePolicy(table["device_id"], TopicFilter(table["filter"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"policies[{i}]: {exc}")
        kwargs["extra_policies"] = policies

    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Config(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"unknown config field: {exc}")
