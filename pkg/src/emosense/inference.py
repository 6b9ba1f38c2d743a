"""Button-triggered detection sessions: collect a sensing window, publish
mean features, await the classified result, and fan it out to sinks."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import httpx

log = logging.getLogger(__name__)

INFER_TOPIC = "iotsensors/infer"
RESULT_TOPIC = "iotsensors/infer/result"

NOTIFICATION_TEMPLATE = "Prediction result for {participant}: You are {label}!"

DEFAULT_RECOMMENDATIONS = {
    "Angry": "calming music, soft warm lighting",
    "Happy": "upbeat music, bright lighting",
    "Sad": "uplifting music, warm dim lighting",
}


class ConfigMissError(ValueError):
    """Recommendation table does not cover every label."""


class EmptyStatsError(ValueError):
    """No completed sessions to summarize."""


class SessionTimeoutError(TimeoutError):
    """No result arrived on the result topic in time."""


@dataclass
class InferenceSession:
    session_id: str
    participant_id: str
    window_s: int
    status: str = "pending"  # pending | done | failed
    mean_gsr: Optional[float] = None
    mean_bpm: Optional[float] = None
    predicted: Optional[str] = None
    probabilities: Optional[list[float]] = None
    recommendation: Optional[str] = None
    error: Optional[str] = None
    t_trigger: int = 0  # epoch ms at button press
    t_result: Optional[int] = None
    regime: Optional[str] = None

    @property
    def elapsed_ms(self) -> Optional[int]:
        if self.t_result is None:
            return None
        return self.t_result - self.t_trigger

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "participant": self.participant_id,
            "window_s": self.window_s,
            "status": self.status,
            "mean_gsr": self.mean_gsr,
            "mean_bpm": self.mean_bpm,
            "label": self.predicted,
            "probabilities": self.probabilities,
            "recommendation": self.recommendation,
            "error": self.error,
            "t_trigger": self.t_trigger,
            "t_result": self.t_result,
            "elapsed_ms": self.elapsed_ms,
            "regime": self.regime,
        }


class RecommendationTable:
    """Label -> ambiance string lookup, validated on construction so a
    missing label fails at load time rather than mid-session."""

    def __init__(self, table: Optional[dict[str, str]] = None, labels: Sequence[str] = ("Angry", "Happy", "Sad")):
        table = dict(table) if table is not None else dict(DEFAULT_RECOMMENDATIONS)
        missing = [l for l in labels if l not in table]
        if missing:
            raise ConfigMissError(f"recommendation table missing labels {missing}")
        unknown = [l for l in table if l not in labels]
        if unknown:
            raise ConfigMissError(f"recommendation table has unknown labels {unknown}")
        self._table = table

    def recommend(self, label: str) -> str:
        return self._table[label]


# -- notification sinks ----------------------------------------------------------


@dataclass(frozen=True)
class Subscription:
    """One fanout destination."""

    kind: str  # webhook | file | console
    target: str = ""
    topic_name: str = "emotion-alerts"

    def __post_init__(self) -> None:
        if self.kind not in ("webhook", "file", "console"):
            raise ValueError(f"unknown sink kind {self.kind!r}")
        if self.kind == "webhook" and not (
            self.target.startswith("http://") or self.target.startswith("https://")
        ):
            raise ValueError(f"webhook target must be an http(s) URL, got {self.target!r}")
        if self.kind == "file" and not self.target:
            raise ValueError("file sink needs a target path")


@dataclass
class DeliveryReport:
    attempted: int = 0
    delivered: int = 0
    failures: list[tuple[Subscription, str]] = field(default_factory=list)

    @property
    def failed(self) -> int:
        return len(self.failures)


def _deliver(sub: Subscription, message: str, notification: dict) -> None:
    if sub.kind == "console":
        print(message)
    elif sub.kind == "file":
        stamp = datetime.now(timezone.utc).isoformat()
        path = Path(sub.target)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as f:
            f.write(f"{stamp} {message}\n")
    elif sub.kind == "webhook":
        resp = httpx.post(sub.target, json=dict(notification, message=message), timeout=2.0)
        resp.raise_for_status()


def fanout(notification: dict, subscriptions: Sequence[Subscription]) -> DeliveryReport:
    """Deliver one notification to every sink; per-sink failures are
    recorded in the report, never raised."""
    message = NOTIFICATION_TEMPLATE.format(
        participant=notification.get("participant", "?"),
        label=notification.get("label", "?"),
    )
    report = DeliveryReport()
    for sub in subscriptions:
        report.attempted += 1
        try:
            _deliver(sub, message, notification)
            report.delivered += 1
        except Exception as exc:
            log.warning("sink %s/%s failed: %s", sub.kind, sub.target, exc)
            report.failures.append((sub, str(exc)))
    return report


# -- latency ----------------------------------------------------------------------


def latency_stats(
    sessions: Sequence[InferenceSession], exclude_window: bool = False
) -> dict[str, float]:
    """Mean/p50/p95 of elapsed_ms over completed sessions; with
    exclude_window the sensing window is subtracted per session."""
    values = []
    for s in sessions:
        if s.elapsed_ms is None:
            continue
        v = float(s.elapsed_ms)
        if exclude_window:
            v -= s.window_s * 1000.0
        values.append(v)
    if not values:
        raise EmptyStatsError("no completed sessions")
    arr = sorted(values)
    return {
        "count": len(arr),
        "mean_ms": sum(arr) / len(arr),
        "p50_ms": _percentile(arr, 50.0),
        "p95_ms": _percentile(arr, 95.0),
    }


def _percentile(sorted_values: list[float], q: float) -> float:
    if len(sorted_values) == 1:
        return sorted_values[0]
    rank = (q / 100.0) * (len(sorted_values) - 1)
    lo = int(rank)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = rank - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


class SessionStore:
    """Thread-safe session state keyed by id."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._sessions: dict[str, InferenceSession] = {}

    def add(self, session: InferenceSession) -> None:
        with self._lock:
            self._sessions[session.session_id] = session

    def get(self, session_id: str) -> Optional[InferenceSession]:
        with self._lock:
            return self._sessions.get(session_id)

    def recent(self, limit: int = 50) -> list[InferenceSession]:
        with self._lock:
            sessions = list(self._sessions.values())
        sessions.sort(key=lambda s: s.t_trigger, reverse=True)
        return sessions[:limit]

    def all(self) -> list[InferenceSession]:
        with self._lock:
            return list(self._sessions.values())
