"""Local pub/sub message bus: topic matching, device policies, and a rules
engine that routes matched messages to named actions.

Semantics are QoS-0 and non-retained: a message reaches the subscriptions
and rules live at publish time, exactly once each. An optional TCP
front-end speaks newline-delimited JSON frames.
"""

from __future__ import annotations

import decimal
import json
import logging
import re
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from queue import Empty, Queue
from typing import Callable, Optional

log = logging.getLogger(__name__)

DEADLETTER_TOPIC = "iotsensors/deadletter"


class TopicError(ValueError):
    """Malformed topic or filter pattern."""


class AuthorizationError(PermissionError):
    """Device policy does not permit the topic or filter."""


class RuleError(ValueError):
    """Malformed rule query or action list."""


class TransformError(ValueError):
    """Payload could not be transformed (not a JSON object)."""


def split_topic(topic: str) -> list[str]:
    if not topic:
        raise TopicError("topic must be non-empty")
    segments = topic.split("/")
    if any(seg == "" for seg in segments):
        raise TopicError(f"empty segment in topic {topic!r}")
    return segments


def validate_publish_topic(topic: str) -> list[str]:
    segments = split_topic(topic)
    for seg in segments:
        if "+" in seg or "#" in seg:
            raise TopicError(f"wildcard in published topic {topic!r}")
    return segments


@dataclass(frozen=True)
class TopicFilter:
    """Subscription pattern: '+' matches one level, a terminal '#' matches
    the remaining levels (including none)."""

    pattern: str
    segments: tuple[str, ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        segments = split_topic(self.pattern)
        for i, seg in enumerate(segments):
            if seg == "#":
                if i != len(segments) - 1:
                    raise TopicError(f"'#' must be terminal in {self.pattern!r}")
            elif seg == "+":
                continue
            elif "+" in seg or "#" in seg:
                raise TopicError(f"wildcard must stand alone in segment {seg!r}")
        object.__setattr__(self, "segments", tuple(segments))

    def matches(self, topic: str) -> bool:
        return topic_matches(self, topic)

    def covers(self, other: "TopicFilter") -> bool:
        """True if every topic matched by ``other`` is matched by this
        filter; used for policy checks on subscription requests."""
        return _covers(list(self.segments), list(other.segments))


def topic_matches(filter: TopicFilter, topic: str) -> bool:
    """Standard wildcard unification of a published topic against a filter.

    'a/#' also matches its parent level 'a'.
    """
    topic_segs = validate_publish_topic(topic)
    fsegs = filter.segments
    for i, fseg in enumerate(fsegs):
        if fseg == "#":
            return True  # matches the remaining levels, including none
        if i >= len(topic_segs):
            return False
        if fseg != "+" and fseg != topic_segs[i]:
            return False
    return len(fsegs) == len(topic_segs)


def _covers(pat: list[str], sub: list[str]) -> bool:
    if pat and pat[0] == "#":
        return True
    if not pat or not sub:
        return not pat and not sub
    if sub[0] == "#":
        return False  # requested filter is broader
    if pat[0] == "+" or pat[0] == sub[0]:
        return _covers(pat[1:], sub[1:])
    return False


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    published_at: int  # epoch ms

    def payload_json(self) -> dict:
        obj = json.loads(self.payload.decode("utf-8"))
        if not isinstance(obj, dict):
            raise TransformError("payload is not a JSON object")
        return obj


@dataclass(frozen=True)
class DevicePolicy:
    device_id: str
    allowed_filter: TopicFilter


_RULE_QUERY = re.compile(r"^\s*SELECT\s+\*\s+FROM\s+'([^']+)'\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class TopicRule:
    """Routing rule: a filter query plus an ordered list of action names."""

    name: str
    query: str
    actions: tuple[str, ...]
    filter: TopicFilter = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        m = _RULE_QUERY.match(self.query)
        if not m:
            raise RuleError(f"rule query must be SELECT * FROM '<topic>', got {self.query!r}")
        object.__setattr__(self, "filter", TopicFilter(m.group(1)))
        if not self.actions:
            raise RuleError(f"rule {self.name!r} needs at least one action")


@dataclass
class AuditEvent:
    kind: str  # publish_denied | subscribe_denied | action_error
    device_id: str
    detail: str
    at_ms: int


class Subscription:
    """Handle yielding matching messages in publish order."""

    def __init__(self, bus: "MessageBus", device_id: str, filter: TopicFilter):
        self.device_id = device_id
        self.filter = filter
        self._bus = bus
        self._queue: Queue[Message] = Queue()
        self._open = True

    def get(self, timeout: Optional[float] = None) -> Optional[Message]:
        """Next message, or None if the timeout elapses."""
        try:
            return self._queue.get(timeout=timeout)
        except Empty:
            return None

    def drain(self) -> list[Message]:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except Empty:
                return out

    def unsubscribe(self) -> None:
        self._open = False
        self._bus._remove_subscription(self)


class MessageBus:
    """In-process broker with device policies and a rules engine.

    Rule actions run on a worker pool, at most once per (rule, message);
    the default single worker keeps replay deterministic. Publishing is
    serialized, so every subscriber sees messages in publish order.
    """

    def __init__(self, rule_workers: int = 1, now_ms: Callable[[], int] | None = None):
        self._now_ms = now_ms or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._subs: list[Subscription] = []
        self._rules: list[TopicRule] = []
        self._actions: dict[str, Callable[[Message], None]] = {}
        self._policies: dict[str, DevicePolicy] = {}
        self._pool = ThreadPoolExecutor(max_workers=rule_workers, thread_name_prefix="bus-rule")
        self._pending = 0
        self._idle = threading.Condition()
        self.audit_log: list[AuditEvent] = []
        self._closed = False

    # -- configuration ----------------------------------------------------

    def register_device(self, policy: DevicePolicy) -> None:
        with self._lock:
            self._policies[policy.device_id] = policy

    def register_action(self, name: str, handler: Callable[[Message], None]) -> None:
        with self._lock:
            self._actions[name] = handler

    def add_rule(self, rule: TopicRule) -> None:
        with self._lock:
            missing = [a for a in rule.actions if a not in self._actions]
            if missing:
                raise RuleError(f"rule {rule.name!r} references unknown actions {missing}")
            self._rules.append(rule)

    # -- policy -----------------------------------------------------------

    def _policy_for(self, device_id: str) -> DevicePolicy:
        policy = self._policies.get(device_id)
        if policy is None:
            raise AuthorizationError(f"unknown device {device_id!r}")
        return policy

    # -- core operations ---------------------------------------------------

    def publish(self, device_id: str, topic: str, payload: bytes | str | dict) -> int:
        """Deliver to each live matching subscription and fire matching
        rules once. Returns how many subscribers were notified."""
        if isinstance(payload, dict):
            payload = json.dumps(payload).encode("utf-8")
        elif isinstance(payload, str):
            payload = payload.encode("utf-8")
        validate_publish_topic(topic)

        with self._lock:
            if self._closed:
                raise RuntimeError("bus is closed")
            try:
                policy = self._policy_for(device_id)
                if not policy.allowed_filter.matches(topic):
                    raise AuthorizationError(
                        f"device {device_id!r} may not publish to {topic!r}"
                    )
            except AuthorizationError as exc:
                self.audit_log.append(
                    AuditEvent("publish_denied", device_id, str(exc), self._now_ms())
                )
                raise

            message = Message(topic=topic, payload=payload, published_at=self._now_ms())
            delivered = 0
            for sub in self._subs:
                if sub._open and sub.filter.matches(topic):
                    sub._queue.put(message)
                    delivered += 1
            for rule in self._rules:
                if rule.filter.matches(topic):
                    self._submit_rule(rule, message)
        return delivered

    def subscribe(self, device_id: str, pattern: str | TopicFilter) -> Subscription:
        filter = pattern if isinstance(pattern, TopicFilter) else TopicFilter(pattern)
        with self._lock:
            try:
                policy = self._policy_for(device_id)
                if not policy.allowed_filter.covers(filter):
                    raise AuthorizationError(
                        f"device {device_id!r} may not subscribe to {filter.pattern!r}"
                    )
            except AuthorizationError as exc:
                self.audit_log.append(
                    AuditEvent("subscribe_denied", device_id, str(exc), self._now_ms())
                )
                raise
            sub = Subscription(self, device_id, filter)
            self._subs.append(sub)
            return sub

    def _remove_subscription(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    # -- rules engine -------------------------------------------------------

    def _submit_rule(self, rule: TopicRule, message: Message) -> None:
        with self._idle:
            self._pending += 1
        self._pool.submit(self._run_rule, rule, message)

    def _run_rule(self, rule: TopicRule, message: Message) -> None:
        try:
            for action_name in rule.actions:
                handler = self._actions.get(action_name)
                if handler is None:
                    continue
                try:
                    handler(message)
                except Exception as exc:  # isolate actions from each other
                    log.warning("rule %s action %s failed: %s", rule.name, action_name, exc)
                    self.audit_log.append(
                        AuditEvent(
                            "action_error",
                            rule.name,
                            f"{action_name}: {exc}",
                            self._now_ms(),
                        )
                    )
        finally:
            with self._idle:
                self._pending -= 1
                if self._pending == 0:
                    self._idle.notify_all()

    def drain(self, timeout: float = 30.0) -> None:
        """Block until all queued rule actions have completed."""
        deadline = time.monotonic() + timeout
        with self._idle:
            while self._pending > 0:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("rule actions still pending")
                self._idle.wait(remaining)

    def close(self) -> None:
        with self._lock:
            self._closed = True
        self._pool.shutdown(wait=True)


# -- payload transform ------------------------------------------------------

_QUANTUM = decimal.Decimal("0.001")


def _round_value(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return value  # already exact at 3 decimals
    if isinstance(value, float):
        with decimal.localcontext() as ctx:
            ctx.prec = 400  # room for the widest doubles
            quantized = decimal.Decimal(repr(value)).quantize(
                _QUANTUM, rounding=decimal.ROUND_HALF_UP
            )
        return float(quantized)
    if isinstance(value, list):
        return [_round_value(v) for v in value]
    if isinstance(value, dict):
        return {k: _round_value(v) for k, v in value.items()}
    return value


def _reject_constant(name: str):
    raise TransformError(f"non-finite number {name!r} in payload")


def round_transform(payload: bytes | str | dict) -> dict:
    """Round every numeric field to 3 decimal places, half away from zero.

    Non-numeric fields pass through unchanged and field order is kept.
    """
    if isinstance(payload, dict):
        obj = payload
    else:
        try:
            if isinstance(payload, bytes):
                payload = payload.decode("utf-8", errors="strict")
            obj = json.loads(payload, parse_constant=_reject_constant)
        except (json.JSONDecodeError, UnicodeDecodeError, TransformError) as exc:
            raise TransformError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise TransformError("payload is not a JSON object")
    return {k: _round_value(v) for k, v in obj.items()}


# -- TCP front-end ------------------------------------------------------------


class BusTcpServer:
    """Newline-delimited JSON front-end for the in-process bus.

    Frames: {"op": "pub", "topic": t, "payload": v} publishes;
    {"op": "sub", "topic": f} subscribes, after which matching messages
    arrive as {"op": "msg", "topic": t, "payload": v} lines. Frames may set
    "device" to pick the policy identity (default "tcp").
    """

    def __init__(self, bus: MessageBus, host: str = "127.0.0.1", port: int = 0):
        self.bus = bus
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                subs: list[Subscription] = []
                stop = threading.Event()
                write_lock = threading.Lock()  # pump threads share the socket

                def send(frame: dict) -> None:
                    data = (json.dumps(frame) + "\n").encode("utf-8")
                    with write_lock:
                        self.wfile.write(data)

                def pump(sub: Subscription) -> None:
                    while not stop.is_set():
                        msg = sub.get(timeout=0.2)
                        if msg is None:
                            continue
                        try:
                            payload = json.loads(msg.payload.decode("utf-8"))
                        except (json.JSONDecodeError, UnicodeDecodeError):
                            payload = msg.payload.decode("utf-8", errors="replace")
                        try:
                            send({"op": "msg", "topic": msg.topic, "payload": payload})
                        except OSError:
                            return

                try:
                    for raw in self.rfile:
                        line = raw.strip()
                        if not line:
                            continue
                        try:
                            frame = json.loads(line)
                            device = frame.get("device", "tcp")
                            op = frame.get("op")
                            if op == "pub":
                                n = outer.bus.publish(
                                    device, frame["topic"], json.dumps(frame.get("payload"))
                                )
                                reply = {"ok": True, "op": "pub", "delivered": n}
                            elif op == "sub":
                                sub = outer.bus.subscribe(device, frame["topic"])
                                subs.append(sub)
                                threading.Thread(target=pump, args=(sub,), daemon=True).start()
                                reply = {"ok": True, "op": "sub", "topic": frame["topic"]}
                            else:
                                reply = {"error": f"unknown op {op!r}"}
                        except (KeyError, TypeError, ValueError, AuthorizationError) as exc:
                            reply = {"error": str(exc)}
                        send(reply)
                finally:
                    stop.set()
                    for sub in subs:
                        sub.unsubscribe()

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
