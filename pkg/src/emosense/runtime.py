"""Wires the pipeline together: sensor feed, bus rules, ETL streams,
model training jobs, endpoint registry, and detection sessions."""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import bus as busmod
from .bus import DEADLETTER_TOPIC, DevicePolicy, Message, MessageBus, TopicFilter, TopicRule, round_transform
from .config import Config
from .etl import BufferedStreamWriter, ObjectStore
from .inference import (
    INFER_TOPIC,
    RESULT_TOPIC,
    InferenceSession,
    RecommendationTable,
    SessionStore,
    SessionTimeoutError,
    fanout,
    latency_stats,
)
from .learn import (
    EndpointRegistry,
    EndpointNotFoundError,
    Hyperparams,
    Dataset,
    assemble_dataset,
    evaluate,
    model_from_json,
    model_to_json,
    smote_balance,
    stream_name,
    train_with_history,
)
from .metrics import EvalReport
from .sensors import EmotionRegime

log = logging.getLogger(__name__)

TRAIN_TOPIC = "iotsensors/train"
SYSTEM_DEVICE = "system"


class DemoFeed:
    """Per-session simulated sensor source pinned to one emotion regime."""

    def __init__(self, regime: EmotionRegime, seed: int):
        self.regime = regime
        self._rng = np.random.default_rng(seed)

    def sample(self) -> tuple[float, float]:
        gsr = max(0.0, float(self._rng.normal(self.regime.gsr_mean, self.regime.gsr_std)))
        bpm = float(np.clip(self._rng.normal(self.regime.bpm_mean, self.regime.bpm_std), 30.0, 240.0))
        return gsr, bpm


class Runtime:
    """One process-wide instance owning the bus, store, and registry."""

    def __init__(
        self,
        cfg: Config,
        sleep: Callable[[float], None] = time.sleep,
        store: Optional[ObjectStore] = None,
    ):
        self.cfg = cfg
        self._sleep = sleep
        self.store = store if store is not None else ObjectStore(cfg.store_root)
        self.bus = MessageBus(rule_workers=cfg.rule_workers)
        self.registry = EndpointRegistry()
        self.sessions = SessionStore()
        self.recommender = RecommendationTable(cfg.recommendations)
        self.sinks = list(cfg.sinks)
        self.sink_stats = {"delivered": 0, "failed": 0}
        self._streams: dict[str, BufferedStreamWriter] = {}
        self._streams_lock = threading.Lock()
        self._session_counter = 0
        self._feed_seeds: dict[str, int] = {}
        self._tcp: Optional[busmod.BusTcpServer] = None

        self.bus.register_device(DevicePolicy(SYSTEM_DEVICE, TopicFilter("#")))
        self.bus.register_device(DevicePolicy(cfg.device_id, TopicFilter(cfg.policy_prefix)))
        self.bus.register_action("round-and-forward-to-etl", self._on_train_message)
        self.bus.register_action("store-raw", self._store_raw_infer_request)
        self.bus.register_action("trigger-inference", self._on_infer_message)
        self.bus.add_rule(
            TopicRule("train_rule", f"SELECT * FROM '{TRAIN_TOPIC}'", ["round-and-forward-to-etl"])
        )
        self.bus.add_rule(
            TopicRule("infer_rule", f"SELECT * FROM '{INFER_TOPIC}'", ["store-raw", "trigger-inference"])
        )
        for policy in cfg.extra_policies:
            self.bus.register_device(policy)
        for rule in cfg.extra_rules:
            self.bus.add_rule(rule)
        self._load_models()

    # -- lifecycle ---------------------------------------------------------

    def start_tcp(self) -> Optional[tuple[str, int]]:
        if self.cfg.tcp_host is None:
            return None
        self._tcp = busmod.BusTcpServer(self.bus, self.cfg.tcp_host, self.cfg.tcp_port)
        self.bus.register_device(DevicePolicy("tcp", TopicFilter(self.cfg.policy_prefix)))
        self._tcp.start()
        return self._tcp.address

    def close(self) -> None:
        try:
            self.bus.drain()
        except TimeoutError:
            log.warning("closing with rule actions still pending")
        if self._tcp is not None:
            self._tcp.stop()
        for stream in self._streams.values():
            stream.close()
        self.bus.close()

    # -- training-path plumbing ----------------------------------------------

    def _stream_for(self, participant_id: str) -> BufferedStreamWriter:
        name = stream_name(participant_id)
        with self._streams_lock:
            stream = self._streams.get(name)
            if stream is None:
                stream = BufferedStreamWriter(
                    self.store,
                    self.cfg.data_bucket,
                    name,
                    flush_rows=self.cfg.flush_rows,
                    flush_interval_s=self.cfg.flush_interval_s,
                    spill_dir=Path(self.cfg.store_root) / "spill",
                    registry_store=self.store,
                    registry_bucket=self.cfg.artifact_bucket,
                )
                self._streams[name] = stream
            return stream

    def _deadletter(self, payload: bytes, reason: str) -> None:
        log.warning("dead-lettering message: %s", reason)
        self.bus.publish(SYSTEM_DEVICE, DEADLETTER_TOPIC, payload)

    def _on_train_message(self, message: Message) -> None:
        try:
            rounded = round_transform(message.payload)
        except busmod.TransformError as exc:
            self._deadletter(message.payload, str(exc))
            return
        participant = rounded.get("Participant")
        if not isinstance(participant, str) or not participant:
            self._deadletter(message.payload, "record has no Participant field")
            return
        try:
            self._stream_for(participant).put(rounded)
        except ValueError as exc:
            self._deadletter(message.payload, f"etl rejected record: {exc}")

    def ingest(self, records: list[dict], flush: bool = True) -> int:
        """Replay records through the train topic; optionally barrier on
        the ETL finishing and flush partial batches."""
        for obj in records:
            self.bus.publish(self.cfg.device_id, TRAIN_TOPIC, obj)
        if flush:
            self.flush_streams()
        return len(records)

    def flush_streams(self) -> None:
        self.bus.drain()
        with self._streams_lock:
            streams = list(self._streams.values())
        for stream in streams:
            stream.flush()

    # -- training jobs ----------------------------------------------------------

    def train_participant(
        self,
        participant_id: str,
        hp: Optional[Hyperparams] = None,
        test_fraction: Optional[float] = None,
    ) -> EvalReport:
        """Assemble, balance, fit, evaluate, persist, and register."""
        hp = hp or self.cfg.hyperparams
        fraction = self.cfg.test_fraction if test_fraction is None else test_fraction
        dataset = assemble_dataset(
            self.store, self.cfg.data_bucket, participant_id, fraction, seed=hp.seed
        )
        X_train = dataset.features[dataset.train_idx]
        y_train = dataset.labels[dataset.train_idx]
        X_bal, y_bal = smote_balance(X_train, y_train, k=self.cfg.smote_k, seed=hp.seed)
        balanced = Dataset(
            participant_id=participant_id,
            features=X_bal,
            labels=y_bal,
            train_idx=np.arange(len(y_bal)),
            test_idx=np.array([], dtype=int),
        )
        model, losses = train_with_history(balanced, hp)
        report = evaluate(model, dataset.features[dataset.test_idx], dataset.labels[dataset.test_idx])
        train_report = evaluate(model, X_bal, y_bal)

        self.store.put(
            self.cfg.artifact_bucket,
            f"models/{participant_id}.json",
            model_to_json(model).encode("utf-8"),
        )
        # the held-out EvalReport is the document; training context rides along
        metrics_doc = dict(report.to_dict())
        metrics_doc.update(
            {
                "participant_id": participant_id,
                "trained_at": model.trained_at,
                "train_accuracy": train_report.accuracy,
                "rows": {
                    "total": int(len(dataset.labels)),
                    "train": int(len(dataset.train_idx)),
                    "train_after_smote": int(len(y_bal)),
                    "test": int(len(dataset.test_idx)),
                    "unlabeled_skipped": dataset.unlabeled_skipped,
                },
            }
        )
        self.store.put(
            self.cfg.artifact_bucket,
            f"metrics/{participant_id}.json",
            json.dumps(metrics_doc, indent=2).encode("utf-8"),
        )
        log_doc = {
            "participant_id": participant_id,
            "hyperparams": vars(hp),
            "epoch_losses": losses,
            "report": report.to_dict(),
        }
        self.store.put(
            self.cfg.artifact_bucket,
            f"logs/{participant_id}-{model.trained_at}.json",
            json.dumps(log_doc).encode("utf-8"),
        )
        self.registry.register(participant_id, model)
        return report

    def _load_models(self) -> None:
        for key in self.store.list(self.cfg.artifact_bucket, prefix="models/"):
            try:
                model = model_from_json(self.store.get(self.cfg.artifact_bucket, key).decode("utf-8"))
                self.registry.register(model.participant_id, model)
            except Exception as exc:
                log.warning("skipping stored model %s: %s", key, exc)

    def load_metrics(self, participant_id: str) -> Optional[dict]:
        key = f"metrics/{participant_id}.json"
        if not self.store.exists(self.cfg.artifact_bucket, key):
            return None
        return json.loads(self.store.get(self.cfg.artifact_bucket, key))

    # -- inference path ------------------------------------------------------------

    def _store_raw_infer_request(self, message: Message) -> None:
        try:
            obj = message.payload_json()
            session_id = obj.get("session_id") or uuid.uuid4().hex
        except (ValueError, busmod.TransformError):
            session_id = uuid.uuid4().hex
        self.store.put(self.cfg.data_bucket, f"infer/{session_id}.json", message.payload)

    def _on_infer_message(self, message: Message) -> None:
        """Classify the mean features and publish exactly one result."""
        try:
            obj = message.payload_json()
            session_id = obj["session_id"]
            participant = obj["participant"]
            gsr = float(obj["mean_gsr"])
            bpm = float(obj["mean_bpm"])
        except (KeyError, TypeError, ValueError, busmod.TransformError) as exc:
            self._deadletter(message.payload, f"bad infer request: {exc}")
            return

        result: dict
        try:
            label, probs = self.registry.invoke(participant, gsr, bpm)
            result = {
                "session_id": session_id,
                "label": label,
                "probabilities": [float(p) for p in probs],
            }
        except (EndpointNotFoundError, ValueError) as exc:
            result = {"session_id": session_id, "error": str(exc)}

        # result goes out before sinks so a slow sink cannot delay the UI
        self.bus.publish(SYSTEM_DEVICE, RESULT_TOPIC, result)
        if "label" in result:
            notification = {
                "label": result["label"],
                "participant": participant,
                "timestamp": int(time.time() * 1000),
            }
            report = fanout(notification, self.sinks)
            self.sink_stats["delivered"] += report.delivered
            self.sink_stats["failed"] += report.failed

    def new_session(
        self,
        participant_id: str,
        window_s: Optional[int] = None,
        regime_label: Optional[str] = None,
    ) -> InferenceSession:
        """Validate and record a pending session (the button press)."""
        window = window_s or self.cfg.window_s
        if not self.registry.exists(participant_id):
            raise EndpointNotFoundError(participant_id)
        label = regime_label or self.cfg.demo_regime
        regime = self.cfg.regimes.get(label)
        if regime is None:
            raise ValueError(f"unknown regime {label!r}; have {sorted(self.cfg.regimes)}")
        with self._streams_lock:
            self._session_counter += 1
            feed_seed = self.cfg.seed * 100_003 + self._session_counter
        session = InferenceSession(
            session_id=uuid.uuid4().hex[:12],
            participant_id=participant_id,
            window_s=window,
            t_trigger=int(time.time() * 1000),
            regime=regime.label,
        )
        self._feed_seeds[session.session_id] = feed_seed
        self.sessions.add(session)
        return session

    def run_session(
        self,
        participant_id: str,
        window_s: Optional[int] = None,
        regime_label: Optional[str] = None,
    ) -> InferenceSession:
        """Full detection loop: sense, aggregate, publish, await result."""
        return self.complete_session(self.new_session(participant_id, window_s, regime_label))

    def complete_session(self, session: InferenceSession) -> InferenceSession:
        """Drive a pending session to done/failed."""
        regime = self.cfg.regimes[session.regime]
        feed = DemoFeed(regime, self._feed_seeds.pop(session.session_id, self.cfg.seed))
        window = session.window_s
        gsrs: list[float] = []
        bpms: list[float] = []
        try:
            for _ in range(window):
                gsr, bpm = feed.sample()
                gsrs.append(gsr)
                bpms.append(bpm)
                self._sleep(self.cfg.session_tick_s)
            session.mean_gsr = sum(gsrs) / len(gsrs)
            session.mean_bpm = sum(bpms) / len(bpms)

            sub = self.bus.subscribe(self.cfg.device_id, RESULT_TOPIC)
            try:
                self.bus.publish(
                    self.cfg.device_id,
                    INFER_TOPIC,
                    {
                        "session_id": session.session_id,
                        "participant": session.participant_id,
                        "mean_gsr": session.mean_gsr,
                        "mean_bpm": session.mean_bpm,
                    },
                )
                deadline = time.monotonic() + self.cfg.result_timeout_s
                while True:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise SessionTimeoutError(
                            f"no result within {self.cfg.result_timeout_s}s"
                        )
                    msg = sub.get(timeout=remaining)
                    if msg is None:
                        continue
                    obj = json.loads(msg.payload.decode("utf-8"))
                    if obj.get("session_id") != session.session_id:
                        continue  # another concurrent session's result
                    if "error" in obj:
                        session.status = "failed"
                        session.error = obj["error"]
                    else:
                        session.predicted = obj["label"]
                        session.probabilities = obj["probabilities"]
                        session.recommendation = self.recommender.recommend(obj["label"])
                        session.status = "done"
                    session.t_result = int(time.time() * 1000)
                    return session
            finally:
                sub.unsubscribe()
        except Exception as exc:
            if session.status == "pending":
                session.status = "failed"
                session.error = str(exc)
            raise

    def latency(self, exclude_window: bool = False) -> dict[str, float]:
        done = [s for s in self.sessions.all() if s.status == "done"]
        return latency_stats(done, exclude_window=exclude_window)
