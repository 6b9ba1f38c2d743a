"""Streaming ETL: JSON schema inference, the ERB columnar batch format,
a buffering stream writer, and a filesystem-backed object store.

ERB layout (all little-endian):

    magic "ERB1" | u32 schema-JSON length | schema JSON (UTF-8)
    | u64 row_count | per schema field, in order:
        null bitmap, ceil(rows/8) bytes, bit j of byte j//8 set when row j
        is present (LSB first)
        double/int64 columns: rows * 8 bytes (f64/i64), nulls written as 0
        string columns: (rows+1) u32 offsets starting at 0, then
        offsets[-1] bytes of UTF-8 data

Identical (schema, records) input produces byte-identical output.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

log = logging.getLogger(__name__)

ERB_MAGIC = b"ERB1"
FIELD_TYPES = ("double", "int64", "string")


class SchemaConflictError(ValueError):
    """The same field was seen with incompatible types."""


class EncodeError(ValueError):
    """A record does not conform to the batch schema."""


class FormatError(ValueError):
    """Malformed ERB bytes."""

    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class NotFoundError(KeyError):
    """Requested object key does not exist."""


@dataclass(frozen=True)
class Schema:
    """Ordered (name, type) field list; types: double, int64, string."""

    fields: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple((str(n), str(t)) for n, t in self.fields))
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("schema field names must be unique")
        for name, ftype in self.fields:
            if not name:
                raise ValueError("schema field names must be non-empty")
            if ftype not in FIELD_TYPES:
                raise ValueError(f"unknown field type {ftype!r}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    def to_json(self) -> str:
        return json.dumps(
            {"fields": [{"name": n, "type": t} for n, t in self.fields]},
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        doc = json.loads(text)
        return cls(tuple((f["name"], f["type"]) for f in doc["fields"]))


def infer_schema(samples: Sequence[dict]) -> Schema:
    """Crawl sample objects: union of fields in first-seen order.

    A field carrying any floating-point value is double; all-integer
    fields are int64; strings stay strings. A field mixing strings and
    numbers is a conflict.
    """
    if not samples:
        raise ValueError("need at least one sample object")
    types: dict[str, Optional[str]] = {}
    for obj in samples:
        if not isinstance(obj, dict):
            raise ValueError("samples must be JSON objects")
        for name, value in obj.items():
            observed: Optional[str]
            if value is None:
                observed = None
            elif isinstance(value, bool):
                raise SchemaConflictError(f"unsupported boolean value in field {name!r}")
            elif isinstance(value, float):
                observed = "double"
            elif isinstance(value, int):
                observed = "int64"
            elif isinstance(value, str):
                observed = "string"
            else:
                raise SchemaConflictError(
                    f"unsupported value type {type(value).__name__} in field {name!r}"
                )
            if name not in types:
                types[name] = observed
                continue
            current = types[name]
            if observed is None or observed == current:
                continue
            if current is None:
                types[name] = observed
            elif {current, observed} == {"double", "int64"}:
                types[name] = "double"  # widen
            else:
                raise SchemaConflictError(
                    f"field {name!r} seen as both {current} and {observed}"
                )
    # fields never carrying a value decode as strings
    return Schema(tuple((n, t or "string") for n, t in types.items()))


def _coerce(value, ftype: str, row: int, name: str):
    if value is None:
        return None
    if isinstance(value, bool):
        raise EncodeError(f"row {row}: boolean not storable in field {name!r}")
    if ftype == "double":
        if isinstance(value, (int, float)):
            return float(value)
    elif ftype == "int64":
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif ftype == "string":
        if isinstance(value, str):
            return value
    raise EncodeError(
        f"row {row}: value {value!r} does not fit {ftype} field {name!r}"
    )


def encode_batch(schema: Schema, records: Sequence[dict]) -> bytes:
    """Serialize records column by column into a self-describing ERB blob."""
    names = set(schema.names)
    for row, rec in enumerate(records):
        extra = set(rec) - names
        if extra:
            raise EncodeError(f"row {row}: fields {sorted(extra)} not in schema")

    out = bytearray()
    out += ERB_MAGIC
    schema_json = schema.to_json().encode("utf-8")
    out += struct.pack("<I", len(schema_json))
    out += schema_json
    rows = len(records)
    out += struct.pack("<Q", rows)

    for name, ftype in schema.fields:
        values = [_coerce(rec.get(name), ftype, i, name) for i, rec in enumerate(records)]
        bitmap = bytearray(math.ceil(rows / 8))
        for j, v in enumerate(values):
            if v is not None:
                bitmap[j // 8] |= 1 << (j % 8)
        out += bitmap
        if ftype == "double":
            out += struct.pack(f"<{rows}d", *[v if v is not None else 0.0 for v in values])
        elif ftype == "int64":
            try:
                out += struct.pack(f"<{rows}q", *[v if v is not None else 0 for v in values])
            except struct.error as exc:
                raise EncodeError(f"int64 overflow: {exc}") from exc
        else:
            data = bytearray()
            offsets = [0]
            for v in values:
                if v is not None:
                    data += v.encode("utf-8")
                offsets.append(len(data))
            out += struct.pack(f"<{rows + 1}I", *offsets)
            out += data
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def decode_batch(data: bytes) -> tuple[Schema, list[dict]]:
    """Exact inverse of encode_batch. Raises FormatError with the byte
    position on any corruption; never crashes on malformed input."""
    r = _Reader(data)
    if r.take(4, "magic") != ERB_MAGIC:
        raise FormatError("bad magic", 0)
    schema_len = r.u32("schema length")
    schema_bytes = r.take(schema_len, "schema JSON")
    try:
        schema = Schema.from_json(schema_bytes.decode("utf-8"))
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad schema JSON: {exc}", 8) from exc
    rows = r.u64("row count")
    # with fields present every row is backed by real bytes (take() guards
    # each read); a field-less schema needs an explicit cap to stop a tiny
    # hostile file from claiming billions of empty rows
    if not schema.fields and rows > 1 << 24:
        raise FormatError(f"row count {rows} implausible for empty schema", r.pos - 8)

    columns: dict[str, list] = {}
    for name, ftype in schema.fields:
        bitmap = r.take(math.ceil(rows / 8), f"null bitmap of {name!r}")
        present = [(bitmap[j // 8] >> (j % 8)) & 1 == 1 for j in range(rows)]
        if ftype == "double":
            raw = struct.unpack(f"<{rows}d", r.take(rows * 8, f"column {name!r}"))
            columns[name] = [v if p else None for v, p in zip(raw, present)]
        elif ftype == "int64":
            raw = struct.unpack(f"<{rows}q", r.take(rows * 8, f"column {name!r}"))
            columns[name] = [v if p else None for v, p in zip(raw, present)]
        else:
            start = r.pos
            offsets = struct.unpack(f"<{rows + 1}I", r.take((rows + 1) * 4, f"offsets of {name!r}"))
            if offsets[0] != 0 or any(a > b for a, b in zip(offsets, offsets[1:])):
                raise FormatError(f"non-monotone offsets in column {name!r}", start)
            blob = r.take(offsets[-1], f"string data of {name!r}")
            vals = []
            for j in range(rows):
                if not present[j]:
                    vals.append(None)
                    continue
                try:
                    vals.append(blob[offsets[j] : offsets[j + 1]].decode("utf-8"))
                except UnicodeDecodeError as exc:
                    raise FormatError(
                        f"invalid UTF-8 in column {name!r} row {j}", start
                    ) from exc
            columns[name] = vals
    if r.pos != len(data):
        raise FormatError("trailing bytes after batch", r.pos)

    records = []
    for j in range(rows):
        rec = {}
        for name, _ in schema.fields:
            value = columns[name][j]
            if value is not None:
                rec[name] = value
        records.append(rec)
    return schema, records


# -- object store -------------------------------------------------------------

_KEY_SEGMENT = re.compile(r"^[A-Za-z0-9._=-]+$")


def _validate_key(key: str) -> None:
    if not key:
        raise ValueError("empty object key")
    for seg in key.split("/"):
        if not _KEY_SEGMENT.match(seg) or seg in (".", ".."):
            raise ValueError(f"bad key segment {seg!r} in {key!r}")


class ObjectStore:
    """Filesystem bucket/key store with atomic writes.

    Puts go to a temp file renamed into place, so readers never observe a
    partial object. Listings come back in lexicographic key order.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, bucket: str, key: str) -> Path:
        _validate_key(bucket)
        _validate_key(key)
        return self.root / bucket / key

    def put(self, bucket: str, key: str, data: bytes) -> None:
        path = self._path(bucket, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def get(self, bucket: str, key: str) -> bytes:
        path = self._path(bucket, key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"{bucket}/{key}") from None

    def exists(self, bucket: str, key: str) -> bool:
        return self._path(bucket, key).is_file()

    def list(self, bucket: str, prefix: str = "") -> list[str]:
        base = self.root / bucket
        if not base.is_dir():
            return []
        keys = []
        for path in base.rglob("*"):
            if path.is_file() and not path.name.endswith(".tmp"):
                key = path.relative_to(base).as_posix()
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)


_PARTITION = re.compile(
    r"^year=(\d{4})/month=(\d{2})/day=(\d{2})/hour=(\d{2})/(?P<name>[^/]+)$"
)


@dataclass(frozen=True)
class ObjectKey:
    """Time-partitioned key: year=YYYY/month=MM/day=DD/hour=HH/<stream>-<seq>.erb"""

    bucket: str
    key: str

    def __post_init__(self) -> None:
        m = _PARTITION.match(self.key)
        if not m:
            raise ValueError(f"key {self.key!r} is not hive-partitioned")
        year, month, day, hour = (int(g) for g in m.groups()[:4])
        try:
            datetime(year, month, day, hour)
        except ValueError as exc:
            raise ValueError(f"key {self.key!r} has invalid timestamp: {exc}") from exc


def partitioned_key(stream: str, seq: int, epoch_ms: int) -> str:
    ts = datetime.fromtimestamp(epoch_ms / 1000, tz=timezone.utc)
    return (
        f"year={ts.year:04d}/month={ts.month:02d}/day={ts.day:02d}/hour={ts.hour:02d}/"
        f"{stream}-{seq:06d}.erb"
    )


_SEQ_IN_KEY = re.compile(r"-(\d{6,})\.erb$")


def stream_batch_keys(store: ObjectStore, bucket: str, stream: str) -> list[tuple[int, str]]:
    """All (seq, key) batches for a stream, seq-ordered and de-duplicated
    (first key wins if a sequence number somehow repeats)."""
    out: dict[int, str] = {}
    for key in store.list(bucket):
        name = key.rsplit("/", 1)[-1]
        if not name.startswith(f"{stream}-") or not name.endswith(".erb"):
            continue
        m = _SEQ_IN_KEY.search(name)
        if not m:
            continue
        seq = int(m.group(1))
        out.setdefault(seq, key)
    return sorted(out.items())


# -- buffering stream writer ---------------------------------------------------


@dataclass
class SpillBatch:
    stream: str
    seq: int
    records: list[dict]


class BufferedStreamWriter:
    """Buffers records and flushes encoded batches into the store.

    A flush happens when ``flush_rows`` accumulate or ``flush_interval_s``
    passes since the first buffered record. Store failures retry with
    bounded backoff, then spill to an NDJSON file so no acknowledged
    record is lost. One writer per stream; ``put`` is internally locked.
    """

    def __init__(
        self,
        store: ObjectStore,
        bucket: str,
        stream: str,
        schema: Optional[Schema] = None,
        flush_rows: int = 500,
        flush_interval_s: float = 60.0,
        retries: int = 3,
        backoff_s: float = 0.05,
        spill_dir: Optional[Path] = None,
        now_ms: Callable[[], int] | None = None,
        registry_store: Optional[ObjectStore] = None,
        registry_bucket: str = "artifacts",
    ):
        if not re.match(r"^[A-Za-z0-9][A-Za-z0-9_-]*$", stream):
            raise ValueError(f"stream name {stream!r} is not key-safe")
        self.store = store
        self.bucket = bucket
        self.stream = stream
        self.schema = schema
        self.flush_rows = flush_rows
        self.flush_interval_s = flush_interval_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.spill_dir = Path(spill_dir) if spill_dir else None
        self._now_ms = now_ms or (lambda: int(time.time() * 1000))
        self._registry_store = registry_store
        self._registry_bucket = registry_bucket
        self._lock = threading.Lock()
        self._buffer: list[dict] = []
        self._timer: Optional[threading.Timer] = None
        self._schema_persisted = False
        # resume past the highest stored sequence so keys never collide
        existing = stream_batch_keys(store, bucket, stream)
        self._seq = existing[-1][0] + 1 if existing else 0

    def put(self, record: dict) -> Optional[ObjectKey]:
        """Append one record; returns the written key when this put
        triggered a flush."""
        with self._lock:
            if self.schema is None:
                self.schema = infer_schema([record])
                self._persist_schema()
            # validate now so a bad record is rejected at put time
            for i, (name, ftype) in enumerate(self.schema.fields):
                _coerce(record.get(name), ftype, 0, name)
            unknown = set(record) - set(self.schema.names)
            if unknown:
                raise EncodeError(f"fields {sorted(unknown)} not in stream schema")
            self._buffer.append(record)
            if len(self._buffer) == 1:
                self._arm_timer()
            if len(self._buffer) >= self.flush_rows:
                return self._flush_locked()
            return None

    def flush(self) -> Optional[ObjectKey]:
        with self._lock:
            return self._flush_locked()

    def close(self) -> Optional[ObjectKey]:
        return self.flush()

    def _arm_timer(self) -> None:
        if self.flush_interval_s <= 0:
            return
        self._timer = threading.Timer(self.flush_interval_s, self.flush)
        self._timer.daemon = True
        self._timer.start()

    def _persist_schema(self) -> None:
        # registry metadata must never take a record down with it
        if self._registry_store is None or self.schema is None:
            self._schema_persisted = True
            return
        try:
            self._registry_store.put(
                self._registry_bucket,
                f"schemas/{self.stream}.json",
                self.schema.to_json().encode("utf-8"),
            )
            self._schema_persisted = True
        except OSError as exc:
            log.warning("schema registry write for %s failed, will retry: %s", self.stream, exc)
            self._schema_persisted = False

    def _flush_locked(self) -> Optional[ObjectKey]:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if not self._schema_persisted:
            self._persist_schema()
        if not self._buffer or self.schema is None:
            return None
        records, self._buffer = self._buffer, []
        seq = self._seq
        self._seq += 1
        data = encode_batch(self.schema, records)
        key = ObjectKey(self.bucket, partitioned_key(self.stream, seq, self._now_ms()))

        attempt = 0
        while True:
            try:
                self.store.put(key.bucket, key.key, data)
                return key
            except OSError as exc:
                attempt += 1
                if attempt > self.retries:
                    self._spill(SpillBatch(self.stream, seq, records), exc)
                    return None
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))

    def _spill(self, batch: SpillBatch, cause: Exception) -> None:
        if self.spill_dir is None:
            raise cause
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        line = json.dumps(
            {"stream": batch.stream, "seq": batch.seq, "records": batch.records}
        )
        with open(self.spill_dir / f"{self.stream}.spill.ndjson", "a", encoding="utf-8") as f:
            f.write(line + "\n")


def read_spill(path: str | Path) -> list[dict]:
    """Records recovered from a spill file, in write order."""
    records: list[dict] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.extend(json.loads(line)["records"])
    return records
