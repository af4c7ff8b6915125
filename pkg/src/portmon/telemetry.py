"""Wire layer: packets, info records, bulk CSV, transports and reconciliation.

Two paths carry every session. Rows stream live in 5-row JSON packets on
``sensors/<id>/data``; after the session the full CSV is uploaded in one
request. Both use the same decimal text encoding (3 fractional digits for
time, 6 for values) so the server can compare them exactly.
"""

from __future__ import annotations

import io
import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol

import numpy as np

log = logging.getLogger(__name__)

ROWS_PER_PACKET = 5
CSV_HEADER = "t,ax_mg,ay_mg,az_mg,roll_deg,pitch_deg"
N_COLS = 6


def data_topic(sensor_id: str) -> str:
    return f"sensors/{sensor_id}/data"


def info_topic(sensor_id: str) -> str:
    return f"sensors/{sensor_id}/info"


DATA_SUBSCRIPTION = "sensors/+/data"
INFO_SUBSCRIPTION = "sensors/+/info"


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT wildcard match (``+`` one level, ``#`` the rest)."""
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return True
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)


def sensor_from_topic(topic: str) -> str:
    return topic.split("/")[1]


# -- row encoding ------------------------------------------------------------------


_ROW_FMT = "%.3f,%.6f,%.6f,%.6f,%.6f,%.6f"


def format_row(row) -> str:
    return _ROW_FMT % tuple(row)


def format_rows(rows: np.ndarray) -> list[str]:
    # tolist() yields Python floats, which format far faster than numpy scalars
    return [_ROW_FMT % tuple(r) for r in np.asarray(rows, dtype=float).reshape(-1, N_COLS).tolist()]


def quantize_rows(rows: np.ndarray) -> np.ndarray:
    """Round rows through the wire text encoding (what any receiver sees)."""
    rows = np.asarray(rows, dtype=float).reshape(-1, N_COLS)
    if len(rows) == 0:
        return rows.copy()
    text = "\n".join(format_rows(rows))
    return np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2)


def rows_to_csv(rows: np.ndarray) -> str:
    body = "".join(line + "\n" for line in format_rows(rows))
    return CSV_HEADER + "\n" + body


class WireFormatError(ValueError):
    pass


def csv_to_rows(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise WireFormatError("missing or wrong CSV header")
    if len(lines) == 1:
        return np.zeros((0, N_COLS))
    try:
        rows = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise WireFormatError(f"bad CSV body: {exc}") from None
    if rows.shape[1] != N_COLS:
        raise WireFormatError(f"expected {N_COLS} columns, got {rows.shape[1]}")
    return rows


# -- records -----------------------------------------------------------------------


@dataclass
class DataPacket:
    sensor_id: str
    session_id: str
    seq: int
    rows: np.ndarray
    final: bool = False

    @property
    def topic(self) -> str:
        return data_topic(self.sensor_id)

    def to_json(self) -> str:
        rows = ",".join("[" + line + "]" for line in format_rows(self.rows))
        fin = "true" if self.final else "false"
        return (
            f'{{"sid":{json.dumps(self.sensor_id)},"ses":{json.dumps(self.session_id)},'
            f'"seq":{self.seq},"fin":{fin},"rows":[{rows}]}}'
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "DataPacket":
        try:
            doc = json.loads(text)
            rows = np.array(doc["rows"], dtype=float).reshape(-1, N_COLS)
            packet = cls(str(doc["sid"]), str(doc["ses"]), int(doc["seq"]), rows, bool(doc["fin"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise WireFormatError(f"malformed packet: {exc}") from None
        n = len(packet.rows)
        if packet.seq < 0 or not 1 <= n <= ROWS_PER_PACKET or (n != ROWS_PER_PACKET and not packet.final):
            raise WireFormatError(f"packet violates row-count rules (seq={packet.seq}, rows={n})")
        return packet


@dataclass
class InfoRecord:
    sensor_id: str
    session_id: str
    trigger_time: float
    distance_m: float
    temperature_c: float
    trigger_type: str
    ship_present: bool

    @property
    def topic(self) -> str:
        return info_topic(self.sensor_id)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sid": self.sensor_id,
                "ses": self.session_id,
                "trigger_time": round(self.trigger_time, 3),
                "distance_m": round(self.distance_m, 3),
                "temperature_c": round(self.temperature_c, 3),
                "trigger_type": self.trigger_type,
                "ship_present": self.ship_present,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "InfoRecord":
        try:
            d = json.loads(text)
            return cls(str(d["sid"]), str(d["ses"]), float(d["trigger_time"]), float(d["distance_m"]),
                       float(d["temperature_c"]), str(d["trigger_type"]), bool(d["ship_present"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise WireFormatError(f"malformed info record: {exc}") from None


@dataclass
class BulkUpload:
    sensor_id: str
    session_id: str
    ship_present: bool
    csv: str
    row_count: int
    scene: str | None = None

    @classmethod
    def from_rows(cls, sensor_id, session_id, ship_present, rows, scene=None) -> "BulkUpload":
        return cls(sensor_id, session_id, ship_present, rows_to_csv(rows), len(rows), scene)


# -- packaging ------------------------------------------------------------------------


class Packager:
    """Groups a session's rows five at a time.

    The last group is held back until :meth:`finish` so the session always
    ends on a packet flagged ``final`` carrying 1-5 rows.
    """

    def __init__(self, sensor_id: str, session_id: str):
        self.sensor_id = sensor_id
        self.session_id = session_id
        self.seq = 0
        self._pending = np.zeros((0, N_COLS))

    def _emit(self, rows, final) -> DataPacket:
        p = DataPacket(self.sensor_id, self.session_id, self.seq, rows, final)
        self.seq += 1
        return p

    def push(self, rows: np.ndarray) -> list[DataPacket]:
        buf = np.concatenate([self._pending, np.asarray(rows, dtype=float).reshape(-1, N_COLS)])
        n_out = max(0, (len(buf) - 1) // ROWS_PER_PACKET)
        out = [self._emit(buf[i * ROWS_PER_PACKET:(i + 1) * ROWS_PER_PACKET], False) for i in range(n_out)]
        self._pending = buf[n_out * ROWS_PER_PACKET:]
        return out

    def finish(self) -> list[DataPacket]:
        if len(self._pending) == 0:
            return []
        p = self._emit(self._pending, True)
        self._pending = np.zeros((0, N_COLS))
        return [p]


def package_rows(rows: np.ndarray, sensor_id: str = "0", session_id: str = "") -> Iterator[DataPacket]:
    pk = Packager(sensor_id, session_id)
    yield from pk.push(rows)
    yield from pk.finish()


# -- transports ------------------------------------------------------------------------

Handler = Callable[[str, bytes], None]


class Transport(Protocol):
    def publish(self, topic: str, payload: str | bytes) -> bool: ...

    def subscribe(self, pattern: str, handler: Handler) -> None: ...


class LoopbackBroker:
    """In-process broker: synchronous, ordered, per-topic serialized delivery."""

    def __init__(self):
        self._subs: list[tuple[str, Handler]] = []
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        self.connected = True

    def subscribe(self, pattern: str, handler: Handler) -> None:
        with self._guard:
            self._subs.append((pattern, handler))

    def publish(self, topic: str, payload: str | bytes) -> bool:
        if not self.connected:
            return False
        data = payload.encode() if isinstance(payload, str) else payload
        with self._guard:
            lock = self._locks[topic]
            subs = [h for p, h in self._subs if topic_matches(p, topic)]
        with lock:
            for handler in subs:
                handler(topic, data)
        return True


class FaultyLink:
    """Wraps a transport with injected faults for one publisher.

    ``loss_rate`` drops messages silently (the publisher believes they
    went out); ``duplicate_rate`` delivers a message twice; ``down`` makes
    every publish fail visibly.
    """

    def __init__(self, inner, loss_rate: float = 0.0, duplicate_rate: float = 0.0, seed=0):
        self.inner = inner
        self.loss_rate = loss_rate
        self.duplicate_rate = duplicate_rate
        self.down = False
        self.rng = np.random.default_rng(seed)
        self.dropped = 0
        self.duplicated = 0

    def subscribe(self, pattern: str, handler: Handler) -> None:
        self.inner.subscribe(pattern, handler)

    def publish(self, topic: str, payload: str | bytes) -> bool:
        if self.down:
            return False
        if self.loss_rate and self.rng.random() < self.loss_rate:
            self.dropped += 1
            return True
        ok = self.inner.publish(topic, payload)
        if ok and self.duplicate_rate and self.rng.random() < self.duplicate_rate:
            self.duplicated += 1
            self.inner.publish(topic, payload)
        return ok


class MqttTransport:
    """Transport backed by an external MQTT broker (requires ``paho-mqtt``).

    QoS 1 gives at-least-once delivery; a single client connection keeps
    per-topic ordering.
    """

    def __init__(self, url: str, client_id: str = "", qos: int = 1):
        try:
            import paho.mqtt.client as mqtt
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise RuntimeError("the MQTT transport needs the 'paho-mqtt' package") from exc
        from urllib.parse import urlparse

        u = urlparse(url if "://" in url else f"mqtt://{url}")
        self.qos = qos
        self._handlers: list[tuple[str, Handler]] = []
        self.client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=client_id)
        self.client.on_message = self._on_message
        self.client.connect(u.hostname or "localhost", u.port or 1883)
        self.client.loop_start()

    def _on_message(self, client, userdata, msg):
        for pattern, handler in self._handlers:
            if topic_matches(pattern, msg.topic):
                handler(msg.topic, msg.payload)

    def subscribe(self, pattern: str, handler: Handler) -> None:
        self._handlers.append((pattern, handler))
        self.client.subscribe(pattern, qos=self.qos)

    def publish(self, topic: str, payload: str | bytes) -> bool:
        info = self.client.publish(topic, payload, qos=self.qos)
        return info.rc == 0

    def close(self) -> None:
        self.client.loop_stop()
        self.client.disconnect()


def publish(message: DataPacket | InfoRecord, transport) -> bool:
    """Send a packet or info record on its topic; ``False`` on transport failure."""
    try:
        return bool(transport.publish(message.topic, message.to_json()))
    except (ConnectionError, OSError) as exc:
        log.warning("publish on %s failed: %s", message.topic, exc)
        return False


# -- reconciliation --------------------------------------------------------------------------


@dataclass
class LossReport:
    session_id: str
    source: str  # "bulk", "stream" or "lost"
    missing_seqs: list[tuple[int, int]] = field(default_factory=list)
    duplicates: int = 0
    packets_received: int = 0

    @property
    def lost(self) -> bool:
        return self.source == "lost"


def _ranges(seqs: Iterable[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for s in sorted(seqs):
        if out and s == out[-1][1] + 1:
            out[-1] = (out[-1][0], s)
        else:
            out.append((s, s))
    return out


def reconcile(session_id: str, packets: Iterable[DataPacket], bulk_rows: np.ndarray | None) -> tuple[np.ndarray, LossReport]:
    """Merge the two delivery paths of one session.

    The bulk CSV wins whenever present. Without it the streamed packets are
    deduplicated by ``seq`` and concatenated in order. The report lists seq
    ranges that never arrived (inclusive bounds).
    """
    by_seq: dict[int, DataPacket] = {}
    dups = 0
    received = 0
    for p in packets:
        received += 1
        if p.seq in by_seq:
            dups += 1
            continue
        by_seq[p.seq] = p

    if bulk_rows is not None:
        expected = -(-len(bulk_rows) // ROWS_PER_PACKET)
    else:
        finals = [s for s, p in by_seq.items() if p.final]
        expected = (min(finals) + 1) if finals else (max(by_seq) + 1 if by_seq else 0)
        if not finals and by_seq:
            # the tail after the last packet seen is unknown; flag it open-ended
            expected += 1
    missing = _ranges(s for s in range(expected) if s not in by_seq)

    if bulk_rows is not None:
        rows = np.asarray(bulk_rows, dtype=float).reshape(-1, N_COLS)
        return rows, LossReport(session_id, "bulk", missing, dups, received)
    if not by_seq:
        return np.zeros((0, N_COLS)), LossReport(session_id, "lost", [], dups, received)
    rows = np.concatenate([by_seq[s].rows for s in sorted(by_seq)])
    return rows, LossReport(session_id, "stream", missing, dups, received)
