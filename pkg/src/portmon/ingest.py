"""Cloud side: subscribes to every sensor, stores series, answers detection
requests and hosts the remotely editable node parameters.

Storage is a directory of append-only logs::

    <root>/series/sensor<id>.log         received packets + bulk markers
    <root>/series/sensor<id>_info.jsonl  one info record per session
    <root>/config/sensor<id>.jsonl       parameter snapshots, one per version
    <root>/config/sensor<id>_verdicts.jsonl
    <root>/bulk/{ship|noship}/sensor<id>/<session_id>.csv (+ .json scene)

Opening a store on an existing directory replays the logs.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib import error as urlerror
from urllib import request as urlrequest
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import detection as det
from .telemetry import (
    DATA_SUBSCRIPTION,
    INFO_SUBSCRIPTION,
    N_COLS,
    BulkUpload,
    DataPacket,
    InfoRecord,
    LossReport,
    WireFormatError,
    csv_to_rows,
    reconcile,
)

log = logging.getLogger(__name__)

CONFIG_KEYS = frozenset(
    {
        "schedule_period_s",
        "sensing_s_noship",
        "sensing_s_ship",
        "distance_threshold_m",
        "rearm_margin_m",
        "cooldown_s",
        "gate_roi",
        "gate_area_min_frac",
        "gate_area_max_frac",
    }
)


def series_name(sensor_id: str) -> str:
    return f"sensor{sensor_id}"


# -- series store ---------------------------------------------------------------------


@dataclass
class _Session:
    packets: list[DataPacket] = field(default_factory=list)
    seqs: set[int] = field(default_factory=set)
    bulk: np.ndarray | None = None
    cache: np.ndarray | None = None


class SeriesStore:
    """Main (``sensor<id>``) and info (``sensor<id>_info``) series per sensor."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._sessions: dict[str, dict[str, _Session]] = defaultdict(dict)
        self._info: dict[str, dict[str, InfoRecord]] = defaultdict(dict)
        self._locks: dict[str, threading.RLock] = defaultdict(threading.RLock)
        self._guard = threading.Lock()
        if self.root is not None:
            (self.root / "series").mkdir(parents=True, exist_ok=True)
            self._replay()

    def _lock(self, sensor_id: str) -> threading.RLock:
        with self._guard:
            return self._locks[sensor_id]

    def _log_path(self, sensor_id: str) -> Path:
        return self.root / "series" / f"{series_name(sensor_id)}.log"

    def _info_path(self, sensor_id: str) -> Path:
        return self.root / "series" / f"{series_name(sensor_id)}_info.jsonl"

    def _append(self, path: Path, line: str) -> None:
        with path.open("a") as fh:
            fh.write(line + "\n")

    def _replay(self) -> None:
        for path in sorted((self.root / "series").glob("sensor*.log")):
            for line in path.read_text().splitlines():
                kind, _, body = line.partition(" ")
                if kind == "P":
                    self._add_packet(DataPacket.from_json(body))
                elif kind == "B":
                    sensor_id, session_id, rel = body.split(" ", 2)
                    rows = csv_to_rows((self.root / rel).read_text())
                    self._add_bulk(sensor_id, session_id, rows)
        for path in sorted((self.root / "series").glob("sensor*_info.jsonl")):
            for line in path.read_text().splitlines():
                rec = InfoRecord.from_json(line)
                self._info[rec.sensor_id][rec.session_id] = rec

    def _add_packet(self, packet: DataPacket) -> bool:
        ses = self._sessions[packet.sensor_id].setdefault(packet.session_id, _Session())
        if packet.seq in ses.seqs:
            return False
        ses.seqs.add(packet.seq)
        ses.packets.append(packet)
        ses.cache = None
        return True

    def _add_bulk(self, sensor_id: str, session_id: str, rows: np.ndarray) -> None:
        ses = self._sessions[sensor_id].setdefault(session_id, _Session())
        ses.bulk = rows
        ses.cache = None

    def add_packet(self, packet: DataPacket, raw: str | None = None) -> bool:
        """Store a packet; returns False for a duplicate ``(session, seq)``."""
        with self._lock(packet.sensor_id):
            fresh = self._add_packet(packet)
            if fresh and self.root is not None:
                self._append(self._log_path(packet.sensor_id), "P " + (raw if raw is not None else packet.to_json()))
            return fresh

    def add_bulk(self, sensor_id: str, session_id: str, rows: np.ndarray, rel_path: str | None = None) -> None:
        with self._lock(sensor_id):
            self._add_bulk(sensor_id, session_id, rows)
            if self.root is not None and rel_path is not None:
                self._append(self._log_path(sensor_id), f"B {sensor_id} {session_id} {rel_path}")

    def add_info(self, record: InfoRecord) -> bool:
        with self._lock(record.sensor_id):
            if record.session_id in self._info[record.sensor_id]:
                return False
            self._info[record.sensor_id][record.session_id] = record
            if self.root is not None:
                self._append(self._info_path(record.sensor_id), record.to_json())
            return True

    def has_bulk(self, sensor_id: str, session_id: str) -> bool:
        ses = self._sessions.get(sensor_id, {}).get(session_id)
        return ses is not None and ses.bulk is not None

    def sensors(self) -> list[str]:
        return sorted(set(self._sessions) | set(self._info))

    def sessions(self, sensor_id: str) -> list[str]:
        return sorted(self._sessions.get(sensor_id, {}))

    def session_rows(self, sensor_id: str, session_id: str) -> np.ndarray:
        rows, _ = self.session_report(sensor_id, session_id)
        return rows

    def session_report(self, sensor_id: str, session_id: str) -> tuple[np.ndarray, LossReport]:
        with self._lock(sensor_id):
            ses = self._sessions.get(sensor_id, {}).get(session_id)
            if ses is None:
                return np.zeros((0, N_COLS)), LossReport(session_id, "lost")
            rows, report = reconcile(session_id, ses.packets, ses.bulk)
            ses.cache = rows
            return rows, report

    def series(self, sensor_id: str) -> np.ndarray:
        with self._lock(sensor_id):
            parts = []
            for sid in self.sessions(sensor_id):
                ses = self._sessions[sensor_id][sid]
                parts.append(ses.cache if ses.cache is not None else self.session_rows(sensor_id, sid))
            if not parts:
                return np.zeros((0, N_COLS))
            rows = np.concatenate(parts)
            return rows[np.argsort(rows[:, 0], kind="stable")]

    def query(self, sensor_id: str, t_start: float = -np.inf, t_end: float = np.inf) -> np.ndarray:
        if t_end < t_start:
            raise ValueError("empty or inverted time range")
        rows = self.series(sensor_id)
        mask = (rows[:, 0] >= t_start) & (rows[:, 0] < t_end)
        return rows[mask]

    def info(self, sensor_id: str, t_start: float = -np.inf, t_end: float = np.inf) -> list[InfoRecord]:
        if t_end < t_start:
            raise ValueError("empty or inverted time range")
        recs = [r for r in self._info.get(sensor_id, {}).values() if t_start <= r.trigger_time < t_end]
        return sorted(recs, key=lambda r: r.trigger_time)


# -- config store -------------------------------------------------------------------------


class UnknownParameter(KeyError):
    pass


class ConfigStore:
    """Versioned parameter map per sensor. Version 0 is the empty map."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._versions: dict[str, list[dict[str, Any]]] = defaultdict(lambda: [{}])
        self._verdicts: dict[str, list[dict]] = defaultdict(list)
        self._lock = threading.Lock()
        if self.root is not None:
            (self.root / "config").mkdir(parents=True, exist_ok=True)
            for path in sorted((self.root / "config").glob("sensor*.jsonl")):
                if path.stem.endswith("_verdicts"):
                    continue
                sensor_id = path.stem[len("sensor"):]
                for line in path.read_text().splitlines():
                    doc = json.loads(line)
                    self._versions[sensor_id].append(doc["params"])

    def version(self, sensor_id: str) -> int:
        with self._lock:
            return len(self._versions[sensor_id]) - 1

    def set_config(self, sensor_id: str, updates: dict[str, Any]) -> int:
        unknown = set(updates) - CONFIG_KEYS
        if unknown:
            raise UnknownParameter(f"unknown parameter(s): {sorted(unknown)}")
        with self._lock:
            history = self._versions[sensor_id]
            params = dict(history[-1])
            params.update(updates)
            history.append(params)
            version = len(history) - 1
            if self.root is not None:
                with (self.root / "config" / f"{series_name(sensor_id)}.jsonl").open("a") as fh:
                    fh.write(json.dumps({"version": version, "params": params}, sort_keys=True) + "\n")
            return version

    def get_config(self, sensor_id: str, since_version: int = 0) -> tuple[dict[str, Any], int] | None:
        with self._lock:
            history = self._versions[sensor_id]
            version = len(history) - 1
            if version <= since_version:
                return None
            return dict(history[version]), version

    def params(self, sensor_id: str) -> dict[str, Any]:
        with self._lock:
            return dict(self._versions[sensor_id][-1])

    def record_verdict(self, sensor_id: str, session_id: str, verdict: dict) -> None:
        entry = {"session_id": session_id, **verdict}
        with self._lock:
            self._verdicts[sensor_id].append(entry)
            if self.root is not None:
                with (self.root / "config" / f"{series_name(sensor_id)}_verdicts.jsonl").open("a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def verdicts(self, sensor_id: str) -> list[dict]:
        with self._lock:
            return list(self._verdicts[sensor_id])


# -- detection endpoint payloads ---------------------------------------------------------------


@dataclass
class DetectionRequest:
    sensor_id: str
    session_id: str
    scene: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> "DetectionRequest":
        d = json.loads(text)
        return cls(str(d["sensor_id"]), str(d["session_id"]), d["scene"])


@dataclass
class DetectionResponse:
    ship_present: bool
    berthing: bool
    boxes: list[dict] = field(default_factory=list)
    latency_s: float = 0.0
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> "DetectionResponse":
        return cls(**json.loads(text))


class UploadRejected(ValueError):
    pass


# -- service ------------------------------------------------------------------------------------


class IngestService:
    """The server. Thread-safe; work for one sensor is serialized."""

    def __init__(
        self,
        root: str | Path | None = None,
        detector: det.DetectorNoise | None = None,
        gate: det.BerthingGate | None = None,
        presence_score: float = 0.5,
    ):
        self.root = Path(root) if root is not None else None
        self.store = SeriesStore(root)
        self.config = ConfigStore(root)
        self.detector = detector or det.DetectorNoise.perfect()
        self.gate = gate or det.BerthingGate()
        self.presence_score = presence_score
        self.malformed = 0
        self.uploads: dict[tuple[str, str], str] = {}

    # transport side

    def attach(self, transport) -> None:
        transport.subscribe(DATA_SUBSCRIPTION, self.on_data_message)
        transport.subscribe(INFO_SUBSCRIPTION, self.on_info_message)

    def on_data_message(self, topic: str, payload: bytes) -> None:
        text = payload.decode() if isinstance(payload, bytes) else payload
        try:
            packet = DataPacket.from_json(text)
        except WireFormatError as exc:
            self.malformed += 1
            log.warning("dropping malformed packet on %s: %s", topic, exc)
            return
        self.store.add_packet(packet, text)

    def on_info_message(self, topic: str, payload: bytes) -> None:
        try:
            record = InfoRecord.from_json(payload)
        except WireFormatError as exc:
            self.malformed += 1
            log.warning("dropping malformed info record on %s: %s", topic, exc)
            return
        self.store.add_info(record)

    def handle_packet(self, packet: DataPacket) -> bool:
        return self.store.add_packet(packet)

    def handle_info(self, record: InfoRecord) -> bool:
        return self.store.add_info(record)

    # request/response side

    def gate_for(self, sensor_id: str) -> det.BerthingGate:
        return det.BerthingGate.from_params(self.config.params(sensor_id), self.gate)

    def handle_detection(self, request: DetectionRequest) -> DetectionResponse:
        try:
            scene = det.AnnotationScene.from_dict(request.scene)
        except (KeyError, TypeError, ValueError) as exc:
            resp = DetectionResponse(False, False, [], 0.0, f"unparseable scene: {exc}")
            self.config.record_verdict(request.sensor_id, request.session_id, {"ship_present": False, "berthing": False, "error": resp.error})
            return resp
        found = [d for d in det.detect(scene, self.detector) if d.score >= self.presence_score]
        berthing, _ = det.classify_berthing(found, self.gate_for(request.sensor_id))
        boxes = [{"bbox": d.bbox.as_list(), "score": d.score, "label": d.label} for d in found]
        resp = DetectionResponse(bool(found), berthing, boxes, self.detector.latency_s)
        self.config.record_verdict(request.sensor_id, request.session_id, {"ship_present": resp.ship_present, "berthing": berthing})
        return resp

    def bulk_path(self, bulk: BulkUpload) -> Path:
        folder = "ship" if bulk.ship_present else "noship"
        return Path("bulk") / folder / series_name(bulk.sensor_id) / f"{bulk.session_id}.csv"

    def upload_session(self, bulk: BulkUpload) -> str:
        try:
            rows = csv_to_rows(bulk.csv)
        except WireFormatError as exc:
            raise UploadRejected(str(exc)) from None
        if len(rows) != bulk.row_count:
            raise UploadRejected(f"CSV has {len(rows)} rows, metadata says {bulk.row_count}")
        rel = self.bulk_path(bulk)
        if self.root is not None:
            path = self.root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(bulk.csv)
            if bulk.scene is not None:
                path.with_suffix(".json").write_text(bulk.scene)
        self.uploads[(bulk.sensor_id, bulk.session_id)] = str(rel)
        if not self.store.has_bulk(bulk.sensor_id, bulk.session_id):
            self.store.add_bulk(bulk.sensor_id, bulk.session_id, rows, str(rel) if self.root is not None else None)
        return str(rel)

    def set_config(self, sensor_id: str, updates: dict) -> int:
        return self.config.set_config(sensor_id, updates)

    def get_config(self, sensor_id: str, since_version: int = 0):
        return self.config.get_config(sensor_id, since_version)

    def query_series(self, sensor_id: str, t_start=-np.inf, t_end=np.inf) -> np.ndarray:
        return self.store.query(sensor_id, t_start, t_end)

    def query_info(self, sensor_id: str, t_start=-np.inf, t_end=np.inf) -> list[InfoRecord]:
        return self.store.info(sensor_id, t_start, t_end)


# -- clients used by nodes --------------------------------------------------------------------------


class LocalServerClient:
    """Direct in-process calls, with a switch to simulate an unreachable server."""

    def __init__(self, service: IngestService):
        self.service = service
        self.down = False

    def _check(self):
        if self.down:
            raise ConnectionError("server unreachable")

    def request_detection(self, request: DetectionRequest) -> DetectionResponse:
        self._check()
        return self.service.handle_detection(request)

    def upload(self, bulk: BulkUpload) -> str:
        self._check()
        return self.service.upload_session(bulk)

    def get_config(self, sensor_id: str, since_version: int):
        self._check()
        return self.service.get_config(sensor_id, since_version)


class HttpServerClient:
    """Talks to :func:`make_http_server` over HTTP."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout_s

    def _call(self, method: str, path: str, body: bytes | None = None, headers: dict | None = None):
        req = urlrequest.Request(self.base + path, data=body, method=method, headers=headers or {})
        try:
            with urlrequest.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urlerror.HTTPError as exc:
            return exc.code, exc.read()
        except urlerror.URLError as exc:
            raise ConnectionError(str(exc.reason)) from None

    def request_detection(self, request: DetectionRequest) -> DetectionResponse:
        status, body = self._call("POST", "/detect", request.to_json().encode(), {"Content-Type": "application/json"})
        if status != 200:
            raise ConnectionError(f"detection failed with HTTP {status}")
        return DetectionResponse.from_json(body)

    def upload(self, bulk: BulkUpload) -> str:
        headers = {
            "Content-Type": "text/csv",
            "X-Sensor-Id": bulk.sensor_id,
            "X-Session-Id": bulk.session_id,
            "X-Ship-Present": "1" if bulk.ship_present else "0",
            "X-Row-Count": str(bulk.row_count),
        }
        status, body = self._call("PUT", "/upload", bulk.csv.encode(), headers)
        if status == 400:
            raise UploadRejected(body.decode())
        if status != 200:
            raise ConnectionError(f"upload failed with HTTP {status}")
        return json.loads(body)["path"]

    def get_config(self, sensor_id: str, since_version: int):
        status, body = self._call("GET", f"/config/{sensor_id}?since={since_version}")
        if status == 204:
            return None
        if status != 200:
            raise ConnectionError(f"config poll failed with HTTP {status}")
        doc = json.loads(body)
        return doc["params"], doc["version"]

    def set_config(self, sensor_id: str, updates: dict) -> int:
        status, body = self._call("POST", f"/config/{sensor_id}", json.dumps(updates).encode(), {"Content-Type": "application/json"})
        if status == 400:
            raise UnknownParameter(body.decode())
        return json.loads(body)["version"]


def make_http_server(service: IngestService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Build (not start) the upload/detection/config HTTP server."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _reply(self, status: int, payload: Any = None):
            data = b"" if payload is None else (payload if isinstance(payload, bytes) else json.dumps(payload).encode())
            self.send_response(status)
            self.send_header("Content-Length", str(len(data)))
            if data:
                self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> bytes:
            return self.rfile.read(int(self.headers.get("Content-Length", 0)))

        def do_PUT(self):
            if self.path != "/upload":
                return self._reply(HTTPStatus.NOT_FOUND, {"error": "no such endpoint"})
            h = self.headers
            try:
                bulk = BulkUpload(
                    h["X-Sensor-Id"], h["X-Session-Id"], h.get("X-Ship-Present") == "1",
                    self._body().decode(), int(h["X-Row-Count"]),
                )
                rel = service.upload_session(bulk)
            except (UploadRejected, TypeError, ValueError) as exc:
                return self._reply(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
            self._reply(HTTPStatus.OK, {"path": rel})

        def do_POST(self):
            url = urlparse(self.path)
            if url.path == "/detect":
                try:
                    req = DetectionRequest.from_json(self._body())
                except (ValueError, KeyError) as exc:
                    return self._reply(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
                return self._reply(HTTPStatus.OK, asdict(service.handle_detection(req)))
            if url.path.startswith("/config/"):
                sensor_id = url.path[len("/config/"):]
                try:
                    version = service.set_config(sensor_id, json.loads(self._body()))
                except (UnknownParameter, ValueError) as exc:
                    return self._reply(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
                return self._reply(HTTPStatus.OK, {"version": version})
            self._reply(HTTPStatus.NOT_FOUND, {"error": "no such endpoint"})

        def do_GET(self):
            url = urlparse(self.path)
            if not url.path.startswith("/config/"):
                return self._reply(HTTPStatus.NOT_FOUND, {"error": "no such endpoint"})
            sensor_id = url.path[len("/config/"):]
            since = int(parse_qs(url.query).get("since", ["0"])[0])
            got = service.get_config(sensor_id, since)
            if got is None:
                return self._reply(HTTPStatus.NO_CONTENT)
            params, version = got
            self._reply(HTTPStatus.OK, {"params": params, "version": version})

    return ThreadingHTTPServer((host, port), Handler)
