"""Edge node control loop.

One cycle per accepted trigger::

    Rest -> Capturing -> AwaitingDetection -> Sensing -> Transmitting -> Rest

The node runs on a simulated clock. A cycle is computed synchronously,
block by block, while the clock (optionally paced against wall time)
advances over the session; triggers that arrive inside the session window
are suppressed.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsp
from .ingest import DetectionRequest, DetectionResponse, UploadRejected
from .sim import PortWorld
from .telemetry import BulkUpload, InfoRecord, Packager, publish
from .trigger import (
    Decision,
    DistanceDetector,
    DistanceReading,
    TriggerConfig,
    TriggerEvent,
    TriggerKind,
    arbitrate,
    schedule_next,
)

log = logging.getLogger(__name__)

# raw samples run through the FIR before a session's first kept row; a
# multiple of the decimation factor, longer than the filter memory
PREROLL_SAMPLES = 130
BLOCK_SAMPLES = 1000
DETECTION_TIMEOUT_S = 10.0


class NodeState(str, enum.Enum):
    REST = "Rest"
    CAPTURING = "Capturing"
    AWAITING_DETECTION = "AwaitingDetection"
    SENSING = "Sensing"
    TRANSMITTING = "Transmitting"


_NEXT = {
    NodeState.REST: NodeState.CAPTURING,
    NodeState.CAPTURING: NodeState.AWAITING_DETECTION,
    NodeState.AWAITING_DETECTION: NodeState.SENSING,
    NodeState.SENSING: NodeState.TRANSMITTING,
    NodeState.TRANSMITTING: NodeState.REST,
}


class SimClock:
    """Simulated seconds; with ``compression=k`` it sleeps so that ``k``
    simulated seconds take one wall second."""

    def __init__(self, compression: float | None = None, start: float = 0.0):
        self.compression = compression
        self.now = start
        self._origin_sim = start
        self._origin_wall = time.monotonic()

    def advance_to(self, t: float) -> None:
        if t < self.now:
            return
        self.now = t
        if self.compression:
            due = self._origin_wall + (t - self._origin_sim) / self.compression
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)


@dataclass
class NodeConfig:
    sensor_id: str
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    detection_timeout_s: float = DETECTION_TIMEOUT_S
    bulk_enabled: bool = True
    config_version: int = 0

    def __post_init__(self):
        if not self.sensor_id:
            raise ValueError("sensor_id must be non-empty")

    @classmethod
    def from_text(cls, text: str) -> "NodeConfig":
        """Parse ``key = value`` lines (``#`` comments allowed).

        Keys are ``sensor_id``, ``detection_timeout_s``, ``bulk_enabled`` and
        any :class:`TriggerConfig` field::

            sensor_id = 3
            schedule_period_s = 300
            distance_threshold_m = 30
        """
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {n}: expected 'key = value'")
            values[key.strip()] = value.strip()
        if "sensor_id" not in values:
            raise ValueError("node config needs a sensor_id")
        trigger_keys = {f.name for f in fields(TriggerConfig)}
        own = {"sensor_id", "detection_timeout_s", "bulk_enabled"}
        unknown = set(values) - trigger_keys - own
        if unknown:
            raise ValueError(f"unknown node config keys: {sorted(unknown)}")
        trigger = TriggerConfig().updated({k: v for k, v in values.items() if k in trigger_keys})
        return cls(
            sensor_id=values["sensor_id"],
            trigger=trigger,
            detection_timeout_s=float(values.get("detection_timeout_s", DETECTION_TIMEOUT_S)),
            bulk_enabled=values.get("bulk_enabled", "true").lower() in ("1", "true", "yes", "on"),
        )

    @classmethod
    def load(cls, path) -> "NodeConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class SensingSession:
    session_id: str
    sensor_id: str
    start_t: float
    trigger_kind: TriggerKind
    ship_present: bool
    duration_s: float
    temperature_c: float
    distance_m: float
    row_count: int = 0
    ship_detected: bool = False
    detection_timeout: bool = False
    scene_berthing: bool = False
    packets_sent: int = 0
    packets_failed: int = 0
    uploaded: bool = False


def session_id_for(sensor_id: str, start_t: float) -> str:
    return f"{sensor_id}-{start_t:011.3f}"


class Node:
    def __init__(
        self,
        config: NodeConfig,
        world: PortWorld,
        transport,
        server,
        clock: SimClock | None = None,
        row_sink: Callable[[SensingSession, np.ndarray], None] | None = None,
    ):
        self.config = config
        self.world = world
        self.transport = transport
        self.server = server
        self.clock = clock or SimClock()
        self.row_sink = row_sink
        self.detector = DistanceDetector(config.trigger)
        self.state = NodeState.REST
        self.transitions: list[NodeState] = [NodeState.REST]
        self.sessions: list[SensingSession] = []
        self.events: list[tuple[TriggerEvent, Decision]] = []
        self.readings: list[DistanceReading] = []
        self.pending_uploads: list[BulkUpload] = []
        self.busy_until = float("-inf")
        self._last_schedule_t = 0.0
        self.next_schedule_t = schedule_next(0.0, config.trigger.schedule_period_s)

    @property
    def sensor_id(self) -> str:
        return self.config.sensor_id

    def _enter(self, state: NodeState) -> None:
        if _NEXT[self.state] is not state:
            raise RuntimeError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state
        self.transitions.append(state)

    # -- control loop -------------------------------------------------------------

    def offer(self, event: TriggerEvent) -> Decision:
        decision = arbitrate(event, node_busy=event.t < self.busy_until)
        self.events.append((event, decision))
        if decision is Decision.ACCEPT:
            self.clock.advance_to(event.t)
            self.run_cycle(event)
            self.poll_remote_config()
        return decision

    def _fire_schedules(self, up_to: float) -> None:
        while self.next_schedule_t <= up_to:
            t = self.next_schedule_t
            self._last_schedule_t = t
            self.next_schedule_t = schedule_next(t, self.config.trigger.schedule_period_s)
            self.offer(TriggerEvent(t, TriggerKind.SCHEDULE))

    def run(self, until_t: float) -> list[SensingSession]:
        """Drive triggers for ``0 <= t < until_t`` (rangefinder at 1 Hz)."""
        t = 0.0
        while t < until_t:
            self._fire_schedules(t)
            reading = DistanceReading(t, self.world.gen_distance(t))
            self.readings.append(reading)
            event = self.detector.feed(reading)
            if event is not None:
                self.offer(event)
            t += 1.0
        self._fire_schedules(np.nextafter(until_t, -np.inf))
        self.retry_uploads()
        return self.sessions

    # -- one cycle -----------------------------------------------------------------

    def _detect(self, session_id: str, scene) -> tuple[DetectionResponse | None, bool]:
        req = DetectionRequest(self.sensor_id, session_id, scene.to_dict())
        try:
            resp = self.server.request_detection(req)
        except (ConnectionError, OSError) as exc:
            log.warning("%s: detection request failed: %s", session_id, exc)
            return None, True
        if resp.latency_s > self.config.detection_timeout_s:
            return None, True
        return resp, False

    def run_cycle(self, event: TriggerEvent) -> SensingSession:
        if self.state is not NodeState.REST:
            raise RuntimeError("run_cycle requires the node to be at rest")
        self.retry_uploads()
        trig = self.config.trigger
        start_t = event.t
        session_id = session_id_for(self.sensor_id, start_t)

        self._enter(NodeState.CAPTURING)
        scene, scene_berthing = self.world.gen_scene(start_t, scene_id=session_id)

        self._enter(NodeState.AWAITING_DETECTION)
        resp, timed_out = self._detect(session_id, scene)
        ship_detected = bool(resp and resp.ship_present)
        berthing = bool(resp and resp.berthing)
        duration = trig.sensing_s_ship if berthing else trig.sensing_s_noship

        self._enter(NodeState.SENSING)
        self.busy_until = start_t + duration
        session = SensingSession(
            session_id=session_id,
            sensor_id=self.sensor_id,
            start_t=start_t,
            trigger_kind=event.kind,
            ship_present=berthing,
            duration_s=duration,
            temperature_c=float(self.world.gen_temperature(start_t)),
            distance_m=self.world.gen_distance(start_t),
            ship_detected=ship_detected,
            detection_timeout=timed_out,
            scene_berthing=scene_berthing,
        )
        rows = self._sense(session)

        self._enter(NodeState.TRANSMITTING)
        info = InfoRecord(self.sensor_id, session_id, start_t, session.distance_m, session.temperature_c,
                          event.kind.value, berthing)
        if not publish(info, self.transport):
            log.warning("%s: info record not delivered", session_id)
        if self.row_sink is not None:
            self.row_sink(session, rows)
        if self.config.bulk_enabled:
            bulk = BulkUpload.from_rows(self.sensor_id, session_id, berthing, rows, scene.to_json())
            session.uploaded = self._upload(bulk)
            if not session.uploaded:
                self.pending_uploads.append(bulk)

        self._enter(NodeState.REST)
        self.sessions.append(session)
        return session

    def _sense(self, session: SensingSession) -> np.ndarray:
        chain = dsp.AcquisitionChain()
        k_start = int(round(session.start_t * dsp.RAW_RATE_HZ))
        k_end = k_start + int(round(session.duration_s * dsp.RAW_RATE_HZ))
        chain.prime(*self.world.gen_accel(k_start - PREROLL_SAMPLES, k_start))
        packager = Packager(self.sensor_id, session.session_id)
        parts = []
        for k in range(k_start, k_end, BLOCK_SAMPLES):
            t, acc = self.world.gen_accel(k, min(k + BLOCK_SAMPLES, k_end))
            rows = chain.process(t, acc)
            parts.append(rows)
            self._send(session, packager.push(rows))
            self.clock.advance_to(t[-1])
        self._send(session, packager.finish())
        rows = np.concatenate(parts) if parts else np.zeros((0, 6))
        session.row_count = len(rows)
        return rows

    def _send(self, session: SensingSession, packets) -> None:
        for p in packets:
            if publish(p, self.transport):
                session.packets_sent += 1
            else:
                session.packets_failed += 1

    def _upload(self, bulk: BulkUpload) -> bool:
        try:
            self.server.upload(bulk)
            return True
        except UploadRejected as exc:
            log.error("%s: upload rejected: %s", bulk.session_id, exc)
            return False
        except (ConnectionError, OSError) as exc:
            log.warning("%s: upload failed, will retry: %s", bulk.session_id, exc)
            return False

    def retry_uploads(self) -> None:
        pending, self.pending_uploads = self.pending_uploads, []
        for bulk in pending:
            if self._upload(bulk):
                for s in self.sessions:
                    if s.session_id == bulk.session_id:
                        s.uploaded = True
            else:
                self.pending_uploads.append(bulk)

    # -- remote parameters ----------------------------------------------------------

    def poll_remote_config(self) -> int:
        """Apply any newer parameter set from the server; returns the version in effect."""
        try:
            got = self.server.get_config(self.sensor_id, self.config.config_version)
        except (ConnectionError, OSError) as exc:
            log.info("config poll failed, keeping version %d: %s", self.config.config_version, exc)
            return self.config.config_version
        if got is None:
            return self.config.config_version
        params, version = got
        if version <= self.config.config_version:
            return self.config.config_version
        old_period = self.config.trigger.schedule_period_s
        self.config.trigger = self.config.trigger.updated(params)
        self.detector.config = self.config.trigger
        self.config.config_version = version
        if self.config.trigger.schedule_period_s != old_period:
            self.next_schedule_t = schedule_next(self._last_schedule_t, self.config.trigger.schedule_period_s)
        return version
