"""In-process orchestration: simulated world, K nodes, one server.

Each node runs in its own thread against the shared ingest service, so
the server sees interleaved traffic from all sensors exactly as it would
from independent devices. Everything a node produces is also kept as
ground truth for reconciliation checks.
"""

from __future__ import annotations

import csv
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import detection as det
from .ingest import IngestService, LocalServerClient, series_name
from .node import DETECTION_TIMEOUT_S, Node, NodeConfig, SensingSession, SimClock
from .sim import PortWorld, Scenario, ScenarioError
from .telemetry import FaultyLink, LoopbackBroker, MqttTransport, quantize_rows, rows_to_csv
from .trigger import TriggerConfig

log = logging.getLogger(__name__)


def trigger_config(scenario: Scenario) -> TriggerConfig:
    known = {f.name for f in fields(TriggerConfig)}
    unknown = set(scenario.node) - known
    if unknown:
        raise ScenarioError(f"unknown node parameters: {sorted(unknown)}")
    try:
        return TriggerConfig().updated(scenario.node)
    except ValueError as exc:
        raise ScenarioError(f"invalid node parameters: {exc}") from None


@dataclass
class RunResult:
    scenario: Scenario
    service: IngestService
    nodes: list[Node]
    links: list[FaultyLink]
    ground_truth: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    @property
    def sessions(self) -> list[SensingSession]:
        return sorted((s for n in self.nodes for s in n.sessions), key=lambda s: (s.sensor_id, s.start_t))

    def mismatches(self) -> list[tuple[str, str]]:
        """Sessions whose stored rows differ from what the node produced."""
        bad = []
        for (sensor_id, session_id), truth in sorted(self.ground_truth.items()):
            stored = self.service.store.session_rows(sensor_id, session_id)
            if stored.shape != truth.shape or not np.array_equal(stored, truth):
                bad.append((sensor_id, session_id))
        return bad


def run_system(
    scenario: Scenario,
    n_sensors: int = 1,
    loss_rate: float = 0.0,
    store_dir: str | Path | None = None,
    bulk: bool = True,
    compression: float | None = None,
    broker_url: str | None = None,
    detector: det.DetectorNoise | None = None,
    truth_dir: str | Path | None = None,
    node_config: NodeConfig | None = None,
) -> RunResult:
    """Run ``n_sensors`` nodes over the whole scenario and return the populated service.

    ``node_config``, when given, replaces the scenario's trigger parameters
    for every node; its ``sensor_id`` names the node when there is only one.
    """
    scenario.validate()
    if n_sensors < 1:
        raise ValueError("n_sensors must be >= 1")
    if not 0.0 <= loss_rate < 1.0:
        raise ValueError("loss_rate must be in [0, 1)")
    trig = node_config.trigger if node_config else trigger_config(scenario)
    timeout = node_config.detection_timeout_s if node_config else DETECTION_TIMEOUT_S
    bulk = bulk and (node_config.bulk_enabled if node_config else True)

    service = IngestService(store_dir, detector=detector)
    broker = MqttTransport(broker_url) if broker_url else LoopbackBroker()
    service.attach(broker)

    truth: dict[tuple[str, str], np.ndarray] = {}
    truth_lock = threading.Lock()
    truth_root = Path(truth_dir) if truth_dir is not None else None

    def sink(session: SensingSession, rows: np.ndarray) -> None:
        # what goes over the wire is the quantized text form
        q = quantize_rows(rows)
        with truth_lock:
            truth[(session.sensor_id, session.session_id)] = q
        if truth_root is not None:
            path = truth_root / series_name(session.sensor_id) / f"{session.session_id}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(rows_to_csv(rows))

    nodes, links = [], []
    for i in range(n_sensors):
        sensor_id = node_config.sensor_id if node_config and n_sensors == 1 else str(i + 1)
        link = FaultyLink(broker, loss_rate=loss_rate, seed=[scenario.seed, i])
        node = Node(
            NodeConfig(sensor_id, trigger=replace(trig), detection_timeout_s=timeout, bulk_enabled=bulk),
            PortWorld(scenario, sensor_index=i),
            link,
            LocalServerClient(service),
            clock=SimClock(compression),
            row_sink=sink,
        )
        nodes.append(node)
        links.append(link)

    with ThreadPoolExecutor(max_workers=n_sensors, thread_name_prefix="node") as pool:
        futures = [pool.submit(n.run, scenario.duration_s) for n in nodes]
        for f in futures:
            f.result()
    if broker_url:
        broker.close()
    for node in nodes:
        if node.pending_uploads:
            log.warning("sensor %s: %d uploads never delivered", node.sensor_id, len(node.pending_uploads))
    return RunResult(scenario, service, nodes, links, truth)


def write_session_log(result: RunResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sensor_id", "session_id", "start_t", "trigger", "ship_detected", "berthing",
                    "duration_s", "rows", "packets_sent", "packets_failed", "uploaded", "detection_timeout"])
        for s in result.sessions:
            w.writerow([s.sensor_id, s.session_id, f"{s.start_t:.3f}", s.trigger_kind.value, int(s.ship_detected),
                        int(s.ship_present), f"{s.duration_s:g}", s.row_count, s.packets_sent, s.packets_failed,
                        int(s.uploaded), int(s.detection_timeout)])


def write_event_log(result: RunResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sensor_id", "t", "trigger", "decision"])
        for node in result.nodes:
            for event, decision in node.events:
                w.writerow([node.sensor_id, f"{event.t:.3f}", event.kind.value, decision.value])
