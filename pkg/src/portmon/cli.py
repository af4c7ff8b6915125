"""Command-line entry points.

    portmon simulate        ground truth of a scenario (timeline, ships, camera scenes)
    portmon run             end-to-end run: simulated world, K nodes, server
    portmon analyze         per-session amplitude / noise / tilt report from a store
    portmon eval-detection  AP of the stand-in detector on an annotated dataset
    portmon serve           HTTP server over a store directory

Everything written is CSV or JSON, ready for external plotting.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import detection as det
from .analysis import analyze, write_report
from .ingest import IngestService, SeriesStore, make_http_server
from .node import NodeConfig, session_id_for
from .runner import run_system, trigger_config, write_event_log, write_session_log
from .sim import PortWorld, Scenario, ScenarioError


class CliError(Exception):
    pass


def data_path(name: str) -> Path:
    """Path of a file or directory bundled under ``portmon/data``."""
    return Path(str(resources.files("portmon") / "data" / name))


def _load_scenario(path: str, seed: int | None) -> Scenario:
    scenario = Scenario.load(path)
    if seed is not None:
        scenario.seed = seed
    return scenario


# -- simulate ----------------------------------------------------------------------


def cmd_simulate(scenario_path: str, out_dir: str, seed: int | None = None) -> dict:
    scenario = _load_scenario(scenario_path, seed)
    trig = trigger_config(scenario)
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    scenario.dump(out / "scenario.json")
    world = PortWorld(scenario)

    t = np.arange(0.0, scenario.duration_s, 1.0)
    dist = np.array([world.gen_distance(x) for x in t])
    temp = world.gen_temperature(t)
    roll, pitch = world.gen_tilt_drift(t)
    with (out / "timeline.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "distance_m", "temp_c", "roll_drift_deg", "pitch_drift_deg"])
        for row in zip(t, dist, temp, roll, pitch):
            w.writerow([f"{row[0]:.3f}", f"{row[1]:.3f}", f"{row[2]:.4f}", f"{row[3]:.6f}", f"{row[4]:.6f}"])

    with (out / "ships.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ship", "appear_t", "berth_distance_m", "departs_t", "impact_t",
                    "impact_ax_mg", "impact_ay_mg", "impact_az_mg", "passing", "berthing"])
        for i, s in enumerate(scenario.ship_events):
            impact = "" if s.impact_t is None else f"{s.impact_t:.3f}"
            w.writerow([i, f"{s.appear_t:.3f}", f"{s.berth_distance_m:g}", f"{s.departs_t:.3f}", impact,
                        *(f"{a:g}" for a in s.impact_amp_mg), int(s.passing), int(not s.passing)])

    # camera frames at every schedule tick and at each threshold crossing
    times = set(np.arange(trig.schedule_period_s, scenario.duration_s, trig.schedule_period_s).tolist())
    below = dist <= trig.distance_threshold_m
    crossings = t[1:][below[1:] & ~below[:-1]]
    times.update(crossings.tolist())
    berthing_frames = 0
    with (out / "scenes.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "t", "boxes", "berthing"])
        for ts in sorted(times):
            scene, berthing = world.gen_scene(ts, scene_id=session_id_for("0", ts))
            (out / "scenes" / f"{scene.scene_id}.json").write_text(scene.to_json() + "\n")
            w.writerow([scene.scene_id, f"{ts:.3f}", len(scene.boxes), int(berthing)])
            berthing_frames += berthing
    return {
        "ships": len(scenario.ship_events),
        "berthing_ships": sum(not s.passing for s in scenario.ship_events),
        "scenes": len(times),
        "berthing_scenes": int(berthing_frames),
    }


# -- run ------------------------------------------------------------------------------


def cmd_run(
    scenario_path: str,
    out_dir: str,
    n_sensors: int = 1,
    loss_rate: float = 0.0,
    seed: int | None = None,
    broker_url: str | None = None,
    bulk: bool = True,
    compression: float | None = None,
    noise_path: str | None = None,
    node_config_path: str | None = None,
) -> dict:
    scenario = _load_scenario(scenario_path, seed)
    node_config = NodeConfig.load(node_config_path) if node_config_path else None
    detector = det.DetectorNoise.load(noise_path) if noise_path else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # a rerun replaces previous results rather than appending to the store logs
    for sub in ("store", "ground_truth", "analysis"):
        if (out / sub).exists():
            shutil.rmtree(out / sub)
    scenario.dump(out / "scenario.json")

    result = run_system(
        scenario,
        n_sensors=n_sensors,
        loss_rate=loss_rate,
        store_dir=out / "store",
        bulk=bulk,
        compression=compression,
        broker_url=broker_url,
        detector=detector,
        truth_dir=out / "ground_truth",
        node_config=node_config,
    )
    write_session_log(result, out / "sessions.csv")
    write_event_log(result, out / "events.csv")

    reports = {}
    for node in result.nodes:
        report = analyze(result.service.store, node.sensor_id)
        write_report(report, out / "analysis" / f"sensor{node.sensor_id}")
        reports[node.sensor_id] = report.summary()

    sessions = result.sessions
    summary = {
        "sensors": n_sensors,
        "sessions": len(sessions),
        "long_sessions": sum(s.ship_present for s in sessions),
        "short_sessions": sum(not s.ship_present for s in sessions),
        "packets_dropped": sum(link.dropped for link in result.links),
        "uploads_pending": sum(len(n.pending_uploads) for n in result.nodes),
        "mismatched_sessions": [f"{a}/{b}" for a, b in result.mismatches()],
        "analysis": reports,
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if summary["mismatched_sessions"]:
        raise CliError(f"{len(summary['mismatched_sessions'])} sessions stored incompletely; see {out / 'run.json'}")
    return summary


# -- analyze -------------------------------------------------------------------------------


def _store_root(path: str) -> Path:
    root = Path(path)
    if (root / "store" / "series").is_dir():
        return root / "store"
    if not (root / "series").is_dir():
        raise CliError(f"{root}: not a series store (no series/ directory)")
    return root


def cmd_analyze(store_dir: str, out_dir: str, sensor_id: str | None = None) -> dict:
    store = SeriesStore(_store_root(store_dir))
    sensors = [sensor_id] if sensor_id else store.sensors()
    out = Path(out_dir)
    summaries = {}
    for sid in sensors:
        report = analyze(store, sid)
        write_report(report, out if sensor_id else out / f"sensor{sid}")
        summaries[sid] = report.summary()
    return summaries


# -- detection evaluation --------------------------------------------------------------------


def cmd_eval_detection(dataset_dir: str, noise_path: str | None = None, out_dir: str | None = None) -> float:
    scenes = det.load_dataset(dataset_dir)
    noise = det.DetectorNoise.load(noise_path) if noise_path else det.DetectorNoise()
    ap, dets = det.evaluate(scenes, noise)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "pr_sweep.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for th, p, r in det.threshold_sweep(dets, det.ground_truth_index(scenes)):
                w.writerow([f"{th:.2f}", f"{p:.6f}", f"{r:.6f}"])
        with (out / "detections.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "score", "x_min", "y_min", "x_max", "y_max"])
            for d in det.rank_detections(dets):
                w.writerow([d.scene_id, f"{d.score:.6f}", *(f"{v:.2f}" for v in d.bbox.as_list())])
    return ap


# -- argument parsing ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="portmon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write scenario ground truth")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="end-to-end run in one process")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--sensors", type=int, default=1)
    r.add_argument("--loss", type=float, default=0.0, help="packet loss rate on each node link")
    r.add_argument("--seed", type=int)
    r.add_argument("--broker", metavar="URL", help="use an external MQTT broker instead of the in-process one")
    r.add_argument("--no-bulk", action="store_true", help="disable the bulk upload path")
    r.add_argument("--compression", type=float, help="pace simulated time at this many seconds per wall second")
    r.add_argument("--noise", help="detector noise config (default: perfect detector)")
    r.add_argument("--node-config", help="key = value node configuration file (overrides the scenario's trigger settings)")

    a = sub.add_parser("analyze", help="amplitude / noise / tilt report from a store")
    a.add_argument("--store", required=True)
    a.add_argument("--sensor")
    a.add_argument("--out", required=True)

    e = sub.add_parser("eval-detection", help="AP of the stand-in detector")
    e.add_argument("--dataset", default=None, help="dataset directory (default: bundled 24-scene set)")
    e.add_argument("--noise", default=None, help="detector noise config (default: bundled calibration)")
    e.add_argument("--out", help="directory for pr_sweep.csv and detections.csv")

    v = sub.add_parser("serve", help="serve a store over HTTP")
    v.add_argument("--store", required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--noise", help="detector noise config (default: perfect detector)")
    return p


def _dispatch(args) -> int:
    if args.command == "simulate":
        info = cmd_simulate(args.scenario, args.out, args.seed)
        print(f"{info['ships']} ships ({info['berthing_ships']} berthing), {info['scenes']} scenes -> {args.out}")
    elif args.command == "run":
        s = cmd_run(args.scenario, args.out, args.sensors, args.loss, args.seed, args.broker,
                    not args.no_bulk, args.compression, args.noise, args.node_config)
        print(f"{s['sessions']} sessions ({s['long_sessions']} long, {s['short_sessions']} short) "
              f"from {s['sensors']} sensor(s); {s['packets_dropped']} packets dropped -> {args.out}")
    elif args.command == "analyze":
        summaries = cmd_analyze(args.store, args.out, args.sensor)
        for sid, s in summaries.items():
            peaks = ", ".join(f"{k}={v:.3f}" for k, v in s["peak_mg"].items())
            print(f"sensor {sid}: {s['sessions']} sessions, peak mg {peaks}")
    elif args.command == "eval-detection":
        dataset = args.dataset or data_path("ships24")
        noise = args.noise or data_path("detector_noise.json")
        ap = cmd_eval_detection(dataset, noise, args.out)
        print(f"AP@0.5 = {ap:.4f}")
    elif args.command == "serve":
        detector = det.DetectorNoise.load(args.noise) if args.noise else None
        server = make_http_server(IngestService(args.store, detector), args.host, args.port)
        host, port = server.server_address[:2]
        print(f"serving {args.store} on http://{host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (CliError, ScenarioError, ValueError, TypeError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"portmon {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
