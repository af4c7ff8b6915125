"""Per-session amplitude, noise and tilt summaries from a populated store."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .ingest import SeriesStore

AXES = ("ax", "ay", "az")


@dataclass
class SessionSummary:
    session_id: str
    start_t: float
    trigger_type: str
    ship_present: bool
    temperature_c: float
    rows: int
    peak_mg: list[float]
    rmse_mg: list[float]
    roll_min: float
    roll_max: float
    pitch_min: float
    pitch_max: float
    roll_mean: float
    pitch_mean: float

    @property
    def roll_range(self) -> float:
        return self.roll_max - self.roll_min

    @property
    def pitch_range(self) -> float:
        return self.pitch_max - self.pitch_min


@dataclass
class AnalysisReport:
    sensor_id: str
    sessions: list[SessionSummary] = field(default_factory=list)

    def tilt_temperature(self) -> np.ndarray:
        """Columns ``t, temp_c, roll_deg, pitch_deg``; one row per session."""
        return np.array(
            [[s.start_t, s.temperature_c, s.roll_mean, s.pitch_mean] for s in self.sessions], dtype=float
        ).reshape(-1, 4)

    def peak_mg(self) -> np.ndarray:
        """Largest per-axis peak over all sessions."""
        if not self.sessions:
            return np.zeros(3)
        return np.max([s.peak_mg for s in self.sessions], axis=0)

    def drift_ranges(self) -> tuple[float, float]:
        """``(roll_range, pitch_range)`` of session-mean tilt over the run."""
        tt = self.tilt_temperature()
        if len(tt) == 0:
            return 0.0, 0.0
        return float(np.ptp(tt[:, 2])), float(np.ptp(tt[:, 3]))

    def summary(self) -> dict:
        roll_range, pitch_range = self.drift_ranges()
        tt = self.tilt_temperature()
        out = {
            "sensor_id": self.sensor_id,
            "sessions": len(self.sessions),
            "long_sessions": sum(s.ship_present for s in self.sessions),
            "peak_mg": dict(zip(AXES, self.peak_mg().tolist())),
            "roll_range_deg": roll_range,
            "pitch_range_deg": pitch_range,
        }
        if len(tt) > 2 and np.ptp(tt[:, 1]) > 0:
            out["pitch_temp_corr"] = float(np.corrcoef(tt[:, 1], tt[:, 3])[0, 1])
            hot = tt[:, 1] > 25.0
            if hot.sum() > 2:
                out["roll_temp_corr_above_25c"] = float(np.corrcoef(tt[hot, 1], tt[hot, 2])[0, 1])
        return out


def summarize_session(session_id: str, rows: np.ndarray, info) -> SessionSummary:
    acc = rows[:, 1:4]
    dev = np.abs(acc - acc.mean(axis=0))
    roll, pitch = rows[:, 4], rows[:, 5]
    return SessionSummary(
        session_id=session_id,
        start_t=info.trigger_time if info else float(rows[0, 0]),
        trigger_type=info.trigger_type if info else "",
        ship_present=bool(info.ship_present) if info else False,
        temperature_c=info.temperature_c if info else float("nan"),
        rows=len(rows),
        peak_mg=dev.max(axis=0).tolist(),
        rmse_mg=[dsp.noise_rmse(acc[:, i]).rmse for i in range(3)],
        roll_min=float(roll.min()),
        roll_max=float(roll.max()),
        pitch_min=float(pitch.min()),
        pitch_max=float(pitch.max()),
        roll_mean=float(roll.mean()),
        pitch_mean=float(pitch.mean()),
    )


def analyze(store: SeriesStore, sensor_id: str) -> AnalysisReport:
    info = {r.session_id: r for r in store.info(sensor_id)}
    report = AnalysisReport(sensor_id)
    for sid in store.sessions(sensor_id):
        rows = store.session_rows(sensor_id, sid)
        if len(rows) < 2:
            continue
        report.sessions.append(summarize_session(sid, rows, info.get(sid)))
    report.sessions.sort(key=lambda s: s.start_t)
    return report


def write_report(report: AnalysisReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"summary": report.summary(), "sessions": [asdict(s) for s in report.sessions]}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    with (out / "sessions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "start_t", "trigger_type", "ship_present", "temperature_c", "rows",
                    "peak_ax_mg", "peak_ay_mg", "peak_az_mg", "rmse_ax_mg", "rmse_ay_mg", "rmse_az_mg",
                    "roll_range_deg", "pitch_range_deg"])
        for s in report.sessions:
            w.writerow([s.session_id, f"{s.start_t:.3f}", s.trigger_type, int(s.ship_present),
                        f"{s.temperature_c:.3f}", s.rows, *(f"{v:.6f}" for v in s.peak_mg),
                        *(f"{v:.6f}" for v in s.rmse_mg), f"{s.roll_range:.6f}", f"{s.pitch_range:.6f}"])

    with (out / "tilt_temperature.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "temp_c", "roll_deg", "pitch_deg"])
        for t, temp, roll, pitch in report.tilt_temperature():
            w.writerow([f"{t:.3f}", f"{temp:.3f}", f"{roll:.6f}", f"{pitch:.6f}"])
