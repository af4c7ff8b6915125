"""Synthetic port world.

A :class:`Scenario` declares ships, weather and sensor noise; a
:class:`PortWorld` turns it into raw 1000 Hz acceleration, 1 Hz
rangefinder distance, per-trigger temperature and symbolic camera scenes.
Every generator is a pure function of ``(t, scenario, seed, sensor)`` so
overlapping requests return identical samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from . import dsp
from .detection import AnnotationScene, BBox, Box

MAX_RANGE_M = 100.0
FRAME_W = 1024
FRAME_H = 1024
# area fraction of a ship's box when it lies at its own berth distance
BERTH_AREA_FRAC = 0.3
MAX_AREA_FRAC = 0.9
BOX_ASPECT = 2.0
# a non-passing ship whose box covers at least this fraction is in final approach
FINAL_APPROACH_FRAC = 0.05
BERTH_CENTROID_Y = 0.65
PASSING_TOP_Y = 0.02


class ScenarioError(ValueError):
    pass


@dataclass
class ShipEvent:
    appear_t: float
    start_distance_m: float
    speed_mps: float
    berth_distance_m: float
    departs_t: float
    impact_t: float | None = None
    impact_amp_mg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    impact_freq_hz: float = 2.0
    impact_decay_s: float = 5.0
    passing: bool = False

    def validate(self) -> None:
        if not 0 < self.start_distance_m <= MAX_RANGE_M:
            raise ScenarioError("start_distance_m must be in (0, 100]")
        if self.start_distance_m <= self.berth_distance_m or self.berth_distance_m <= 0:
            raise ScenarioError("start distance must exceed a positive berth distance")
        if self.speed_mps <= 0:
            raise ScenarioError("speed_mps must be positive")
        if self.passing:
            if self.appear_t >= self.departs_t:
                raise ScenarioError("appear_t must precede departs_t")
            if any(self.impact_amp_mg):
                raise ScenarioError("a passing ship cannot carry a berthing impact")
            # a passing ship's box is anchored at the top of the frame; its
            # centroid must stay above the berth region at the closest approach
            _, h = _box_size(BERTH_AREA_FRAC)
            if PASSING_TOP_Y + h / 2 >= 0.3:
                raise ScenarioError("passing ship box too large for the frame layout")
            return
        if self.impact_t is None or not self.appear_t < self.impact_t < self.departs_t:
            raise ScenarioError("need appear_t < impact_t < departs_t")
        if self.impact_freq_hz <= 0 or self.impact_decay_s <= 0:
            raise ScenarioError("impact frequency and decay must be positive")

    def distance(self, t):
        """Ship range in metres; continuous in ``t`` (unclamped)."""
        t = np.asarray(t, dtype=float)
        inbound = np.maximum(self.berth_distance_m, self.start_distance_m - self.speed_mps * (t - self.appear_t))
        at_departure = max(self.berth_distance_m, self.start_distance_m - self.speed_mps * (self.departs_t - self.appear_t))
        outbound = at_departure + self.speed_mps * (t - self.departs_t)
        return np.where(t <= self.departs_t, inbound, outbound)

    def visible(self, t: float) -> bool:
        return t >= self.appear_t and float(self.distance(t)) < MAX_RANGE_M


@dataclass
class TemperatureModel:
    mean_c: float = 24.0
    amplitude_c: float = 4.0
    period_s: float = 86400.0


@dataclass
class TiltDrift:
    # calibrated so a full daily swing spans ~0.0798 deg pitch and ~0.0416 deg roll
    pitch_coeff_deg_per_c: float = 0.0798 / 8.0
    roll_coeff_deg_per_c: float = 0.0416 / 3.0
    roll_knee_c: float = 25.0


@dataclass
class Scenario:
    duration_s: float
    ship_events: list[ShipEvent] = field(default_factory=list)
    noise_rmse_target_mg: float = 0.003
    temperature: TemperatureModel = field(default_factory=TemperatureModel)
    tilt_drift: TiltDrift = field(default_factory=TiltDrift)
    seed: int = 0
    # node-side overrides (schedule period, threshold, ...) carried with the world
    node: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise ScenarioError("duration_s must be positive")
        if not self.noise_rmse_target_mg > 0:
            raise ScenarioError("noise_rmse_target_mg must be positive")
        if self.temperature.period_s <= 0:
            raise ScenarioError("temperature period must be positive")
        for ship in self.ship_events:
            ship.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Scenario":
        try:
            doc = dict(doc)
            ships = []
            for s in doc.pop("ship_events", []):
                s = dict(s)
                if "impact_amp_mg" in s:
                    s["impact_amp_mg"] = tuple(float(a) for a in s["impact_amp_mg"])
                ships.append(ShipEvent(**s))
            temp = TemperatureModel(**doc.pop("temperature", {}))
            drift = TiltDrift(**doc.pop("tilt_drift", {}))
            scenario = cls(ship_events=ships, temperature=temp, tilt_drift=drift, **doc)
        except TypeError as exc:
            raise ScenarioError(f"invalid scenario document: {exc}") from None
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _box_size(area_frac: float) -> tuple[float, float]:
    """Width and height (as frame fractions) for a box covering ``area_frac``."""
    w = min(1.0, math.sqrt(area_frac * BOX_ASPECT))
    return w, area_frac / w


def box_area_fraction(distance_m: float, berth_distance_m: float) -> float:
    """Inverse-square apparent size, ``BERTH_AREA_FRAC`` at the berth distance."""
    k = BERTH_AREA_FRAC * berth_distance_m**2
    return float(min(max(k / distance_m**2, 0.0), MAX_AREA_FRAC))


def _unit_transient(freq_hz: float, decay_s: float, tau: np.ndarray) -> np.ndarray:
    out = np.exp(-tau / decay_s) * np.sin(2 * np.pi * freq_hz * tau)
    return np.where(tau >= 0, out, 0.0)


@lru_cache(maxsize=32)
def _transient_chain_peak(freq_hz: float, decay_s: float) -> float:
    """Peak of a unit raw transient after filtering and decimation."""
    n = int(round((10 * decay_s + 1) * dsp.RAW_RATE_HZ))
    tau = np.arange(n) / dsp.RAW_RATE_HZ
    x = _unit_transient(freq_hz, decay_s, tau)
    _, y = dsp.stream_filter_decimate(tau, x, dsp.default_fir())
    return float(np.max(np.abs(y)))


@lru_cache(maxsize=32)
def _noise_gain(seed: int) -> float:
    """Post-chain RMSE per unit raw sigma, measured on 10 s of pure noise."""
    n = int(10 * dsp.RAW_RATE_HZ)
    rng = np.random.default_rng([seed, 0x5EED])
    x = rng.standard_normal((n, 3))
    _, y = dsp.stream_filter_decimate(np.arange(n) / dsp.RAW_RATE_HZ, x, dsp.default_fir())
    y = y[dsp.NUM_TAPS:]
    return float(np.mean([dsp.noise_rmse(y[:, i]).rmse for i in range(3)]))


class PortWorld:
    """Generators over one scenario, seen by one sensor."""

    block = int(dsp.RAW_RATE_HZ)

    def __init__(self, scenario: Scenario, sensor_index: int = 0):
        scenario.validate()
        self.scenario = scenario
        self.sensor_index = sensor_index
        target_g = scenario.noise_rmse_target_mg / 1000.0
        self.noise_sigma_g = target_g / _noise_gain(scenario.seed)

    # -- weather and drift -------------------------------------------------

    def gen_temperature(self, t):
        m = self.scenario.temperature
        return m.mean_c + m.amplitude_c * np.sin(2 * np.pi * np.asarray(t, dtype=float) / m.period_s)

    def gen_tilt_drift(self, t):
        """``(roll_deg, pitch_deg)`` injected at time ``t``."""
        d = self.scenario.tilt_drift
        temp = self.gen_temperature(t)
        pitch = d.pitch_coeff_deg_per_c * (temp - self.scenario.temperature.mean_c)
        roll = -d.roll_coeff_deg_per_c * np.maximum(0.0, temp - d.roll_knee_c)
        return roll, pitch

    # -- rangefinder ---------------------------------------------------------

    def gen_distance(self, t: float) -> float:
        d = MAX_RANGE_M
        for ship in self.scenario.ship_events:
            d = min(d, float(ship.distance(t)))
        return d

    # -- camera ----------------------------------------------------------------

    def gen_scene(self, t: float, scene_id: str | None = None) -> tuple[AnnotationScene, bool]:
        boxes = []
        berthing = False
        for ship in self.scenario.ship_events:
            if not ship.visible(t):
                continue
            frac = box_area_fraction(float(ship.distance(t)), ship.berth_distance_m)
            w, h = _box_size(frac)
            x_min = 0.5 - w / 2
            if ship.passing:
                y_min = PASSING_TOP_Y
            else:
                y_c = min(BERTH_CENTROID_Y, 1.0 - h / 2)
                y_min = y_c - h / 2
                berthing = berthing or frac >= FINAL_APPROACH_FRAC
            bbox = BBox(x_min * FRAME_W, y_min * FRAME_H, (x_min + w) * FRAME_W, (y_min + h) * FRAME_H)
            boxes.append(Box("Ship", bbox))
        sid = scene_id if scene_id is not None else f"scene-{t:.3f}"
        return AnnotationScene(sid, FRAME_W, FRAME_H, boxes), berthing

    # -- accelerometer -----------------------------------------------------------

    def _noise(self, k0: int, k1: int) -> np.ndarray:
        out = np.empty((k1 - k0, 3))
        b0, b1 = k0 // self.block, (k1 - 1) // self.block
        pos = 0
        for b in range(b0, b1 + 1):
            # block keys must be non-negative; pre-roll before t=0 wraps around
            rng = np.random.default_rng([self.scenario.seed, self.sensor_index, b % (1 << 62)])
            chunk = rng.standard_normal((self.block, 3))
            lo = max(k0 - b * self.block, 0)
            hi = min(k1 - b * self.block, self.block)
            out[pos:pos + hi - lo] = chunk[lo:hi]
            pos += hi - lo
        return out * self.noise_sigma_g

    def gen_accel(self, k0: int, k1: int) -> tuple[np.ndarray, np.ndarray]:
        """Raw samples with global indices ``k0 <= k < k1`` (``t = k / 1000``), in g."""
        if k1 <= k0:
            return np.zeros(0), np.zeros((0, 3))
        k = np.arange(k0, k1)
        t = k / dsp.RAW_RATE_HZ
        roll, pitch = self.gen_tilt_drift(t)
        acc = dsp.gravity_vector(pitch, roll)
        acc += self._noise(k0, k1)
        for ship in self.scenario.ship_events:
            if ship.passing or ship.impact_t is None or not any(ship.impact_amp_mg):
                continue
            tau = t - ship.impact_t
            if tau[-1] < 0 or tau[0] > 20 * ship.impact_decay_s:
                continue
            gain = 1.0 / _transient_chain_peak(ship.impact_freq_hz, ship.impact_decay_s)
            shape = _unit_transient(ship.impact_freq_hz, ship.impact_decay_s, tau) * gain
            acc += shape[:, None] * (np.asarray(ship.impact_amp_mg) / 1000.0)[None, :]
        return t, acc


# -- module-level operations ------------------------------------------------------


def gen_accel(t_range: tuple[float, float], scenario: Scenario, sensor_index: int = 0):
    t0, t1 = t_range
    k0 = int(round(t0 * dsp.RAW_RATE_HZ))
    k1 = int(round(t1 * dsp.RAW_RATE_HZ))
    return PortWorld(scenario, sensor_index).gen_accel(k0, k1)


def gen_distance(t: float, scenario: Scenario) -> float:
    return PortWorld(scenario).gen_distance(t)


def gen_scene(t: float, scenario: Scenario) -> tuple[AnnotationScene, bool]:
    return PortWorld(scenario).gen_scene(t)


def gen_temperature(t, scenario: Scenario):
    return PortWorld(scenario).gen_temperature(t)


def gen_tilt_drift(t, scenario: Scenario):
    return PortWorld(scenario).gen_tilt_drift(t)


# -- stock scenarios ------------------------------------------------------------------


def berthing_ship(appear_t: float, amp_mg=(7.398, 8.565, 12.040), **kw) -> ShipEvent:
    """A ship entering range at 100 m, berthing at 15 m at 1 m/s.

    It reaches the 30 m default threshold 70 s after appearing, lands
    15 s later, and leaves 900 s after appearing.
    """
    params = dict(
        appear_t=appear_t,
        start_distance_m=100.0,
        speed_mps=1.0,
        berth_distance_m=15.0,
        impact_t=appear_t + 90.0,
        impact_amp_mg=tuple(amp_mg),
        departs_t=appear_t + 900.0,
    )
    params.update(kw)
    return ShipEvent(**params)


def passing_ship(appear_t: float, **kw) -> ShipEvent:
    params = dict(
        appear_t=appear_t,
        start_distance_m=100.0,
        speed_mps=1.0,
        berth_distance_m=40.0,
        departs_t=appear_t + 300.0,
        passing=True,
    )
    params.update(kw)
    return ShipEvent(**params)


DEFAULT_NODE = {"schedule_period_s": 300.0, "distance_threshold_m": 30.0}


def two_ship_scenario(seed: int = 7, with_passing: bool = False) -> Scenario:
    """Two hours, two berthings; optionally a passing ship in between."""
    ships = [
        berthing_ship(1010.0, amp_mg=(5.1, 6.2, 9.3)),
        berthing_ship(4610.0),
    ]
    if with_passing:
        ships.append(passing_ship(2760.0))
    return Scenario(duration_s=7200.0, ship_events=ships, seed=seed, node=dict(DEFAULT_NODE))


def noise_only_scenario(duration_s: float = 60.0, seed: int = 1) -> Scenario:
    return Scenario(duration_s=duration_s, seed=seed, node=dict(DEFAULT_NODE))


def berthing_amplitude_scenario(seed: int = 3) -> Scenario:
    """One ship arriving right after boot; its session covers the impact."""
    ship = berthing_ship(0.0, speed_mps=2.0, impact_t=60.0, departs_t=1000.0)
    return Scenario(duration_s=1300.0, ship_events=[ship], seed=seed, node=dict(DEFAULT_NODE))


def drift_scenario(days: float = 2.0, seed: int = 11, period_s: float = 300.0) -> Scenario:
    node = dict(DEFAULT_NODE, schedule_period_s=period_s)
    return Scenario(duration_s=days * 86400.0, seed=seed, node=node)
