"""When to sense: a periodic schedule and a rangefinder threshold detector."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace


class TriggerKind(str, enum.Enum):
    SCHEDULE = "Schedule"
    RANGEFINDER = "Rangefinder"


class Decision(str, enum.Enum):
    ACCEPT = "Accept"
    SUPPRESS = "Suppress"


@dataclass(frozen=True)
class TriggerConfig:
    schedule_period_s: float = 300.0
    distance_threshold_m: float = 30.0
    rearm_margin_m: float = 5.0
    cooldown_s: float = 600.0
    sensing_s_noship: float = 30.0
    sensing_s_ship: float = 1200.0

    def __post_init__(self):
        for name in ("schedule_period_s", "distance_threshold_m", "sensing_s_noship", "sensing_s_ship"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rearm_margin_m < 0 or self.cooldown_s < 0:
            raise ValueError("rearm_margin_m and cooldown_s must be non-negative")
        if not self.sensing_s_ship > self.sensing_s_noship:
            raise ValueError("sensing_s_ship must exceed sensing_s_noship")

    def updated(self, params: dict) -> "TriggerConfig":
        known = {f.name for f in fields(self)}
        return replace(self, **{k: float(v) for k, v in params.items() if k in known})


@dataclass(frozen=True)
class DistanceReading:
    t: float
    meters: float


@dataclass(frozen=True)
class TriggerEvent:
    t: float
    kind: TriggerKind


def schedule_next(last_fire_t: float, period_s: float) -> float:
    if period_s <= 0:
        raise ValueError("period_s must be positive")
    return last_fire_t + period_s


@dataclass
class DetectorState:
    """Rangefinder edge detector state.

    Starts disarmed; the first reading above the threshold arms it. After a
    fire it stays disarmed until a reading above ``threshold + margin`` has
    been seen and ``cooldown_s`` has elapsed since the fire.
    """

    armed: bool = False
    rearm_seen: bool = False
    fired_once: bool = False
    last_fire_t: float = float("-inf")
    last_t: float | None = None
    prev_above: bool = False


def evaluate_distance(reading: DistanceReading, config: TriggerConfig, state: DetectorState) -> TriggerEvent | None:
    if state.last_t is not None and reading.t <= state.last_t:
        raise ValueError(f"out-of-order reading at t={reading.t} (last {state.last_t})")
    thr = config.distance_threshold_m
    above = reading.meters > thr

    if not state.armed:
        if not state.fired_once:
            state.armed = above
        else:
            if reading.meters > thr + config.rearm_margin_m:
                state.rearm_seen = True
            if state.rearm_seen and reading.t - state.last_fire_t >= config.cooldown_s:
                state.armed = True

    event = None
    if state.armed and state.prev_above and not above:
        event = TriggerEvent(reading.t, TriggerKind.RANGEFINDER)
        state.armed = False
        state.rearm_seen = False
        state.fired_once = True
        state.last_fire_t = reading.t

    state.prev_above = above
    state.last_t = reading.t
    return event


class DistanceDetector:
    """Stateful wrapper holding a config and a :class:`DetectorState`."""

    def __init__(self, config: TriggerConfig):
        self.config = config
        self.state = DetectorState()

    def feed(self, reading: DistanceReading) -> TriggerEvent | None:
        return evaluate_distance(reading, self.config, self.state)


def arbitrate(event: TriggerEvent, node_busy: bool) -> Decision:
    return Decision.SUPPRESS if node_busy else Decision.ACCEPT
