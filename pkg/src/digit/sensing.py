"""Virtual roadside sensors: per-tick observation, 5-minute aggregation,
congestion classification, and the JSON Lines wire format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import WindowMismatch
from .simulator import WINDOW_S, Simulation


class CongestionLevel(Enum):
    Clear = "Clear"
    Moderate = "Moderate"
    Heavy = "Heavy"


# Occupancy thresholds; both boundaries classify as Moderate.
CLEAR_BELOW = 0.3
HEAVY_ABOVE = 0.7


def classify_occupancy(occ: float) -> CongestionLevel:
    if occ < CLEAR_BELOW:
        return CongestionLevel.Clear
    if occ > HEAVY_ABOVE:
        return CongestionLevel.Heavy
    return CongestionLevel.Moderate


def window_of(t: float) -> float:
    """Start of the half-open aggregation window [ws, ws+300) containing t."""
    return (t // WINDOW_S) * WINDOW_S


@dataclass(frozen=True)
class SensorRecord:
    sensor: str
    timestamp: float
    count: int            # vehicles discharged past the sensor this tick
    mean_speed: float     # m/s, 0 when the segment is empty
    occupancy: float

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError("occupancy must be in [0, 1]")


@dataclass(frozen=True)
class AggregatedRecord:
    sensor: str
    window_start: float
    flow: int             # vehicles per 5 minutes
    mean_speed: float
    mean_occupancy: float
    congestion_level: CongestionLevel
    missing: bool

    def to_wire(self) -> str:
        return json.dumps(
            {
                "sensor": self.sensor,
                "t": self.window_start,
                "flow": self.flow,
                "speed_mps": self.mean_speed,
                "occ": self.mean_occupancy,
                "level": self.congestion_level.value,
                "missing": self.missing,
            },
            separators=(",", ":"),
        )

    @staticmethod
    def from_wire(line: str) -> "AggregatedRecord":
        doc = json.loads(line)
        return AggregatedRecord(
            sensor=doc["sensor"],
            window_start=float(doc["t"]),
            flow=int(doc["flow"]),
            mean_speed=float(doc["speed_mps"]),
            mean_occupancy=float(doc["occ"]),
            congestion_level=CongestionLevel(doc["level"]),
            missing=bool(doc["missing"]),
        )


def observe(sim: Simulation, sensors: dict[str, str], *,
            noise_sigma: float = 0.0, p_drop: float = 0.0,
            rng: np.random.Generator | None = None) -> list[SensorRecord]:
    """One record per sensor for the tick just stepped.

    Optional Gaussian speed noise and record dropout model imperfect devices;
    both default to off and use a generator separate from the simulator's.
    """
    if (noise_sigma > 0 or p_drop > 0) and rng is None:
        rng = np.random.default_rng(0)
    records = []
    discharges = sim.last_tick_discharges
    for sensor in sorted(sensors):
        seg_id = sensors[sensor]
        if p_drop > 0 and rng.random() < p_drop:
            continue
        speed = sim.segment_mean_speed(seg_id)
        if noise_sigma > 0:
            speed = max(0.0, speed + rng.normal(0.0, noise_sigma))
        records.append(
            SensorRecord(
                sensor=sensor,
                timestamp=sim.clock,
                count=discharges.get(seg_id, 0),
                mean_speed=speed,
                occupancy=min(1.0, sim.segment_occupancy(seg_id)),
            )
        )
    return records


def aggregate(records: list[SensorRecord], window_start: float, *,
              sensor: str | None = None,
              expected_ticks: int = int(WINDOW_S)) -> AggregatedRecord:
    """Consolidate one sensor's tick records for [window_start, +300s).

    flow sums counts; mean_speed is count-weighted; mean_occupancy is the
    time-mean over observed ticks; missing flags windows where more than half
    of the expected ticks never arrived (dropout, dead sensor).
    """
    if sensor is None:
        if not records:
            raise ValueError("sensor id required when the record list is empty")
        sensor = records[0].sensor
    for rec in records:
        if rec.sensor != sensor:
            raise WindowMismatch(f"record for {rec.sensor} in {sensor} aggregation")
        if not window_start <= rec.timestamp < window_start + WINDOW_S:
            raise WindowMismatch(
                f"record at t={rec.timestamp:g} outside window [{window_start:g}, "
                f"{window_start + WINDOW_S:g})"
            )
    flow = sum(r.count for r in records)
    if flow > 0:
        mean_speed = sum(r.count * r.mean_speed for r in records) / flow
    else:
        mean_speed = 0.0
    if records:
        mean_occ = sum(r.occupancy for r in records) / len(records)
    else:
        mean_occ = 0.0
    absent = expected_ticks - len(records)
    return AggregatedRecord(
        sensor=sensor,
        window_start=window_start,
        flow=flow,
        mean_speed=mean_speed,
        mean_occupancy=mean_occ,
        congestion_level=classify_occupancy(mean_occ),
        missing=absent > 0.5 * expected_ticks,
    )


class CommChannel:
    """Fixed-delay hop between aggregation and data-lake ingestion; stands in
    for the transport between field devices and the platform."""

    def __init__(self, delay_s: float = 0.0):
        self.delay_s = delay_s
        self._pending: list[tuple[float, AggregatedRecord]] = []

    def send(self, rec: AggregatedRecord, now: float) -> None:
        self._pending.append((now + self.delay_s, rec))

    def poll(self, now: float) -> list[AggregatedRecord]:
        ready = [r for due, r in self._pending if due <= now]
        self._pending = [(due, r) for due, r in self._pending if due > now]
        return ready
