"""Twin manager: synchronize digital state from sensor aggregates, evaluate
operator what-if scenarios on forked simulations, and actuate validated
interventions into the physical simulation.

What-if forks start from a reconstruction of the *sensed* state, never from a
privileged ground-truth snapshot — the twin only knows what the sensors told
it, which makes reconstruction fidelity measurable instead of assumed.
"""
from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from .audit import AuditLog
from .errors import (
    ConstraintViolation,
    DeliveryFailure,
    InvalidRoute,
    ReconstructionUnavailable,
    StaleInput,
)
from .network import Route, SignalPlan, validate_signal_plan
from .sensing import AggregatedRecord
from .simulator import WINDOW_S, Incident, SimMetrics, SimSnapshot, Simulation, fork

DECAY_PER_WINDOW = 0.9   # unsensed-segment occupancy decay toward 0
CLEAR_BELOW = 0.3
HEAVY_ABOVE = 0.7
MAX_STALENESS_WINDOWS = 2  # reconstruction refuses older state


class SegmentLevel(Enum):
    Clear = "Clear"
    Moderate = "Moderate"
    Heavy = "Heavy"


class IntersectionState(Enum):
    FreeFlow = "FreeFlow"
    Congested = "Congested"
    UnderIntervention = "UnderIntervention"


class SystemState(Enum):
    Normal = "Normal"
    IncidentResponse = "IncidentResponse"
    WeatherAffected = "WeatherAffected"


class ScenarioStatus(Enum):
    Pending = "Pending"
    Running = "Running"
    Done = "Done"
    Failed = "Failed"


def classify_level(occ: float) -> SegmentLevel:
    if occ < CLEAR_BELOW:
        return SegmentLevel.Clear
    if occ > HEAVY_ABOVE:
        return SegmentLevel.Heavy
    return SegmentLevel.Moderate


@dataclass
class TwinState:
    segments: dict[str, tuple[float, SegmentLevel]]  # id -> (occ estimate, level)
    intersections: dict[str, IntersectionState]
    system: SystemState
    last_sync: float
    staleness: float

    def to_json(self) -> dict:
        return {
            "segments": {
                sid: {"occ": occ, "level": level.value}
                for sid, (occ, level) in sorted(self.segments.items())
            },
            "intersections": {n: s.value for n, s in sorted(self.intersections.items())},
            "system": self.system.value,
            "last_sync": self.last_sync,
            "staleness": self.staleness,
        }


@dataclass(frozen=True)
class RerouteChange:
    origin: str
    dest: str
    route: Route


Change = Incident | SignalPlan | RerouteChange


@dataclass
class Scenario:
    id: str
    changes: list[Change]
    horizon: int = 15              # prediction windows (x 300 s)
    base: str = "reconstructed"
    requested_by: str = ""
    status: ScenarioStatus = ScenarioStatus.Pending

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class ScenarioResult:
    scenario_id: str
    baseline: list[SimMetrics]       # one SimMetrics per 300 s window
    intervention: list[SimMetrics]
    delta_avg_travel_time: float
    delta_throughput_vpm: float
    forecasts: dict[str, list]       # sensor -> Forecast list over the horizon

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "windows": [
                {"index": i, "baseline": b.to_json(), "intervention": v.to_json()}
                for i, (b, v) in enumerate(zip(self.baseline, self.intervention))
            ],
            "delta_avg_travel_time_s": self.delta_avg_travel_time,
            "delta_throughput_vpm": self.delta_throughput_vpm,
            "forecasts": {
                s: [f.to_json() for f in fs] for s, fs in sorted(self.forecasts.items())
            },
        }


@dataclass
class Intervention:
    kind: str                        # "signal_plan" | "reroute"
    payload: SignalPlan | RerouteChange
    scenario_id: str = ""
    applied_at: float | None = None


@dataclass(frozen=True)
class Ack:
    effective_t: float
    kind: str
    scenario_id: str


class TwinManager:
    """The sync -> decide -> act loop around one physical simulation.

    sync() and act() are serialized onto the physical simulation through one
    lock (the ordered command channel); scenario runs execute on worker
    threads over independent forks and never touch the physical state.
    """

    def __init__(self, net, physical: Simulation, demand, seed: int = 0,
                 registry=None, lake=None, audit: AuditLog | None = None,
                 max_horizon: int = 48, workers: int = 2):
        self.net = net
        self.physical = physical
        self.demand = demand
        self.seed = seed
        self.registry = registry
        self.lake = lake
        self.audit = audit or AuditLog()
        self.max_horizon = max_horizon
        self.sim_lock = threading.RLock()
        self.closed = False
        self._estimates: dict[str, float] = {s.id: 0.0 for s in net.segments}
        self._last_sync: float | None = None
        self._under_intervention: dict[str, float] = {}  # node -> until time
        self._declared_incidents: list[Incident] = []
        self._weather = False
        self._scenarios: dict[str, Scenario] = {}
        self._results: dict[str, ScenarioResult | str] = {}
        self._scenario_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._pool = ThreadPoolExecutor(max_workers=workers,
                                        thread_name_prefix="scenario")
        self._applied: dict[tuple[str, int], Ack] = {}
        self.on_scenario_done = None  # callable(Scenario) set by the runtime

    # -- state sync --------------------------------------------------------------

    def sync(self, records: list[AggregatedRecord]) -> TwinState:
        """Fold one 5-minute window of aggregates into the twin state."""
        if records:
            window = records[0].window_start
            for rec in records:
                if rec.window_start != window:
                    raise StaleInput("records span multiple windows")
        else:
            window = (self._last_sync + WINDOW_S) if self._last_sync is not None else 0.0
        if self._last_sync is not None and window < self._last_sync:
            raise StaleInput(
                f"window {window:g} older than last sync {self._last_sync:g}"
            )
        sensed: dict[str, float] = {}
        for rec in records:
            seg = self.net.sensors.get(rec.sensor)
            if seg is not None and not rec.missing:
                sensed[seg] = rec.mean_occupancy
        for sid in self._estimates:
            if sid in sensed:
                self._estimates[sid] = sensed[sid]
            else:
                self._estimates[sid] = self._estimates[sid] * DECAY_PER_WINDOW
        self._last_sync = window
        return self.state(now=window + WINDOW_S)

    def state(self, now: float | None = None) -> TwinState:
        """Pure classification of the current estimates."""
        if now is None:
            now = self.physical.clock
        last = self._last_sync if self._last_sync is not None else -float("inf")
        segments = {
            sid: (occ, classify_level(occ)) for sid, occ in self._estimates.items()
        }
        intersections = {}
        for node in sorted(self.net.signals):
            if now < self._under_intervention.get(node, -1.0):
                intersections[node] = IntersectionState.UnderIntervention
            elif any(
                segments[seg.id][1] is SegmentLevel.Heavy
                for seg in self.net.incoming(node)
            ):
                intersections[node] = IntersectionState.Congested
            else:
                intersections[node] = IntersectionState.FreeFlow
        if self._weather:
            system = SystemState.WeatherAffected
        elif (any(now < until for until in self._under_intervention.values())
              or any(inc.active(now) for inc in self._declared_incidents)):
            system = SystemState.IncidentResponse
        else:
            system = SystemState.Normal
        return TwinState(
            segments=segments,
            intersections=intersections,
            system=system,
            last_sync=last,
            staleness=max(0.0, now - last) if last != -float("inf") else float("inf"),
        )

    def declare_incident(self, inc: Incident, inject: bool = False) -> None:
        self._declared_incidents.append(inc)
        if inject:
            with self.sim_lock:
                self.physical.inject_incident(inc)

    def declare_weather(self, affected: bool) -> None:
        self._weather = affected

    # -- reconstruction ------------------------------------------------------------

    def reconstruct(self, state: TwinState | None = None, net=None) -> SimSnapshot:
        """Build a snapshot whose per-segment queue counts realize the sensed
        occupancy estimates; deterministic given (state, seed)."""
        net = net or self.net
        state = state or self.state()
        if state.last_sync == -float("inf") or state.staleness >= MAX_STALENESS_WINDOWS * WINDOW_S:
            raise ReconstructionUnavailable(
                f"twin state stale by {state.staleness:g}s"
            )
        sim = Simulation(net, self.demand, seed=self.seed + int(state.last_sync))
        sim.clock = state.last_sync + WINDOW_S
        for rt in sim.plans.values():
            rt.advance(sim.clock)
        # routes through each segment, drawn round-robin from current routing
        with self.sim_lock:
            routing = dict(self.physical.routing)
        sim.routing.update(routing)
        routes_by_seg: dict[str, list[tuple[tuple[str, ...], int]]] = {}
        for (o, d) in sorted(routing):
            segs, _ = routing[(o, d)]
            for idx, sid in enumerate(segs):
                routes_by_seg.setdefault(sid, []).append((segs, idx))
        for sid in sorted(state.segments):
            occ, _ = state.segments[sid]
            seg = net.by_id[sid]
            n = int(round(occ * seg.jam_capacity))
            if n <= 0:
                continue
            options = routes_by_seg.get(sid) or [((sid,), 0)]
            for k in range(n):
                route, idx = options[k % len(options)]
                sim.place_queued(sid, route, idx, 1)
        return sim.snapshot()

    # -- what-if scenarios -----------------------------------------------------------

    def _validate_changes(self, changes: list[Change]) -> None:
        for ch in changes:
            if isinstance(ch, SignalPlan):
                if ch.intersection not in self.net.signals:
                    raise ConstraintViolation(
                        [f"no signal at {ch.intersection}"]
                    )
                violations = validate_signal_plan(
                    ch, incoming=self.net.incoming_ids(ch.intersection)
                )
                if violations:
                    raise ConstraintViolation(violations)
            elif isinstance(ch, RerouteChange):
                if not self.net.route_is_valid(ch.route):
                    raise InvalidRoute("reroute segments are not connected")
                first = self.net.by_id[ch.route.segments[0]]
                last = self.net.by_id[ch.route.segments[-1]]
                if first.from_node != ch.origin or last.to_node != ch.dest:
                    raise InvalidRoute("reroute does not connect origin to dest")
            elif isinstance(ch, Incident):
                if ch.segment not in self.net.by_id:
                    raise InvalidRoute(f"unknown segment {ch.segment}")

    @staticmethod
    def _apply_changes(sim: Simulation, changes: list[Change]) -> None:
        t0 = sim.clock
        for ch in changes:
            if isinstance(ch, SignalPlan):
                sim.apply_signal_plan(ch)
            elif isinstance(ch, RerouteChange):
                sim.set_rerouting(ch.origin, ch.dest, ch.route)
            elif isinstance(ch, Incident):
                # scenario incidents are relative to the fork start
                sim.inject_incident(Incident(
                    segment=ch.segment, start=t0 + ch.start,
                    duration=ch.duration, capacity_factor=ch.capacity_factor,
                ))

    def run_scenario(self, scenario: Scenario) -> ScenarioResult:
        """Paired baseline/intervention forks from the same reconstruction and
        seed; the physical simulation is never touched."""
        if scenario.horizon > self.max_horizon:
            raise ValueError(
                f"horizon {scenario.horizon} exceeds max {self.max_horizon}"
            )
        self._validate_changes(scenario.changes)
        snap = self.reconstruct()
        base_sim = fork(snap)
        with_sim = fork(snap)
        self._apply_changes(with_sim, scenario.changes)
        base_metrics, with_metrics = [], []
        for _ in range(scenario.horizon):
            for _ in range(int(WINDOW_S)):
                base_sim.step(1.0)
                with_sim.step(1.0)
            base_metrics.append(self._window_metrics(base_sim))
            with_metrics.append(self._window_metrics(with_sim))
        d_tt = _mean_delta(
            [m.avg_travel_time for m in with_metrics],
            [m.avg_travel_time for m in base_metrics],
        )
        d_tp = _mean_delta(
            [sum(m.throughput_vpm.values()) for m in with_metrics],
            [sum(m.throughput_vpm.values()) for m in base_metrics],
        )
        result = ScenarioResult(
            scenario_id=scenario.id,
            baseline=base_metrics,
            intervention=with_metrics,
            delta_avg_travel_time=d_tt,
            delta_throughput_vpm=d_tp,
            forecasts=self._forecast_overlay(scenario.horizon),
        )
        self.audit.append(self.physical.clock, "scenario", {
            "id": scenario.id,
            "horizon": scenario.horizon,
            "changes": len(scenario.changes),
            "delta_avg_travel_time_s": result.delta_avg_travel_time,
            "delta_throughput_vpm": result.delta_throughput_vpm,
        })
        return result

    @staticmethod
    def _window_metrics(sim: Simulation) -> SimMetrics:
        try:
            return sim.metrics(WINDOW_S)
        except Exception:
            return SimMetrics(window_s=WINDOW_S, avg_travel_time=None,
                              throughput_vpm={}, occupancy={}, trips=0)

    def _forecast_overlay(self, horizon: int) -> dict[str, list]:
        if self.registry is None or self.lake is None:
            return {}
        from .datalake import SEQ_LEN, SeriesKey
        from .predictor import encode_window, predict_multi

        out: dict[str, list] = {}
        for sensor in sorted(self.net.sensors):
            key = SeriesKey(sensor, "flow")
            try:
                _, model = self.registry.active(key)
            except Exception:
                continue
            recs = self.lake.query_range(sensor)[-SEQ_LEN:]
            if len(recs) < SEQ_LEN:
                continue
            window = encode_window(model, key, recs[0].window_start,
                                   [float(r.flow) for r in recs])
            out[sensor] = predict_multi(model, window, horizon)
        return out

    # -- async scenario execution ---------------------------------------------------

    def submit_scenario(self, changes: list[Change], horizon: int = 15,
                        requested_by: str = "") -> Scenario:
        self._validate_changes(changes)  # reject bad plans at submission
        scenario = Scenario(id=f"sc-{next(self._ids)}", changes=list(changes),
                            horizon=horizon, requested_by=requested_by)
        with self._scenario_lock:
            self._scenarios[scenario.id] = scenario
        self._pool.submit(self._run_submitted, scenario)
        return scenario

    def _run_submitted(self, scenario: Scenario) -> None:
        scenario.status = ScenarioStatus.Running
        try:
            result = self.run_scenario(scenario)
            with self._scenario_lock:
                self._results[scenario.id] = result
            scenario.status = ScenarioStatus.Done
        except Exception as exc:  # scenario failures are reported, not raised
            with self._scenario_lock:
                self._results[scenario.id] = str(exc)
            scenario.status = ScenarioStatus.Failed
        if self.on_scenario_done is not None:
            try:
                self.on_scenario_done(scenario)
            except Exception:
                pass

    def get_scenario(self, scenario_id: str) -> tuple[Scenario, ScenarioResult | str | None]:
        with self._scenario_lock:
            scenario = self._scenarios.get(scenario_id)
            if scenario is None:
                raise KeyError(scenario_id)
            return scenario, self._results.get(scenario_id)

    # -- actuation -------------------------------------------------------------------

    def act(self, iv: Intervention) -> Ack:
        """Re-validate and deliver a command to the physical simulation."""
        if self.closed:
            raise DeliveryFailure("command channel closed")
        if isinstance(iv.payload, SignalPlan):
            violations = validate_signal_plan(
                iv.payload,
                incoming=self.net.incoming_ids(iv.payload.intersection)
                if iv.payload.intersection in self.net.signals else None,
            )
            if iv.payload.intersection not in self.net.signals:
                violations = [f"no signal at {iv.payload.intersection}"] + violations
            if violations:
                raise ConstraintViolation(violations)
            with self.sim_lock:
                effective = self.physical.apply_signal_plan(iv.payload)
                cycle = iv.payload.cycle_length
            self._under_intervention[iv.payload.intersection] = effective + cycle
            kind = "signal_plan"
        elif isinstance(iv.payload, RerouteChange):
            ch = iv.payload
            with self.sim_lock:
                self.physical.set_rerouting(ch.origin, ch.dest, ch.route)
                effective = self.physical.clock
            kind = "reroute"
        else:
            raise DeliveryFailure(f"unsupported intervention payload {type(iv.payload)}")
        iv.applied_at = effective
        ack = Ack(effective_t=effective, kind=kind, scenario_id=iv.scenario_id)
        self.audit.append(self.physical.clock, "act", {
            "kind": kind, "scenario_id": iv.scenario_id, "effective_t": effective,
        })
        return ack

    def apply_scenario_change(self, scenario_id: str, change_index: int) -> Ack:
        """Actuate one change out of a Done scenario; idempotent per
        (scenario_id, change_index)."""
        prior = self._applied.get((scenario_id, change_index))
        if prior is not None:
            return prior
        scenario, _ = self.get_scenario(scenario_id)
        if scenario.status is not ScenarioStatus.Done:
            raise ValueError(f"scenario {scenario_id} is {scenario.status.value}")
        if not 0 <= change_index < len(scenario.changes):
            raise ValueError(f"change index {change_index} out of range")
        change = scenario.changes[change_index]
        if isinstance(change, Incident):
            raise ValueError("incidents describe disruptions; they cannot be actuated")
        if isinstance(change, SignalPlan):
            iv = Intervention(kind="signal_plan", payload=change, scenario_id=scenario_id)
        else:
            iv = Intervention(kind="reroute", payload=change, scenario_id=scenario_id)
        ack = self.act(iv)
        self._applied[(scenario_id, change_index)] = ack
        return ack

    def close(self):
        self.closed = True
        self._pool.shutdown(wait=False)


def _mean_delta(a: list, b: list) -> float:
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not pairs:
        return 0.0
    return sum(x - y for x, y in pairs) / len(pairs)
