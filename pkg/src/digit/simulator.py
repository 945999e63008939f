"""Discrete-time mesoscopic (point-queue) traffic simulator.

Vehicles traverse each segment in free-flow time, then wait in a FIFO queue at
the downstream node. While a signal phase serves the segment (always, at
unsignalized nodes) the queue discharges at the saturation rate, modulated by
incident capacity factors. Segment occupancy is capped at jam density; arrivals
beyond that spill back to the upstream node.

One Simulation instance is single-threaded. Snapshots are immutable values;
forked simulations are fully independent of their parent.
"""
from __future__ import annotations

import copy
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    ConstraintViolation,
    EmptyWindow,
    InvalidRoute,
    UnknownIntersection,
    UnknownSegment,
)
from .network import RoadNetwork, Route, free_flow_weights, shortest_route, validate_signal_plan

WINDOW_S = 300.0  # aggregation window used across the platform

# Residual discharge rights are capped so a long blockage cannot bank
# capacity and release it as a burst once spillback clears.
_RESIDUAL_CAP = 1.0


class VehicleState(Enum):
    Idle = "Idle"
    Moving = "Moving"
    Queuing = "Queuing"
    Rerouted = "Rerouted"


@dataclass
class Vehicle:
    id: int
    route: tuple[str, ...]
    route_index: int
    state: VehicleState
    entered_at: float
    segment_eta: float  # time the vehicle reaches the downstream queue


@dataclass(frozen=True)
class DemandProfile:
    """Origin-destination rates plus a 24 h multiplier curve (5-min samples)."""

    od_pairs: tuple[tuple[str, str, float], ...]
    multipliers: tuple[float, ...]  # 288 samples, one per 5-minute slot

    def __post_init__(self):
        if any(rate < 0 for _, _, rate in self.od_pairs):
            raise ValueError("demand base_rate must be >= 0")
        if len(self.multipliers) != 288:
            raise ValueError("multiplier curve must have 288 samples (24h at 5min)")
        if any(m < 0 for m in self.multipliers):
            raise ValueError("multiplier samples must be >= 0")

    def multiplier_at(self, t: float) -> float:
        slot = int((t % 86400.0) // WINDOW_S)
        return self.multipliers[slot]

    @staticmethod
    def flat(od_pairs, level: float = 1.0) -> "DemandProfile":
        return DemandProfile(tuple(od_pairs), tuple([level] * 288))


def double_peak_multipliers(base: float = 0.15, peak1_h: float = 8.0,
                            peak2_h: float = 18.0, width_h: float = 1.5) -> tuple[float, ...]:
    """Daily demand curve with morning and evening rush peaks, max 1.0."""
    hours = np.arange(288) * (24.0 / 288.0)
    shape = (np.exp(-0.5 * ((hours - peak1_h) / width_h) ** 2)
             + np.exp(-0.5 * ((hours - peak2_h) / width_h) ** 2))
    curve = base + (1.0 - base) * shape / shape.max()
    return tuple(float(v) for v in curve)


@dataclass(frozen=True)
class Incident:
    """Capacity reduction on a segment during [start, start+duration)."""

    segment: str
    start: float
    duration: float
    capacity_factor: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("incident duration must be > 0")
        if not 0.0 <= self.capacity_factor <= 1.0:
            raise ValueError("capacity_factor must be in [0, 1]")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass(frozen=True)
class ExitRecord:
    veh: int
    entered_s: float
    exited_s: float
    route: tuple[str, ...]

    def to_wire(self) -> str:
        return json.dumps(
            {"veh": self.veh, "entered_s": self.entered_s,
             "exited_s": self.exited_s, "route": list(self.route)},
            separators=(",", ":"),
        )


@dataclass
class TickReport:
    clock: float
    arrivals: int
    loaded: int
    entered_queue: int
    discharged: dict[str, int]
    exits: list[ExitRecord]
    held: int

    def to_json(self) -> dict:
        return {
            "clock": self.clock,
            "arrivals": self.arrivals,
            "loaded": self.loaded,
            "entered_queue": self.entered_queue,
            "discharged": dict(self.discharged),
            "exits": [json.loads(e.to_wire()) for e in self.exits],
            "held": self.held,
        }


@dataclass
class SimMetrics:
    window_s: float
    avg_travel_time: float | None   # seconds per vehicle, None if no trips
    throughput_vpm: dict[str, float]  # vehicles/minute past each intersection
    occupancy: dict[str, float]       # mean fraction of jam capacity
    trips: int

    def to_json(self) -> dict:
        return {
            "window_s": self.window_s,
            "avg_travel_time_s": self.avg_travel_time,
            "throughput_vpm": dict(self.throughput_vpm),
            "occupancy": dict(self.occupancy),
            "trips": self.trips,
        }


@dataclass(frozen=True)
class SimSnapshot:
    """Opaque, immutable copy of full simulator state."""

    clock: float
    payload: dict = field(repr=False)


@dataclass
class _SegmentState:
    moving: deque        # (eta, veh_id) in FIFO order; etas are monotone
    queue: deque         # veh_id
    residual: float
    count: int


class Simulation:
    """Point-queue simulation over a validated RoadNetwork."""

    def __init__(self, net: RoadNetwork, demand: DemandProfile, seed: int,
                 metrics_history_s: float = 3600.0):
        self.net = net
        self.demand = demand
        self.seed = seed
        self.clock = 0.0
        self.demand_scale = 1.0
        self.metrics_history_s = metrics_history_s
        self._rng = np.random.default_rng(seed)
        self._next_id = 1
        self.vehicles: dict[int, Vehicle] = {}
        self.segs: dict[str, _SegmentState] = {
            s.id: _SegmentState(deque(), deque(), 0.0, 0) for s in net.segments
        }
        self._seg_order = sorted(self.segs)
        self.entry: dict[str, deque] = {}
        # routing: (origin, dest) -> (route segments, loads_as_rerouted)
        self.routing: dict[tuple[str, str], tuple[tuple[str, ...], bool]] = {}
        ff = free_flow_weights(net)
        for o, d, _ in demand.od_pairs:
            self.routing[(o, d)] = (shortest_route(net, ff, o, d).segments, False)
        self._od = list(demand.od_pairs)
        self._od_rates = np.array([r for _, _, r in self._od], dtype=float)
        self.plans: dict[str, "SignalPlanRuntime"] = {
            node: SignalPlanRuntime(plan, anchor=0.0)
            for node, plan in net.signals.items()
        }
        self.incidents: list[Incident] = []
        self.injected = 0
        self.exited = 0
        self.exit_log: list[ExitRecord] = []
        # rolling history for metrics(): (t, occupancy tuple), (t, {node: n})
        self._occ_hist: deque = deque()
        self._cross_hist: deque = deque()
        self._last_discharged: dict[str, int] = {}

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_snapshot(cls, snap: SimSnapshot) -> "Simulation":
        state = copy.deepcopy(snap.payload)
        sim = cls.__new__(cls)
        sim.__dict__.update(state["plain"])
        sim._rng = np.random.default_rng()
        sim._rng.bit_generator.state = state["rng_state"]
        return sim

    def snapshot(self) -> SimSnapshot:
        plain = {k: v for k, v in self.__dict__.items() if k != "_rng"}
        payload = {
            "plain": copy.deepcopy(plain),
            "rng_state": copy.deepcopy(self._rng.bit_generator.state),
        }
        return SimSnapshot(clock=self.clock, payload=payload)

    # -- commands --------------------------------------------------------------

    def inject_incident(self, inc: Incident) -> None:
        if inc.segment not in self.segs:
            raise UnknownSegment(f"unknown segment {inc.segment}")
        self.incidents.append(inc)

    def apply_signal_plan(self, plan) -> float:
        """Queue a plan for the start of the next cycle; returns effective time."""
        if plan.intersection not in self.plans:
            raise UnknownIntersection(f"no signal at {plan.intersection}")
        violations = validate_signal_plan(
            plan, incoming=self.net.incoming_ids(plan.intersection)
        )
        if violations:
            raise ConstraintViolation(violations)
        rt = self.plans[plan.intersection]
        rt.pending = plan
        return rt.next_boundary(self.clock)

    def set_rerouting(self, origin: str, dest: str, route: Route) -> None:
        if not self.net.route_is_valid(route):
            raise InvalidRoute("route segments are not connected or unknown")
        first = self.net.by_id[route.segments[0]]
        last = self.net.by_id[route.segments[-1]]
        if first.from_node != origin or last.to_node != dest:
            raise InvalidRoute(
                f"route does not connect {origin} to {dest}"
            )
        self.routing[(origin, dest)] = (route.segments, True)

    def spawn(self, route: Route, n: int = 1, rerouted: bool = False) -> list[int]:
        """Inject n vehicles on an explicit route at the current clock."""
        if not self.net.route_is_valid(route):
            raise InvalidRoute("route segments are not connected or unknown")
        ids = []
        origin = self.net.by_id[route.segments[0]].from_node
        for _ in range(n):
            veh = self._new_vehicle(route.segments, rerouted)
            self.entry.setdefault(origin, deque()).append(veh.id)
            ids.append(veh.id)
        self._load_entry_queues()
        return ids

    def place_queued(self, segment_id: str, route: tuple[str, ...],
                     route_index: int, n: int = 1) -> int:
        """Place vehicles directly into a segment's downstream queue
        (used to reconstruct sensed state). Returns how many fit."""
        if segment_id not in self.segs:
            raise UnknownSegment(f"unknown segment {segment_id}")
        st = self.segs[segment_id]
        cap = self.net.by_id[segment_id].max_vehicles
        placed = 0
        for _ in range(n):
            if st.count >= cap:
                break
            veh = self._new_vehicle(route, False)
            veh.route_index = route_index
            veh.state = VehicleState.Queuing
            veh.segment_eta = self.clock
            st.queue.append(veh.id)
            st.count += 1
            placed += 1
        return placed

    def set_demand_scale(self, scale: float) -> None:
        self.demand_scale = float(scale)

    # -- stepping --------------------------------------------------------------

    def step(self, dt: float = 1.0) -> TickReport:
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.clock += dt
        t = self.clock
        for rt in self.plans.values():
            rt.advance(t)
        # vehicles marked Rerouted in an earlier tick resume normal states
        for veh in self.vehicles.values():
            if veh.state is VehicleState.Rerouted:
                veh.state = (VehicleState.Queuing
                             if veh.segment_eta <= t else VehicleState.Moving)

        arrivals = self._draw_arrivals(t, dt)
        loaded = self._load_entry_queues()
        entered_queue = self._advance_moving(t)
        discharged, exits = self._discharge(t, dt)

        self._last_discharged = discharged
        self._record_history(t, discharged, exits)
        held = sum(len(q) for q in self.entry.values())
        return TickReport(
            clock=t, arrivals=arrivals, loaded=loaded,
            entered_queue=entered_queue, discharged=discharged,
            exits=exits, held=held,
        )

    def _new_vehicle(self, route: tuple[str, ...], rerouted: bool) -> Vehicle:
        veh = Vehicle(
            id=self._next_id, route=tuple(route), route_index=0,
            state=VehicleState.Rerouted if rerouted else VehicleState.Idle,
            entered_at=self.clock, segment_eta=math.inf,
        )
        self._next_id += 1
        self.vehicles[veh.id] = veh
        self.injected += 1
        return veh

    def _draw_arrivals(self, t: float, dt: float) -> int:
        if not self._od:
            return 0
        lam = self._od_rates * (self.demand.multiplier_at(t) * self.demand_scale * dt)
        counts = self._rng.poisson(lam)
        total = 0
        for (o, d, _), n in zip(self._od, counts):
            if n == 0:
                continue
            route, rerouted = self.routing[(o, d)]
            for _ in range(int(n)):
                veh = self._new_vehicle(route, rerouted)
                self.entry.setdefault(o, deque()).append(veh.id)
            total += int(n)
        return total

    def _load_entry_queues(self) -> int:
        loaded = 0
        for origin in sorted(self.entry):
            q = self.entry[origin]
            while q:
                veh = self.vehicles[q[0]]
                seg_id = veh.route[0]
                st = self.segs[seg_id]
                seg = self.net.by_id[seg_id]
                if st.count >= seg.max_vehicles:
                    break  # spillback: held at the upstream node
                q.popleft()
                if veh.state is VehicleState.Idle:
                    veh.state = VehicleState.Moving
                veh.segment_eta = self.clock + seg.travel_time
                st.moving.append((veh.segment_eta, veh.id))
                st.count += 1
                loaded += 1
        return loaded

    def _advance_moving(self, t: float) -> int:
        n = 0
        for sid in self._seg_order:
            st = self.segs[sid]
            while st.moving and st.moving[0][0] <= t:
                _, vid = st.moving.popleft()
                st.queue.append(vid)
                veh = self.vehicles[vid]
                if veh.state is not VehicleState.Rerouted:
                    veh.state = VehicleState.Queuing
                n += 1
        return n

    def capacity_factor(self, seg_id: str, t: float) -> float:
        f = 1.0
        for inc in self.incidents:
            if inc.segment == seg_id and inc.active(t):
                f = min(f, inc.capacity_factor)
        return f

    def _serves(self, seg, t: float) -> bool:
        rt = self.plans.get(seg.to_node)
        if rt is None:
            return True
        return seg.id in rt.active_phase(t).serves

    def _discharge(self, t: float, dt: float):
        discharged: dict[str, int] = {}
        exits: list[ExitRecord] = []
        for sid in self._seg_order:
            st = self.segs[sid]
            if not st.queue:
                st.residual = 0.0
                continue
            seg = self.net.by_id[sid]
            if not self._serves(seg, t):
                continue
            budget = st.residual + seg.saturation_flow * self.capacity_factor(sid, t) * dt
            k = min(len(st.queue), int(math.floor(budget + 1e-9)))
            n = 0
            for _ in range(k):
                vid = st.queue[0]
                veh = self.vehicles[vid]
                if veh.route_index + 1 >= len(veh.route):
                    st.queue.popleft()
                    st.count -= 1
                    del self.vehicles[vid]
                    self.exited += 1
                    rec = ExitRecord(vid, veh.entered_at, t, veh.route)
                    self.exit_log.append(rec)
                    exits.append(rec)
                else:
                    nxt_id = veh.route[veh.route_index + 1]
                    nxt = self.net.by_id[nxt_id]
                    nst = self.segs[nxt_id]
                    if nst.count >= nxt.max_vehicles:
                        break  # downstream full; FIFO head blocks the queue
                    st.queue.popleft()
                    st.count -= 1
                    veh.route_index += 1
                    veh.state = VehicleState.Moving
                    veh.segment_eta = t + nxt.travel_time
                    nst.moving.append((veh.segment_eta, veh.id))
                    nst.count += 1
                n += 1
            if n:
                discharged[sid] = n
            st.residual = min(budget - n, _RESIDUAL_CAP)
            if not st.queue:
                st.residual = 0.0
        return discharged, exits

    def _record_history(self, t, discharged, exits):
        occ = tuple(self.segment_occupancy(sid) for sid in self._seg_order)
        self._occ_hist.append((t, occ))
        crossings: dict[str, int] = {}
        for sid, n in discharged.items():
            node = self.net.by_id[sid].to_node
            crossings[node] = crossings.get(node, 0) + n
        self._cross_hist.append((t, crossings))
        horizon = t - self.metrics_history_s
        while self._occ_hist and self._occ_hist[0][0] <= horizon:
            self._occ_hist.popleft()
        while self._cross_hist and self._cross_hist[0][0] <= horizon:
            self._cross_hist.popleft()

    # -- observation -----------------------------------------------------------

    def segment_occupancy(self, seg_id: str) -> float:
        seg = self.net.by_id[seg_id]
        return self.segs[seg_id].count / seg.jam_capacity

    def segment_mean_speed(self, seg_id: str) -> float:
        """Moving vehicles travel at free-flow speed; queued ones stand still."""
        st = self.segs[seg_id]
        if st.count == 0:
            return 0.0
        moving = len(st.moving)
        return moving * self.net.by_id[seg_id].free_flow_speed / st.count

    @property
    def last_tick_discharges(self) -> dict[str, int]:
        return self._last_discharged

    def in_network(self) -> int:
        return len(self.vehicles)

    def metrics(self, window: float) -> SimMetrics:
        if window <= 0:
            raise ValueError("window must be > 0")
        if window > self.clock + 1e-9:
            raise ValueError("window exceeds elapsed simulation time")
        t0 = self.clock - window
        trips = []
        for e in reversed(self.exit_log):  # exit log is time-ordered
            if e.exited_s <= t0:
                break
            trips.append(e)
        crossings: dict[str, float] = {}
        for t, cr in self._cross_hist:
            if t <= t0:
                continue
            for node, n in cr.items():
                crossings[node] = crossings.get(node, 0.0) + n
        if not trips and not crossings:
            raise EmptyWindow(f"no traffic in the last {window:g}s")
        occ_rows = [occ for t, occ in self._occ_hist if t > t0]
        occupancy = {}
        if occ_rows:
            arr = np.asarray(occ_rows)
            means = arr.mean(axis=0)
            occupancy = {sid: float(m) for sid, m in zip(self._seg_order, means)}
        intersections = sorted({s.to_node for s in self.net.segments})
        throughput = {
            node: crossings.get(node, 0.0) / (window / 60.0) for node in intersections
        }
        avg_tt = None
        if trips:
            avg_tt = sum(e.exited_s - e.entered_s for e in trips) / len(trips)
        return SimMetrics(
            window_s=window, avg_travel_time=avg_tt,
            throughput_vpm=throughput, occupancy=occupancy, trips=len(trips),
        )


@dataclass
class SignalPlanRuntime:
    plan: object
    anchor: float          # start time of the current cycle
    pending: object = None

    def next_boundary(self, t: float) -> float:
        c = self.plan.cycle_length
        k = math.floor((t - self.anchor) / c) + 1
        return self.anchor + k * c

    def advance(self, t: float) -> None:
        c = self.plan.cycle_length
        while t - self.anchor >= c:
            self.anchor += c
            if self.pending is not None:
                self.plan = self.pending
                self.pending = None
                c = self.plan.cycle_length

    def active_phase(self, t: float):
        offset = (t - self.anchor) % self.plan.cycle_length
        acc = 0.0
        for ph in self.plan.phases:
            acc += ph.green
            if offset < acc:
                return ph
        return self.plan.phases[-1]


def new_simulation(net: RoadNetwork, demand: DemandProfile, seed: int,
                   **kwargs) -> Simulation:
    return Simulation(net, demand, seed, **kwargs)


def fork(snap: SimSnapshot) -> Simulation:
    return Simulation.from_snapshot(snap)


def write_exit_log(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_wire() + "\n")
