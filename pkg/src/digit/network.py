"""Static road-network model: segments, signalized intersections, routes.

Networks are immutable after load and safe for unrestricted concurrent reads.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

from .errors import NoRoute, ParseError, ValidationError

DEFAULT_MIN_GREEN_S = 10.0
DEFAULT_MAX_GREEN_S = 120.0


@dataclass(frozen=True)
class RoadSegment:
    """Directed road link with point-queue parameters."""

    id: str
    from_node: str
    to_node: str
    length: float             # meters
    lanes: int
    free_flow_speed: float    # m/s
    saturation_flow: float    # veh/s discharged while served
    jam_density: float        # veh/m/lane

    def __post_init__(self):
        if self.length <= 0:
            raise ValidationError(f"segment {self.id}: length must be > 0")
        if self.lanes < 1:
            raise ValidationError(f"segment {self.id}: lanes must be >= 1")
        if self.free_flow_speed <= 0:
            raise ValidationError(f"segment {self.id}: free_flow_speed must be > 0")
        if self.saturation_flow <= 0:
            raise ValidationError(f"segment {self.id}: saturation_flow must be > 0")
        if self.jam_density <= 0:
            raise ValidationError(f"segment {self.id}: jam_density must be > 0")
        if self.from_node == self.to_node:
            raise ValidationError(f"segment {self.id}: from_node equals to_node")

    @property
    def travel_time(self) -> float:
        return self.length / self.free_flow_speed

    @property
    def jam_capacity(self) -> float:
        """Maximum vehicles the segment can hold (may be fractional)."""
        return self.jam_density * self.length * self.lanes

    @property
    def max_vehicles(self) -> int:
        return int(math.floor(self.jam_capacity + 1e-9))


@dataclass(frozen=True)
class Phase:
    serves: frozenset[str]
    green: float  # seconds


@dataclass(frozen=True)
class SignalPlan:
    intersection: str
    cycle_length: float
    phases: tuple[Phase, ...]
    min_green: float = DEFAULT_MIN_GREEN_S
    max_green: float = DEFAULT_MAX_GREEN_S


def validate_signal_plan(plan: SignalPlan, incoming=None) -> list[str]:
    """Return the list of timing violations; empty means the plan is valid.

    `incoming` is the set of segment ids entering the intersection; when given,
    coverage (every approach served by >= 1 phase) is checked as well.
    """
    violations = []
    if not plan.phases:
        violations.append("plan has no phases")
    for i, ph in enumerate(plan.phases):
        if ph.green < plan.min_green:
            violations.append(
                f"phase {i} below min_green ({ph.green:g}s < {plan.min_green:g}s)"
            )
        if ph.green > plan.max_green:
            violations.append(
                f"phase {i} above max_green ({ph.green:g}s > {plan.max_green:g}s)"
            )
    total = sum(ph.green for ph in plan.phases)
    if abs(total - plan.cycle_length) > 1e-9:
        violations.append(
            f"phase sum != cycle ({total:g}s != {plan.cycle_length:g}s)"
        )
    if incoming is not None:
        served = set()
        for ph in plan.phases:
            served |= ph.serves
        for seg_id in sorted(incoming):
            if seg_id not in served:
                violations.append(f"incoming segment {seg_id} not served by any phase")
    return violations


@dataclass(frozen=True)
class Route:
    """Ordered, connected sequence of segment ids."""

    segments: tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValidationError("route must be non-empty")

    def __len__(self):
        return len(self.segments)


@dataclass
class RoadNetwork:
    nodes: set[str]
    segments: list[RoadSegment]
    signals: dict[str, SignalPlan]
    sensors: dict[str, str]  # sensor id -> monitored segment id
    by_id: dict[str, RoadSegment] = field(init=False, repr=False)
    _outgoing: dict[str, tuple[RoadSegment, ...]] = field(init=False, repr=False)
    _incoming: dict[str, tuple[RoadSegment, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.by_id = {}
        for seg in self.segments:
            if seg.id in self.by_id:
                raise ValidationError(f"duplicate segment id {seg.id}")
            self.by_id[seg.id] = seg
        for seg in self.segments:
            if seg.from_node not in self.nodes:
                raise ValidationError(
                    f"segment {seg.id}: from node {seg.from_node} not in nodes"
                )
            if seg.to_node not in self.nodes:
                raise ValidationError(
                    f"segment {seg.id}: to node {seg.to_node} not in nodes"
                )
        out: dict[str, list[RoadSegment]] = {}
        inc: dict[str, list[RoadSegment]] = {}
        for seg in sorted(self.segments, key=lambda s: s.id):
            out.setdefault(seg.from_node, []).append(seg)
            inc.setdefault(seg.to_node, []).append(seg)
        self._outgoing = {n: tuple(v) for n, v in out.items()}
        self._incoming = {n: tuple(v) for n, v in inc.items()}
        for node, plan in self.signals.items():
            if node not in self.nodes:
                raise ValidationError(f"signal at {node}: node not in nodes")
            violations = validate_signal_plan(plan, incoming=self.incoming_ids(node))
            if violations:
                raise ValidationError(f"signal at {node}: {violations[0]}")
        for sensor, seg_id in self.sensors.items():
            if seg_id not in self.by_id:
                raise ValidationError(
                    f"sensor {sensor}: segment {seg_id} does not exist"
                )

    def outgoing(self, node: str) -> tuple[RoadSegment, ...]:
        return self._outgoing.get(node, ())

    def incoming(self, node: str) -> tuple[RoadSegment, ...]:
        return self._incoming.get(node, ())

    def incoming_ids(self, node: str) -> set[str]:
        return {seg.id for seg in self.incoming(node)}

    def route_is_valid(self, route: Route) -> bool:
        """Adjacency check: consecutive segments share a node, all ids exist."""
        try:
            segs = [self.by_id[sid] for sid in route.segments]
        except KeyError:
            return False
        return all(a.to_node == b.from_node for a, b in zip(segs, segs[1:]))


def load_network(path) -> RoadNetwork:
    """Load and validate a network JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read network file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed network file {path}: {exc}") from exc
    return network_from_dict(doc)


def network_from_dict(doc: dict) -> RoadNetwork:
    if not isinstance(doc, dict):
        raise ParseError("network document must be a JSON object")
    try:
        nodes = set(doc["nodes"])
        segments = [
            RoadSegment(
                id=s["id"],
                from_node=s["from"],
                to_node=s["to"],
                length=float(s["length_m"]),
                lanes=int(s["lanes"]),
                free_flow_speed=float(s["vf_mps"]),
                saturation_flow=float(s["sat_flow_vps"]),
                jam_density=float(s["jam_density_vpm"]),
            )
            for s in doc["segments"]
        ]
        signals = {}
        for sig in doc.get("signals", []):
            phases = tuple(
                Phase(serves=frozenset(p["serves"]), green=float(p["green_s"]))
                for p in sig["phases"]
            )
            signals[sig["node"]] = SignalPlan(
                intersection=sig["node"],
                cycle_length=float(sig["cycle_s"]),
                phases=phases,
                min_green=float(sig.get("min_green_s", DEFAULT_MIN_GREEN_S)),
                max_green=float(sig.get("max_green_s", DEFAULT_MAX_GREEN_S)),
            )
        sensors = {s["id"]: s["segment"] for s in doc.get("sensors", [])}
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"network document missing or ill-typed field: {exc}") from exc
    return RoadNetwork(nodes=nodes, segments=segments, signals=signals, sensors=sensors)


def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "nodes": sorted(net.nodes),
        "segments": [
            {
                "id": s.id,
                "from": s.from_node,
                "to": s.to_node,
                "length_m": s.length,
                "lanes": s.lanes,
                "vf_mps": s.free_flow_speed,
                "sat_flow_vps": s.saturation_flow,
                "jam_density_vpm": s.jam_density,
            }
            for s in net.segments
        ],
        "signals": [
            {
                "node": node,
                "cycle_s": plan.cycle_length,
                "min_green_s": plan.min_green,
                "max_green_s": plan.max_green,
                "phases": [
                    {"serves": sorted(ph.serves), "green_s": ph.green}
                    for ph in plan.phases
                ],
            }
            for node, plan in sorted(net.signals.items())
        ],
        "sensors": [
            {"id": sid, "segment": seg} for sid, seg in sorted(net.sensors.items())
        ],
    }


def shortest_route(net: RoadNetwork, weights: dict[str, float], origin: str, dest: str) -> Route:
    """Minimum-total-weight route; ties broken by lexicographically smallest
    segment-id sequence. Segments absent from `weights` cost their free-flow
    travel time."""
    if origin not in net.nodes:
        raise NoRoute(f"origin {origin} not in network")
    if dest not in net.nodes:
        raise NoRoute(f"destination {dest} not in network")
    if origin == dest:
        raise NoRoute("origin equals destination; routes must be non-empty")
    for sid, w in weights.items():
        if w < 0:
            raise ValidationError(f"weight for {sid} is negative")
    # Heap keys (cost, segment-id path) make the pop order realize the
    # lexicographic tie-break; first finalization of a node is optimal.
    heap: list[tuple[float, tuple[str, ...], str]] = [(0.0, (), origin)]
    done: set[str] = set()
    while heap:
        cost, path, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == dest:
            return Route(path)
        for seg in net.outgoing(node):
            if seg.to_node in done:
                continue
            w = weights.get(seg.id, seg.travel_time)
            heapq.heappush(heap, (cost + w, path + (seg.id,), seg.to_node))
    raise NoRoute(f"no route from {origin} to {dest}")


def free_flow_weights(net: RoadNetwork) -> dict[str, float]:
    return {seg.id: seg.travel_time for seg in net.segments}
