"""Static road-network model: lanes, signal phase tables, routes, scenario config.

Everything in this module is immutable after loading and safe to share
across workers. The scenario file format is a YAML document; see
``scenario_document`` for the emitter and ``load_scenario`` for the
validating parser.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import yaml

SHORT_LANE_MAX_M = 15.0  # afferent lanes below this get predecessor grouping

GREEN = "GREEN"
RED = "RED"

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Scenario document failed validation. The message names the offending key."""


class DemandLevel(str, Enum):
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"


# Total demand over all entry lanes, vehicles/hour.
TOTAL_DEMAND_VEH_H = {
    DemandLevel.LOW: 70.0,
    DemandLevel.MODERATE: 500.0,
    DemandLevel.HIGH: 2500.0,
}


@dataclass(frozen=True)
class Lane:
    id: str
    length: float                      # m, > 0
    speed_limit: float                 # m/s, > 0
    predecessors: tuple[str, ...] = ()
    successor: str | None = None
    entry: bool = False                # vehicles spawn here

    @property
    def is_short(self) -> bool:
        return self.length < SHORT_LANE_MAX_M


@dataclass(frozen=True)
class Phase:
    """Green/red assignment over an intersection's afferent lanes."""

    green: frozenset[str]

    def is_green(self, lane_id: str) -> bool:
        return lane_id in self.green


@dataclass(frozen=True)
class Intersection:
    id: str
    afferent_lanes: tuple[str, ...]    # ordering fixes the observation layout
    phases: tuple[Phase, ...]
    min_green: float                   # s
    amber_duration: float              # s

    @property
    def n_phases(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class RouteSpec:
    id: str
    lanes: tuple[str, ...]
    free_flow_time_base: float         # s, sum of length/speed_limit


@dataclass(frozen=True)
class DriverParams:
    """Car-following model constants. Defaults follow the common urban tuning."""

    max_accel: float = 2.6             # m/s^2
    comfort_decel: float = 4.5         # m/s^2
    min_gap: float = 2.5               # m, standstill spacing
    headway: float = 1.0               # s, desired time gap
    accel_exponent: float = 4.0
    emergency_decel: float = 9.0       # m/s^2, clamp floor
    vehicle_length: float = 5.0        # m, effective length for gap computation
    halt_speed: float = 0.1            # m/s, below this a vehicle counts as stopped
    stopline_margin: float = 1.0       # m, standoff from the stop line when held


@dataclass(frozen=True)
class SpeedFactorDist:
    mean: float = 1.0
    std: float = 0.1
    clip_lo: float = 0.8
    clip_hi: float = 1.2


@dataclass(frozen=True)
class Network:
    lanes: dict[str, Lane]
    intersections: dict[str, Intersection]
    routes: dict[str, RouteSpec]
    conflicts: frozenset[frozenset[str]]   # unordered lane-id pairs

    def conflicting(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.conflicts


@dataclass(frozen=True)
class ScenarioConfig:
    network: Network
    demands: dict[str, float]          # entry lane id -> veh/h
    episode_length: float = 3600.0     # s
    dt: float = 0.5                    # s
    decision_interval: float = 5.0     # s, agent cadence
    speed_factors: SpeedFactorDist = SpeedFactorDist()
    seed: int = 0
    driver: DriverParams = DriverParams()

    @property
    def substeps_per_decision(self) -> int:
        return round(self.decision_interval / self.dt)


def _require(cond: bool, key: str, detail: str) -> None:
    if not cond:
        raise ScenarioError(f"{key}: {detail}")


def _check_keys(section: str, mapping: dict, allowed: set[str], required: set[str]) -> None:
    for key in mapping:
        _require(key in allowed, f"{section}.{key}", "unknown key")
    for key in required:
        _require(key in mapping, f"{section}.{key}", "missing required key")


def load_scenario(document: str) -> ScenarioConfig:
    """Parse and fully validate a scenario document.

    Raises ScenarioError naming the offending key on any schema violation,
    dangling lane reference, or conflicting-green phase table.
    """
    try:
        raw = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"document: not valid YAML ({exc})") from None
    _require(isinstance(raw, dict), "document", "top level must be a mapping")
    _check_keys(
        "document", raw,
        allowed={"version", "lanes", "intersections", "conflicts", "routes",
                 "demands", "simulation", "driver"},
        required={"lanes", "intersections", "routes", "demands", "simulation"},
    )
    _require(raw.get("version", SCHEMA_VERSION) == SCHEMA_VERSION,
             "version", f"unsupported schema version {raw.get('version')!r}")

    lanes = _parse_lanes(raw["lanes"])
    conflicts = _parse_conflicts(raw.get("conflicts", []), lanes)
    intersections = _parse_intersections(raw["intersections"], lanes, conflicts)
    routes = _parse_routes(raw["routes"], lanes)
    network = Network(lanes=lanes, intersections=intersections,
                      routes=routes, conflicts=conflicts)
    demands = _parse_demands(raw["demands"], network)
    sim = _parse_simulation(raw["simulation"])
    driver = _parse_driver(raw.get("driver", {}))
    return ScenarioConfig(network=network, demands=demands, driver=driver, **sim)


def _parse_lanes(section) -> dict[str, Lane]:
    _require(isinstance(section, dict) and section, "lanes", "must be a non-empty mapping")
    lanes: dict[str, Lane] = {}
    for lane_id, spec in section.items():
        key = f"lanes.{lane_id}"
        _require(isinstance(spec, dict), key, "must be a mapping")
        _check_keys(key, spec, allowed={"length", "speed_limit", "successor", "entry"},
                    required={"length", "speed_limit"})
        length = float(spec["length"])
        limit = float(spec["speed_limit"])
        _require(length > 0, f"{key}.length", "must be > 0")
        _require(limit > 0, f"{key}.speed_limit", "must be > 0")
        lanes[lane_id] = Lane(
            id=lane_id, length=length, speed_limit=limit,
            successor=spec.get("successor"), entry=bool(spec.get("entry", False)),
        )
    # Resolve successors and derive predecessor lists in declaration order.
    preds: dict[str, list[str]] = {lid: [] for lid in lanes}
    for lane in lanes.values():
        if lane.successor is not None:
            _require(lane.successor in lanes, f"lanes.{lane.id}.successor",
                     f"dangling lane reference {lane.successor!r}")
            preds[lane.successor].append(lane.id)
    return {
        lid: replace(lane, predecessors=tuple(preds[lid]))
        for lid, lane in lanes.items()
    }


def _parse_conflicts(section, lanes: dict[str, Lane]) -> frozenset[frozenset[str]]:
    _require(isinstance(section, list), "conflicts", "must be a list of lane-id pairs")
    pairs = set()
    for i, pair in enumerate(section):
        key = f"conflicts[{i}]"
        _require(isinstance(pair, list) and len(pair) == 2, key, "must be a pair")
        a, b = pair
        for lid in (a, b):
            _require(lid in lanes, key, f"dangling lane reference {lid!r}")
        _require(a != b, key, "a lane cannot conflict with itself")
        pairs.add(frozenset((a, b)))
    return frozenset(pairs)


def _parse_intersections(section, lanes, conflicts) -> dict[str, Intersection]:
    _require(isinstance(section, dict) and section, "intersections",
             "must be a non-empty mapping")
    result: dict[str, Intersection] = {}
    for iid, spec in section.items():
        key = f"intersections.{iid}"
        _require(isinstance(spec, dict), key, "must be a mapping")
        _check_keys(key, spec,
                    allowed={"afferent_lanes", "phases", "min_green", "amber"},
                    required={"afferent_lanes", "phases", "min_green", "amber"})
        afferent = tuple(spec["afferent_lanes"])
        _require(len(afferent) > 0, f"{key}.afferent_lanes", "must be non-empty")
        _require(len(set(afferent)) == len(afferent), f"{key}.afferent_lanes",
                 "duplicate lane id")
        for lid in afferent:
            _require(lid in lanes, f"{key}.afferent_lanes",
                     f"dangling lane reference {lid!r}")
        min_green = float(spec["min_green"])
        amber = float(spec["amber"])
        _require(amber >= 0, f"{key}.amber", "must be >= 0")
        _require(min_green > amber, f"{key}.min_green", "must be > amber")
        phases = []
        raw_phases = spec["phases"]
        _require(isinstance(raw_phases, list) and len(raw_phases) >= 2,
                 f"{key}.phases", "need at least 2 phases")
        for p, signals in enumerate(raw_phases):
            pkey = f"{key}.phases[{p}]"
            _require(isinstance(signals, dict), pkey, "must map lane id -> GREEN/RED")
            _require(set(signals) == set(afferent), pkey,
                     "must assign a signal to every afferent lane, and only those")
            green = []
            for lid, value in signals.items():
                _require(value in (GREEN, RED), f"{pkey}.{lid}",
                         f"signal must be GREEN or RED, got {value!r}")
                if value == GREEN:
                    green.append(lid)
            for a in green:
                for b in green:
                    _require(frozenset((a, b)) not in conflicts, pkey,
                             f"conflicting-green: {a} and {b}")
            phases.append(Phase(green=frozenset(green)))
        result[iid] = Intersection(id=iid, afferent_lanes=afferent,
                                   phases=tuple(phases), min_green=min_green,
                                   amber_duration=amber)
    return result


def _parse_routes(section, lanes: dict[str, Lane]) -> dict[str, RouteSpec]:
    _require(isinstance(section, dict) and section, "routes",
             "must be a non-empty mapping")
    routes: dict[str, RouteSpec] = {}
    for rid, lane_ids in section.items():
        key = f"routes.{rid}"
        _require(isinstance(lane_ids, list) and lane_ids, key,
                 "must be a non-empty lane-id list")
        for lid in lane_ids:
            _require(lid in lanes, key, f"dangling lane reference {lid!r}")
        _require(len(set(lane_ids)) == len(lane_ids), key,
                 "route revisits a lane (cycle)")
        for a, b in zip(lane_ids, lane_ids[1:]):
            _require(lanes[a].successor == b, key,
                     f"lanes {a} -> {b} are not connected")
        base = sum(lanes[lid].length / lanes[lid].speed_limit for lid in lane_ids)
        routes[rid] = RouteSpec(id=rid, lanes=tuple(lane_ids), free_flow_time_base=base)
    return routes


def _parse_demands(section, network: Network) -> dict[str, float]:
    _require(isinstance(section, dict), "demands", "must be a mapping")
    demands: dict[str, float] = {}
    starts = {route.lanes[0] for route in network.routes.values()}
    for lid, value in section.items():
        key = f"demands.{lid}"
        _require(lid in network.lanes, key, "dangling lane reference")
        _require(network.lanes[lid].entry, key, "demand on a non-entry lane")
        rate = float(value)
        _require(rate >= 0, key, "must be >= 0")
        if rate > 0:
            _require(lid in starts, key, "no route starts at this entry lane")
        demands[lid] = rate
    return demands


def _parse_simulation(section) -> dict:
    _check_keys("simulation", section,
                allowed={"episode_length", "dt", "decision_interval", "seed",
                         "speed_factor"},
                required={"episode_length", "dt", "decision_interval"})
    episode_length = float(section["episode_length"])
    dt = float(section["dt"])
    interval = float(section["decision_interval"])
    _require(episode_length > 0, "simulation.episode_length", "must be > 0")
    _require(dt > 0, "simulation.dt", "must be > 0")
    ratio = interval / dt
    _require(abs(ratio - round(ratio)) < 1e-9 and ratio >= 1,
             "simulation.decision_interval", "must be an integer multiple of dt")
    sf = section.get("speed_factor", {})
    _check_keys("simulation.speed_factor", sf,
                allowed={"mean", "std", "clip_lo", "clip_hi"}, required=set())
    factors = SpeedFactorDist(
        mean=float(sf.get("mean", 1.0)), std=float(sf.get("std", 0.1)),
        clip_lo=float(sf.get("clip_lo", 0.8)), clip_hi=float(sf.get("clip_hi", 1.2)),
    )
    _require(factors.clip_lo > 0, "simulation.speed_factor.clip_lo", "must be > 0")
    _require(factors.clip_lo <= factors.clip_hi, "simulation.speed_factor.clip_hi",
             "must be >= clip_lo")
    _require(factors.std >= 0, "simulation.speed_factor.std", "must be >= 0")
    return {
        "episode_length": episode_length,
        "dt": dt,
        "decision_interval": interval,
        "seed": int(section.get("seed", 0)),
        "speed_factors": factors,
    }


def _parse_driver(section) -> DriverParams:
    defaults = DriverParams()
    _check_keys("driver", section,
                allowed={f for f in defaults.__dataclass_fields__}, required=set())
    params = replace(defaults, **{k: float(v) for k, v in section.items()})
    _require(params.max_accel > 0, "driver.max_accel", "must be > 0")
    _require(params.comfort_decel > 0, "driver.comfort_decel", "must be > 0")
    _require(params.emergency_decel >= params.comfort_decel,
             "driver.emergency_decel", "must be >= comfort_decel")
    _require(params.vehicle_length > 0, "driver.vehicle_length", "must be > 0")
    return params


def scenario_document(config: ScenarioConfig) -> str:
    """Serialize a ScenarioConfig back to the scenario file format."""
    net = config.network
    doc = {
        "version": SCHEMA_VERSION,
        "lanes": {
            lane.id: _lane_entry(lane) for lane in net.lanes.values()
        },
        "intersections": {
            inter.id: {
                "afferent_lanes": list(inter.afferent_lanes),
                "min_green": inter.min_green,
                "amber": inter.amber_duration,
                "phases": [
                    {lid: (GREEN if phase.is_green(lid) else RED)
                     for lid in inter.afferent_lanes}
                    for phase in inter.phases
                ],
            }
            for inter in net.intersections.values()
        },
        "conflicts": sorted(sorted(pair) for pair in net.conflicts),
        "routes": {route.id: list(route.lanes) for route in net.routes.values()},
        "demands": dict(config.demands),
        "simulation": {
            "episode_length": config.episode_length,
            "dt": config.dt,
            "decision_interval": config.decision_interval,
            "seed": config.seed,
            "speed_factor": {
                "mean": config.speed_factors.mean,
                "std": config.speed_factors.std,
                "clip_lo": config.speed_factors.clip_lo,
                "clip_hi": config.speed_factors.clip_hi,
            },
        },
        "driver": {
            name: getattr(config.driver, name)
            for name in DriverParams.__dataclass_fields__
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


def _lane_entry(lane: Lane) -> dict:
    entry: dict = {"length": lane.length, "speed_limit": lane.speed_limit}
    if lane.successor is not None:
        entry["successor"] = lane.successor
    if lane.entry:
        entry["entry"] = True
    return entry


def build_single_intersection(
    demand_level: DemandLevel | str,
    approach_length: float = 300.0,
    exit_length: float = 300.0,
    speed_limit: float = 13.89,
    episode_length: float = 3600.0,
    dt: float = 0.5,
    decision_interval: float = 5.0,
    seed: int = 0,
) -> ScenarioConfig:
    """Built-in scenario: two perpendicular one-way two-lane streets, one signal.

    Vehicles go straight only. Two phases (north-south green / west-east
    green), amber 2 s, min green 8 s. Total demand per level is split evenly
    over the four entry lanes.
    """
    level = DemandLevel(demand_level)
    total = TOTAL_DEMAND_VEH_H[level]

    lanes: dict[str, Lane] = {}
    routes: dict[str, list[str]] = {}
    for street in ("ns_r", "ns_l", "we_r", "we_l"):
        lane_in, lane_out = f"{street}_in", f"{street}_out"
        lanes[lane_in] = Lane(id=lane_in, length=approach_length,
                              speed_limit=speed_limit, successor=lane_out,
                              entry=True)
        lanes[lane_out] = Lane(id=lane_out, length=exit_length,
                               speed_limit=speed_limit,
                               predecessors=(lane_in,))
        routes[street] = [lane_in, lane_out]

    ns_in = ("ns_r_in", "ns_l_in")
    we_in = ("we_r_in", "we_l_in")
    phases = (Phase(green=frozenset(ns_in)), Phase(green=frozenset(we_in)))
    intersection = Intersection(
        id="x0", afferent_lanes=ns_in + we_in, phases=phases,
        min_green=8.0, amber_duration=2.0,
    )
    conflicts = frozenset(frozenset((a, b)) for a in ns_in for b in we_in)
    network = Network(
        lanes=lanes,
        intersections={"x0": intersection},
        routes={
            rid: RouteSpec(
                id=rid, lanes=tuple(lane_ids),
                free_flow_time_base=sum(
                    lanes[lid].length / lanes[lid].speed_limit for lid in lane_ids
                ),
            )
            for rid, lane_ids in routes.items()
        },
        conflicts=conflicts,
    )
    demands = {lid: total / 4.0 for lid in ns_in + we_in}
    return ScenarioConfig(
        network=network, demands=demands, episode_length=episode_length,
        dt=dt, decision_interval=decision_interval, seed=seed,
    )


def effective_afferent_lanes(
    intersection: Intersection, network: Network
) -> tuple[tuple[str, int], ...]:
    """Map lanes to observation slots, folding short lanes' direct predecessors in.

    Returns (lane_id, slot_index) pairs. Slot index i belongs to the i-th
    afferent lane; a short afferent lane contributes itself and each of its
    direct predecessors to the same slot. Ordering is deterministic and
    stable across calls.
    """
    pairs: list[tuple[str, int]] = []
    for slot, lane_id in enumerate(intersection.afferent_lanes):
        lane = network.lanes[lane_id]
        pairs.append((lane_id, slot))
        if lane.is_short:
            for pred in lane.predecessors:
                pairs.append((pred, slot))
    return tuple(pairs)
