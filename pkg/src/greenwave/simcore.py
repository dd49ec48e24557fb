"""Fixed-step microscopic traffic simulation.

Time-stepped car following on a lane graph with signalized intersections,
stochastic spawning, and per-vehicle speed-advice enforcement. A SimState is
single-owner: it is mutated only by ``step`` and is never shared between
episodes; distinct states may run fully in parallel.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .netmodel import DriverParams, Lane, ScenarioConfig

_EPS = 1e-9


class CompletedTrip(NamedTuple):
    vehicle_id: int
    trip_time: float
    free_flow_time: float


class Vehicle:
    """Dynamic vehicle state. ``cap`` caches the current effective speed cap."""

    __slots__ = ("id", "route", "lane_index", "pos", "speed", "speed_factor",
                 "spawn_time", "lane_entry_time", "advice", "finished_time",
                 "halted_since", "accel", "cap")

    def __init__(self, vid, route, speed_factor, spawn_time, speed):
        self.id = vid
        self.route = route
        self.lane_index = 0
        self.pos = 0.0
        self.speed = speed
        self.speed_factor = speed_factor
        self.spawn_time = spawn_time
        self.lane_entry_time = spawn_time
        self.advice = None
        self.finished_time = None
        self.halted_since = None
        self.accel = 0.0
        self.cap = 0.0

    def lane_id(self) -> str:
        return self.route.lanes[self.lane_index]

    def time_on_lane(self, now: float) -> float:
        return now - self.lane_entry_time


class SignalController:
    """Per-intersection phase state machine with amber and min-green rules.

    A committed change always shows ``amber_duration`` seconds of amber first:
    lanes losing green read as red for car-following during that window.
    ``phase_elapsed`` is reset when the pending phase commits, so amber time
    counts toward the outgoing phase.
    """

    __slots__ = ("intersection", "current_phase", "phase_elapsed",
                 "pending_phase", "amber_remaining")

    def __init__(self, intersection, start_elapsed: float | None = None):
        self.intersection = intersection
        self.current_phase = 0
        self.phase_elapsed = (intersection.min_green if start_elapsed is None
                              else start_elapsed)
        self.pending_phase: int | None = None
        self.amber_remaining = 0.0

    def tick(self, dt: float) -> None:
        if self.pending_phase is not None and self.amber_remaining <= _EPS:
            self.current_phase = self.pending_phase
            self.pending_phase = None
            self.amber_remaining = 0.0
            self.phase_elapsed = dt
            return
        if self.pending_phase is not None:
            self.amber_remaining -= dt
        self.phase_elapsed += dt

    def request(self, target: int) -> bool:
        """Ask for a phase change; returns whether the request was accepted.

        Identity requests are accepted no-ops. Requests are rejected without
        state change while the minimum green time has not passed or while a
        transition is already in progress.
        """
        if not 0 <= target < len(self.intersection.phases):
            raise ValueError(f"phase index {target} out of range")
        if target == self.current_phase and self.pending_phase is None:
            return True
        if self.pending_phase is not None:
            return False
        if self.phase_elapsed < self.intersection.min_green - _EPS:
            return False
        self.pending_phase = target
        self.amber_remaining = self.intersection.amber_duration
        return True

    def shows_green(self, lane_id: str) -> bool:
        phases = self.intersection.phases
        if lane_id not in phases[self.current_phase].green:
            return False
        pending = self.pending_phase
        return pending is None or lane_id in phases[pending].green

    @property
    def in_amber(self) -> bool:
        return self.pending_phase is not None

    def min_green_passed(self) -> bool:
        return (self.pending_phase is None
                and self.phase_elapsed >= self.intersection.min_green - _EPS)


def request_phase(controller: SignalController, target: int) -> bool:
    return controller.request(target)


class SimState:
    """Mutable episode state: vehicles per lane, controllers, RNG, trip log."""

    def __init__(self, scenario: ScenarioConfig,
                 seed: int | np.random.SeedSequence | None = None,
                 trace_hook: Callable[["SimState"], None] | None = None):
        self.scenario = scenario
        net = scenario.network
        self.step_count = 0
        self.rng = np.random.default_rng(
            scenario.seed if seed is None else seed)
        # Front of each list is the vehicle closest to the lane end.
        self.lane_vehicles: dict[str, list[Vehicle]] = {
            lid: [] for lid in net.lanes}
        self.vehicles: dict[int, Vehicle] = {}
        self.controllers = {
            iid: SignalController(inter)
            for iid, inter in net.intersections.items()
        }
        self.lane_controller: dict[str, SignalController] = {}
        for iid, inter in net.intersections.items():
            for lid in inter.afferent_lanes:
                self.lane_controller[lid] = self.controllers[iid]
        # Pending (speed_factor, route) pairs per entry lane, for arrivals
        # whose insertion was suppressed by an occupied entry segment.
        self.pending_spawns: dict[str, list[tuple[float, object]]] = {
            lid: [] for lid in scenario.demands}
        self.entry_routes = {
            lid: [r for r in net.routes.values() if r.lanes[0] == lid]
            for lid in scenario.demands
        }
        self.completed_trips: list[CompletedTrip] = []
        self.spawned = 0
        self.arrived = 0
        self.next_vehicle_id = 0
        self.integrity_events: list[str] = []
        self.trace_hook = trace_hook

    @property
    def time(self) -> float:
        return self.step_count * self.scenario.dt

    def vehicles_on_network(self) -> int:
        return len(self.vehicles)


def effective_speed_cap(vehicle: Vehicle, lane: Lane) -> float:
    """Upper speed bound: speed factor times the lower of limit and advice."""
    limit = lane.speed_limit
    advice = vehicle.advice
    if advice is not None and advice < limit:
        limit = advice
    return vehicle.speed_factor * limit


def set_advice(state: SimState, vehicle: Vehicle, advice: float | None) -> None:
    """Attach (or clear) a speed advice and refresh the cached cap."""
    vehicle.advice = advice
    lane = state.scenario.network.lanes[vehicle.lane_id()]
    vehicle.cap = effective_speed_cap(vehicle, lane)


def _idm_raw(speed, desired, gap, approach,
             a_max, s0, headway, inv_two_sqrt_ab, delta, b_emergency):
    """Car-following acceleration; ``gap`` may be +inf for a free road."""
    s_star = s0 + speed * headway + speed * approach * inv_two_sqrt_ab
    if delta == 4.0:
        r = speed / desired
        r *= r
        free_term = r * r
    else:
        free_term = (speed / desired) ** delta
    interaction = s_star / gap
    a = a_max * (1.0 - free_term - interaction * interaction)
    if a < -b_emergency:
        return -b_emergency
    if a > a_max:
        return a_max
    return a


def idm_acceleration(speed: float, desired_speed: float, gap: float,
                     approach_rate: float, driver: DriverParams) -> float:
    """Acceleration of the intelligent-driver car-following model.

    The result is clamped to [-emergency_decel, max_accel]. ``gap`` must be
    positive (pass math.inf for an unobstructed road); non-positive gaps are
    handled by the caller as simulation-integrity events.
    """
    inv = 1.0 / (2.0 * math.sqrt(driver.max_accel * driver.comfort_decel))
    return _idm_raw(speed, desired_speed, gap, approach_rate,
                    driver.max_accel, driver.min_gap, driver.headway,
                    inv, driver.accel_exponent, driver.emergency_decel)


def red_light_as_obstacle(vehicle: Vehicle, lane: Lane,
                          controller: SignalController,
                          driver: DriverParams) -> tuple[float, float] | None:
    """Virtual standing obstacle at the stop line for a red or amber signal.

    Applies to the front vehicle of a lane. Returns (gap, approach_rate) or
    None when the signal is green. A vehicle that is already at the line, or
    physically cannot stop before it even at emergency deceleration, proceeds
    (None) instead of braking into the intersection.
    """
    if controller.shows_green(lane.id):
        return None
    gap = lane.length - vehicle.pos - driver.stopline_margin
    if gap <= 0.0:
        return None
    if vehicle.speed * vehicle.speed > 2.0 * driver.emergency_decel * gap:
        return None
    return gap, vehicle.speed


def lane_leader(state: SimState, lane_id: str) -> Vehicle | None:
    """The moving vehicle closest to the lane end; None if all are queued."""
    halt = state.scenario.driver.halt_speed
    for vehicle in state.lane_vehicles[lane_id]:
        if vehicle.speed >= halt:
            return vehicle
    return None


def queue_metrics(state: SimState, lane_id: str) -> tuple[int, float, float]:
    """(queue length, queue back position, total waiting time) for a lane.

    The queue is the contiguous run of halted vehicles from the stop line
    backward; it ends at the first moving vehicle. The back position is the
    rear of the last queued vehicle (the lane end when the queue is empty),
    and waiting time sums each queued vehicle's continuous halted duration.
    """
    drv = state.scenario.driver
    halt = drv.halt_speed
    now = state.time
    count = 0
    total_wait = 0.0
    back_pos = state.scenario.network.lanes[lane_id].length
    for vehicle in state.lane_vehicles[lane_id]:
        if vehicle.speed >= halt:
            break
        count += 1
        back_pos = vehicle.pos - drv.vehicle_length
        if vehicle.halted_since is not None:
            total_wait += now - vehicle.halted_since
    return count, back_pos, total_wait


def spawn_vehicles(state: SimState) -> list[Vehicle]:
    """Draw arrivals and insert them where the entry segment is clear.

    Per entry lane and step, one Bernoulli draw with p = demand * dt / 3600.
    Arrivals whose insertion would violate the safety gap stay pending and
    are carried to later steps. New vehicles enter at their full desired
    speed so an unconstrained trip has (near) zero delay.
    """
    sc = state.scenario
    drv = sc.driver
    dt = sc.dt
    rng = state.rng
    now = state.time
    factors = sc.speed_factors
    inv_two_sqrt_ab = 1.0 / (2.0 * math.sqrt(drv.max_accel * drv.comfort_decel))
    spawned: list[Vehicle] = []
    for lane_id, demand in sc.demands.items():
        pending = state.pending_spawns[lane_id]
        if demand > 0.0 and rng.random() < demand * dt / 3600.0:
            factor = float(np.clip(rng.normal(factors.mean, factors.std),
                                   factors.clip_lo, factors.clip_hi))
            routes = state.entry_routes[lane_id]
            route = routes[0] if len(routes) == 1 else \
                routes[int(rng.integers(len(routes)))]
            pending.append((factor, route))
        while pending:
            factor, route = pending[0]
            lane = sc.network.lanes[lane_id]
            entry_speed = factor * lane.speed_limit
            occupants = state.lane_vehicles[lane_id]
            if occupants:
                tail = occupants[-1]
                gap = tail.pos - drv.vehicle_length
                desired_gap = (drv.min_gap + entry_speed * drv.headway
                               + entry_speed * (entry_speed - tail.speed)
                               * inv_two_sqrt_ab)
                if gap <= max(desired_gap, drv.min_gap):
                    break
            pending.pop(0)
            vehicle = Vehicle(state.next_vehicle_id, route, factor, now,
                              entry_speed)
            state.next_vehicle_id += 1
            vehicle.cap = effective_speed_cap(vehicle, lane)
            if vehicle.speed < drv.halt_speed:
                vehicle.halted_since = now
            occupants.append(vehicle)
            state.vehicles[vehicle.id] = vehicle
            state.spawned += 1
            spawned.append(vehicle)
    return spawned


def step(state: SimState) -> None:
    """Advance the simulation by one dt.

    Order: signal controllers tick, accelerations from a consistent snapshot,
    ballistic speed/position update (speed clamped to [0, cap]), lane
    transfers and arrivals, spawns, trace hook.
    """
    sc = state.scenario
    drv = sc.driver
    net = sc.network
    dt = sc.dt
    t_end = (state.step_count + 1) * dt

    a_max = drv.max_accel
    s0 = drv.min_gap
    headway = drv.headway
    delta = drv.accel_exponent
    b_emg = drv.emergency_decel
    veh_len = drv.vehicle_length
    halt = drv.halt_speed
    inv_two_sqrt_ab = 1.0 / (2.0 * math.sqrt(a_max * drv.comfort_decel))

    for ctrl in state.controllers.values():
        ctrl.tick(dt)

    lanes = net.lanes
    lane_vehicles = state.lane_vehicles
    lane_controller = state.lane_controller
    inf = math.inf

    # Pass 1: accelerations against the pre-update snapshot.
    for lane_id, vehicles in lane_vehicles.items():
        if not vehicles:
            continue
        lane = lanes[lane_id]
        front = vehicles[0]
        gap = inf
        approach = 0.0
        ctrl = lane_controller.get(lane_id)
        obstacle = None if ctrl is None else \
            red_light_as_obstacle(front, lane, ctrl, drv)
        if obstacle is not None:
            gap, approach = obstacle
        elif lane.successor is not None:
            beyond = lane_vehicles[lane.successor]
            if beyond:
                tail = beyond[-1]
                gap = lane.length - front.pos + tail.pos - veh_len
                approach = front.speed - tail.speed
        if gap <= 0.0:
            state.integrity_events.append(
                f"t={t_end:.2f}: non-positive gap ahead of vehicle "
                f"{front.id} on {lane_id}")
            front.accel = -b_emg
        else:
            front.accel = _idm_raw(front.speed, front.cap, gap, approach,
                                   a_max, s0, headway, inv_two_sqrt_ab,
                                   delta, b_emg)
        leader = front
        for i in range(1, len(vehicles)):
            vehicle = vehicles[i]
            gap = leader.pos - vehicle.pos - veh_len
            if gap <= 0.0:
                state.integrity_events.append(
                    f"t={t_end:.2f}: non-positive gap between vehicles "
                    f"{leader.id} and {vehicle.id} on {lane_id}")
                vehicle.accel = -b_emg
            else:
                vehicle.accel = _idm_raw(
                    vehicle.speed, vehicle.cap, gap,
                    vehicle.speed - leader.speed,
                    a_max, s0, headway, inv_two_sqrt_ab, delta, b_emg)
            leader = vehicle

    # Pass 2: ballistic kinematics with exact stop handling.
    for vehicles in lane_vehicles.values():
        for vehicle in vehicles:
            v = vehicle.speed
            a = vehicle.accel
            v_new = v + a * dt
            if v_new <= 0.0:
                v_new = 0.0
                if a < 0.0:
                    vehicle.pos += -0.5 * v * v / a
            else:
                if v_new > vehicle.cap:
                    v_new = vehicle.cap
                vehicle.pos += 0.5 * (v + v_new) * dt
            vehicle.speed = v_new
            if v_new < halt:
                if vehicle.halted_since is None:
                    vehicle.halted_since = t_end
            else:
                vehicle.halted_since = None

    # Pass 3: lane transfers and arrivals.
    for lane_id in lane_vehicles:
        vehicles = lane_vehicles[lane_id]
        while vehicles:
            front = vehicles[0]
            lane = lanes[front.lane_id()]
            if front.pos < lane.length:
                break
            vehicles.pop(0)
            _advance_route(state, front, t_end)

    state.step_count += 1
    spawn_vehicles(state)
    if state.trace_hook is not None:
        state.trace_hook(state)


def _advance_route(state: SimState, vehicle: Vehicle, now: float) -> None:
    """Move a vehicle past the end of its lane, possibly chaining short lanes."""
    lanes = state.scenario.network.lanes
    while True:
        lane = lanes[vehicle.lane_id()]
        overshoot = vehicle.pos - lane.length
        if overshoot < 0.0:
            break
        if vehicle.lane_index + 1 >= len(vehicle.route.lanes):
            vehicle.finished_time = now
            trip_time = now - vehicle.spawn_time
            free_flow = vehicle.route.free_flow_time_base / vehicle.speed_factor
            state.completed_trips.append(
                CompletedTrip(vehicle.id, trip_time, free_flow))
            state.arrived += 1
            del state.vehicles[vehicle.id]
            return
        vehicle.lane_index += 1
        vehicle.pos = overshoot
        vehicle.lane_entry_time = now
        vehicle.advice = None
        new_lane = lanes[vehicle.lane_id()]
        vehicle.cap = effective_speed_cap(vehicle, new_lane)
        if vehicle.pos < new_lane.length:
            _insert_rear(state.lane_vehicles[vehicle.lane_id()], vehicle, state, now)
            return


def _insert_rear(vehicles: list[Vehicle], vehicle: Vehicle,
                 state: SimState, now: float) -> None:
    """Append keeping descending-position order; merges insert by position."""
    if not vehicles or vehicles[-1].pos >= vehicle.pos:
        vehicles.append(vehicle)
        return
    # Rare: an entry from a sibling predecessor lane lands mid-list.
    idx = len(vehicles)
    while idx > 0 and vehicles[idx - 1].pos < vehicle.pos:
        idx -= 1
    vehicles.insert(idx, vehicle)
    state.integrity_events.append(
        f"t={now:.2f}: merge insertion of vehicle {vehicle.id} "
        f"on {vehicle.lane_id()}")
