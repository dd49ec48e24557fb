"""Flat per-agent observation vectors over an intersection's approach slots.

Each afferent lane owns one observation slot; a short afferent lane's slot
additionally folds in its direct predecessors (counts and capacities summed,
distances measured along the concatenated geometry). There is no sensing
radius: every vehicle on a slot's lanes contributes, however far upstream.

Vector layouts (N_P phases, N_L slots):

    tlc      [phase one-hot | density | queue | waiting | mean speed |
              min-green flag, phase duration]          -> N_P + 4*N_L + 2
    tlc-v2x  tlc + [leader dist to stop line | leader dist to queue back |
              leader speed]                            -> N_P + 7*N_L + 2
    advice   tlc-v2x + [active advice per slot]        -> N_P + 8*N_L + 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .netmodel import DriverParams, Intersection, Lane, Network
from .simcore import SimState

# Fixed normalization scales keeping time-valued features in [0, 1].
WAIT_NORM_S = 300.0
PHASE_NORM_S = 120.0

LAYOUT_TLC = "tlc"
LAYOUT_TLC_V2X = "tlc-v2x"
LAYOUT_ADVICE = "advice"


class Tier(str, Enum):
    TLC = "tlc"
    TLC_V2X = "tlc-v2x"
    TLC_V2X_VSA = "tlc-v2x-vsa"


#: Observation layout used by the signal agent at each tier.
SIGNAL_LAYOUT = {
    Tier.TLC: LAYOUT_TLC,
    Tier.TLC_V2X: LAYOUT_TLC_V2X,
    Tier.TLC_V2X_VSA: LAYOUT_TLC_V2X,
}


@dataclass(frozen=True)
class ObservationVector:
    values: np.ndarray
    layout: str


@dataclass(frozen=True)
class SlotView:
    """One observation slot: an afferent lane plus any grouped predecessors.

    ``members`` holds (lane, offset) pairs where offset is the distance from
    that lane's downstream end to the stop line, so a vehicle's distance to
    the stop line is (lane.length - pos) + offset.
    """

    index: int
    primary: Lane
    members: tuple[tuple[Lane, float], ...]
    capacity: int
    length: float


def build_slots(intersection: Intersection, network: Network,
                driver: DriverParams) -> tuple[SlotView, ...]:
    jam_spacing = driver.vehicle_length + driver.min_gap
    slots = []
    for index, lane_id in enumerate(intersection.afferent_lanes):
        primary = network.lanes[lane_id]
        members = [(primary, 0.0)]
        if primary.is_short:
            for pred_id in primary.predecessors:
                members.append((network.lanes[pred_id], primary.length))
        capacity = sum(int(lane.length / jam_spacing) for lane, _ in members)
        slots.append(SlotView(
            index=index, primary=primary, members=tuple(members),
            capacity=max(capacity, 1),
            length=sum(lane.length for lane, _ in members),
        ))
    return tuple(slots)


@dataclass(frozen=True)
class _SlotScan:
    count: int
    queue_count: int
    total_wait: float
    mean_speed: float | None          # None when the slot is empty
    leader_dist: float | None         # distance to stop line, None when no leader
    leader_speed: float
    leader_advice: float | None
    queue_back_dist: float            # stop-line distance of the queue's rear


def _scan_slot(state: SimState, slot: SlotView) -> _SlotScan:
    drv = state.scenario.driver
    halt = drv.halt_speed
    now = state.time
    entries: list[tuple[float, object]] = []
    for lane, offset in slot.members:
        base = lane.length + offset
        for vehicle in state.lane_vehicles[lane.id]:
            entries.append((base - vehicle.pos, vehicle))
    entries.sort(key=lambda item: item[0])

    count = len(entries)
    speed_sum = 0.0
    queue_count = 0
    total_wait = 0.0
    queue_back_dist = 0.0
    leader = None
    leader_dist = None
    in_queue_run = True
    for dist, vehicle in entries:
        speed_sum += vehicle.speed
        if in_queue_run and vehicle.speed < halt:
            queue_count += 1
            queue_back_dist = dist + drv.vehicle_length
            if vehicle.halted_since is not None:
                total_wait += now - vehicle.halted_since
        else:
            in_queue_run = False
            if leader is None and vehicle.speed >= halt:
                leader = vehicle
                leader_dist = dist
    return _SlotScan(
        count=count,
        queue_count=queue_count,
        total_wait=total_wait,
        mean_speed=(speed_sum / count) if count else None,
        leader_dist=leader_dist,
        leader_speed=leader.speed if leader is not None else 0.0,
        leader_advice=leader.advice if leader is not None else None,
        queue_back_dist=queue_back_dist,
    )


def _clip01(x: float) -> float:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


def build_tlc_obs(state: SimState, intersection: Intersection) -> ObservationVector:
    """Base signal-agent observation: phase one-hot, per-slot traffic state,
    min-green flag, and normalized phase duration."""
    slots = build_slots(intersection, state.scenario.network,
                        state.scenario.driver)
    ctrl = state.controllers[intersection.id]
    n_p = intersection.n_phases
    n_l = len(slots)
    values = np.zeros(n_p + 4 * n_l + 2)
    values[ctrl.current_phase] = 1.0
    for slot in slots:
        scan = _scan_slot(state, slot)
        i = slot.index
        values[n_p + i] = _clip01(scan.count / slot.capacity)
        values[n_p + n_l + i] = _clip01(scan.queue_count / slot.capacity)
        values[n_p + 2 * n_l + i] = _clip01(scan.total_wait / WAIT_NORM_S)
        if scan.mean_speed is None:
            values[n_p + 3 * n_l + i] = 1.0
        else:
            values[n_p + 3 * n_l + i] = _clip01(
                scan.mean_speed / slot.primary.speed_limit)
    values[n_p + 4 * n_l] = 1.0 if ctrl.min_green_passed() else 0.0
    values[n_p + 4 * n_l + 1] = _clip01(ctrl.phase_elapsed / PHASE_NORM_S)
    return ObservationVector(values=values, layout=LAYOUT_TLC)


def build_v2x_features(state: SimState,
                       intersection: Intersection) -> np.ndarray:
    """Per-slot lane-leader triples (dist to stop line, dist to queue back,
    speed), each normalized; (1, 1, 1) when the slot has no leader."""
    slots = build_slots(intersection, state.scenario.network,
                        state.scenario.driver)
    triples = np.ones((len(slots), 3))
    for slot in slots:
        scan = _scan_slot(state, slot)
        if scan.leader_dist is None:
            continue
        triples[slot.index, 0] = _clip01(scan.leader_dist / slot.length)
        triples[slot.index, 1] = _clip01(
            (scan.leader_dist - scan.queue_back_dist) / slot.length)
        triples[slot.index, 2] = _clip01(
            scan.leader_speed / slot.primary.speed_limit)
    return triples


def _v2x_vector(state: SimState, intersection: Intersection) -> np.ndarray:
    base = build_tlc_obs(state, intersection).values
    triples = build_v2x_features(state, intersection)
    # Feature-major blocks: all stop-line distances, all queue-back
    # distances, all leader speeds.
    return np.concatenate([base, triples[:, 0], triples[:, 1], triples[:, 2]])


def build_tlc_v2x_obs(state: SimState,
                      intersection: Intersection) -> ObservationVector:
    return ObservationVector(values=_v2x_vector(state, intersection),
                             layout=LAYOUT_TLC_V2X)


def build_vsa_obs(state: SimState,
                  intersection: Intersection) -> ObservationVector:
    """Advice-agent observation: the tlc-v2x vector plus, per slot, the
    currently active advice normalized by the speed limit (1.0 when none)."""
    slots = build_slots(intersection, state.scenario.network,
                        state.scenario.driver)
    advice = np.ones(len(slots))
    for slot in slots:
        scan = _scan_slot(state, slot)
        if scan.leader_advice is not None:
            advice[slot.index] = _clip01(
                scan.leader_advice / slot.primary.speed_limit)
    return ObservationVector(
        values=np.concatenate([_v2x_vector(state, intersection), advice]),
        layout=LAYOUT_ADVICE,
    )


def build_observation(state: SimState, intersection: Intersection,
                      layout: str) -> ObservationVector:
    if layout == LAYOUT_TLC:
        return build_tlc_obs(state, intersection)
    if layout == LAYOUT_TLC_V2X:
        return build_tlc_v2x_obs(state, intersection)
    if layout == LAYOUT_ADVICE:
        return build_vsa_obs(state, intersection)
    raise ValueError(f"unknown observation layout {layout!r}")


def obs_dim(layout: str, intersection: Intersection, network: Network) -> int:
    n_p = intersection.n_phases
    n_l = len(intersection.afferent_lanes)
    if layout == LAYOUT_TLC:
        return n_p + 4 * n_l + 2
    if layout == LAYOUT_TLC_V2X:
        return n_p + 7 * n_l + 2
    if layout == LAYOUT_ADVICE:
        return n_p + 8 * n_l + 2
    raise ValueError(f"unknown observation layout {layout!r}")


def observation_schema(intersection: Intersection, network: Network,
                       layout: str) -> list[tuple[str, int, int]]:
    """Feature name -> [start, end) index ranges for one intersection."""
    n_p = intersection.n_phases
    n_l = len(intersection.afferent_lanes)
    rows = [
        ("current_phase_onehot", 0, n_p),
        ("lane_density", n_p, n_p + n_l),
        ("queue_length", n_p + n_l, n_p + 2 * n_l),
        ("total_waiting_time", n_p + 2 * n_l, n_p + 3 * n_l),
        ("mean_speed", n_p + 3 * n_l, n_p + 4 * n_l),
        ("min_green_passed", n_p + 4 * n_l, n_p + 4 * n_l + 1),
        ("phase_duration", n_p + 4 * n_l + 1, n_p + 4 * n_l + 2),
    ]
    offset = n_p + 4 * n_l + 2
    if layout in (LAYOUT_TLC_V2X, LAYOUT_ADVICE):
        rows += [
            ("leader_dist_to_stop_line", offset, offset + n_l),
            ("leader_dist_to_queue_back", offset + n_l, offset + 2 * n_l),
            ("leader_speed", offset + 2 * n_l, offset + 3 * n_l),
        ]
        offset += 3 * n_l
    if layout == LAYOUT_ADVICE:
        rows.append(("active_advice", offset, offset + n_l))
        offset += n_l
    assert offset == obs_dim(layout, intersection, network)
    return rows
