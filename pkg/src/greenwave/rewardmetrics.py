"""Reward signal, trip-delay metric, and the multi-seed aggregation protocol."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Intersection, ScenarioConfig, effective_afferent_lanes
from .simcore import CompletedTrip, SimState


@dataclass(frozen=True)
class RewardSample:
    intersection_id: str
    t: float
    value: float    # <= 0: negative summed time-on-lane over approach slots


@dataclass(frozen=True)
class TripRecord:
    vehicle_id: int
    trip_time: float
    free_flow_time: float
    delay: float
    censored: bool = False     # still en route at episode end


@dataclass
class RunSummary:
    """Per-episode mean-delay series for one training run (one seed).

    ``episode_delays`` includes censored trips (vehicles still en route at
    episode end count with trip time up to the cutoff), which avoids
    survivorship bias in congested runs; ``episode_delays_completed`` covers
    completed trips only. The best episode is the minimum of the
    censored-inclusive series.
    """

    seed: int
    episode_delays: list[float] = field(default_factory=list)
    episode_delays_completed: list[float] = field(default_factory=list)

    @property
    def best_episode_delay(self) -> float:
        return min(self.episode_delays)

    @property
    def best_episode_index(self) -> int:
        series = self.episode_delays
        return min(range(len(series)), key=series.__getitem__)


def reward(state: SimState, intersection: Intersection) -> RewardSample:
    """Negative total time spent on the intersection's observation-slot lanes.

    Sums (now - lane_entry_time) over every vehicle on every slot lane,
    including the direct predecessors grouped into short-lane slots.
    """
    now = state.time
    total = 0.0
    seen: set[str] = set()
    for lane_id, _slot in effective_afferent_lanes(
            intersection, state.scenario.network):
        if lane_id in seen:
            continue
        seen.add(lane_id)
        for vehicle in state.lane_vehicles[lane_id]:
            total += now - vehicle.lane_entry_time
    return RewardSample(intersection_id=intersection.id, t=now, value=-total)


def trip_delay(trip_time: float, free_flow_time: float) -> float:
    """Realized trip time minus the unconstrained trip time, floored at zero.

    Negative raw values can only arise from step discretization.
    """
    return max(0.0, trip_time - free_flow_time)


def trip_record(trip: CompletedTrip, censored: bool = False) -> TripRecord:
    return TripRecord(
        vehicle_id=trip.vehicle_id,
        trip_time=trip.trip_time,
        free_flow_time=trip.free_flow_time,
        delay=trip_delay(trip.trip_time, trip.free_flow_time),
        censored=censored,
    )


def censored_trips(state: SimState, scenario: ScenarioConfig) -> list[TripRecord]:
    """Trip records for vehicles still on the network at episode end."""
    cutoff = state.time
    records = []
    for vehicle in state.vehicles.values():
        free_flow = vehicle.route.free_flow_time_base / vehicle.speed_factor
        records.append(trip_record(
            CompletedTrip(vehicle.id, cutoff - vehicle.spawn_time, free_flow),
            censored=True,
        ))
    records.sort(key=lambda r: r.vehicle_id)
    return records


def mean_delay(trips: list[TripRecord], include_censored: bool = True) -> float:
    delays = [t.delay for t in trips if include_censored or not t.censored]
    if not delays:
        return 0.0
    return sum(delays) / len(delays)


def aggregate(runs: list[RunSummary],
              per_episode_mean_first: bool = False) -> tuple[float, float]:
    """Cross-run (mean, sample std) of the best-episode delay.

    Default reading: take the minimum over episodes within each run, then
    mean and standard deviation across runs. With ``per_episode_mean_first``
    the alternative reading is used: average runs at each episode index
    first, then take the minimum (std is then over the per-run values at
    that index).
    """
    if not runs:
        raise ValueError("aggregate needs at least one run")
    if per_episode_mean_first:
        n_episodes = min(len(r.episode_delays) for r in runs)
        per_index = [
            [r.episode_delays[i] for r in runs] for i in range(n_episodes)
        ]
        means = [sum(vals) / len(vals) for vals in per_index]
        best_index = min(range(n_episodes), key=means.__getitem__)
        values = per_index[best_index]
    else:
        values = [r.best_episode_delay for r in runs]
    mean = float(np.mean(values))
    if len(values) < 2:
        warnings.warn("aggregate called with fewer than 2 runs; std reported as 0",
                      stacklevel=2)
        return mean, 0.0
    return mean, float(np.std(values, ddof=1))
