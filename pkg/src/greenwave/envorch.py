"""Multi-agent environment orchestration.

Wraps the simulator behind a decision-tick interface: all agents of an
episode act on the same snapshot once every decision interval, signal
actions go through the phase state machine, advice actions move each lane
leader's speed advice by a bounded increment, and every agent is credited
the accumulated-lane-time reward of its own intersection. The training loop
runs independent learners, one update per agent per episode.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import agentppo, observe, rewardmetrics, simcore
from .agentppo import (Agent, NonFiniteLossError, PolicyParams, PPOConfig,
                       ROLE_ADVICE, ROLE_SIGNAL)
from .netmodel import ScenarioConfig, scenario_document
from .observe import Tier
from .rewardmetrics import RunSummary, TripRecord

# Fraction of the speed limit below which advice may not be pushed.
ADVICE_FLOOR_FRACTION = 0.2

# Namespacing constants for seed derivation (agents vs episode streams).
_AGENT_NS = 1
_ENV_NS = 2


class TrainError(RuntimeError):
    """A training run aborted; the message carries seed/episode context."""


class CheckpointMismatchError(ValueError):
    """Checkpoint config hash does not match the requested scenario/tier."""


@dataclass
class DecisionTick:
    t: float
    observations: dict[str, np.ndarray]
    rewards: dict[str, float]
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeResult:
    returns: dict[str, float]
    trips: list[TripRecord]
    integrity_events: list[str]

    @property
    def mean_delay(self) -> float:
        return rewardmetrics.mean_delay(self.trips, include_censored=True)

    @property
    def mean_delay_completed(self) -> float:
        return rewardmetrics.mean_delay(self.trips, include_censored=False)


@dataclass
class AgentSpec:
    id: str
    role: str
    intersection_id: str
    obs_layout: str


class TrafficEnv:
    """One simulator instance driven at the decision cadence by named agents."""

    def __init__(self, scenario: ScenarioConfig, tier: Tier | str):
        self.scenario = scenario
        self.tier = Tier(tier)
        net = scenario.network
        self.agent_specs: list[AgentSpec] = []
        for inter in net.intersections.values():
            self.agent_specs.append(AgentSpec(
                f"{inter.id}/signal", ROLE_SIGNAL, inter.id,
                observe.SIGNAL_LAYOUT[self.tier]))
            if self.tier == Tier.TLC_V2X_VSA:
                self.agent_specs.append(AgentSpec(
                    f"{inter.id}/advice", ROLE_ADVICE, inter.id,
                    observe.LAYOUT_ADVICE))
        self._slots = {
            inter.id: observe.build_slots(inter, net, scenario.driver)
            for inter in net.intersections.values()
        }
        self.state: simcore.SimState | None = None
        self._audit_observation_dims()

    def _audit_observation_dims(self) -> None:
        probe = simcore.SimState(self.scenario, seed=0)
        net = self.scenario.network
        for spec in self.agent_specs:
            inter = net.intersections[spec.intersection_id]
            vector = observe.build_observation(probe, inter, spec.obs_layout)
            expected = observe.obs_dim(spec.obs_layout, inter, net)
            if len(vector.values) != expected:
                raise AssertionError(
                    f"observation dim mismatch for {spec.id}: "
                    f"{len(vector.values)} != {expected}")

    def reset(self, seed: int | np.random.SeedSequence | None = None,
              trace_hook=None) -> DecisionTick:
        self.state = simcore.SimState(self.scenario, seed=seed,
                                      trace_hook=trace_hook)
        return DecisionTick(
            t=0.0, observations=self._observations(), rewards={}, done=False)

    def step(self, actions: dict) -> DecisionTick:
        """Apply one action per agent, advance one decision interval, and
        return next observations plus the per-intersection rewards."""
        state = self.state
        if state is None:
            raise RuntimeError("call reset() before step()")
        known = {spec.id for spec in self.agent_specs}
        unknown = set(actions) - known
        if unknown:
            raise ValueError(f"action for unknown agent {sorted(unknown)!r}")
        missing = known - set(actions)
        if missing:
            raise ValueError(f"missing action for agent {sorted(missing)!r}")

        net = self.scenario.network
        for spec in self.agent_specs:
            action = actions[spec.id]
            if spec.role == ROLE_SIGNAL:
                target = int(action)
                state.controllers[spec.intersection_id].request(target)
            else:
                deltas = np.asarray(action, dtype=float)
                if not np.all(np.isfinite(deltas)):
                    raise ValueError(f"non-finite advice action for {spec.id}")
                self._apply_advice(spec.intersection_id, deltas)

        for _ in range(self.scenario.substeps_per_decision):
            simcore.step(state)

        rewards = {
            spec.id: rewardmetrics.reward(
                state, net.intersections[spec.intersection_id]).value
            for spec in self.agent_specs
        }
        done = state.time >= self.scenario.episode_length - 1e-9
        return DecisionTick(
            t=state.time, observations=self._observations(), rewards=rewards,
            done=done,
            info={"spawned": state.spawned, "arrived": state.arrived},
        )

    def _apply_advice(self, intersection_id: str, deltas: np.ndarray) -> None:
        state = self.state
        slots = self._slots[intersection_id]
        if len(deltas) != len(slots):
            raise ValueError(
                f"advice action length {len(deltas)} != {len(slots)} slots")
        for slot in slots:
            lane = slot.primary
            if lane.is_short:
                continue
            leader = simcore.lane_leader(state, lane.id)
            if leader is None:
                continue
            limit = lane.speed_limit
            base = leader.advice if leader.advice is not None else limit
            advice = min(max(base + deltas[slot.index],
                             ADVICE_FLOOR_FRACTION * limit), limit)
            simcore.set_advice(state, leader, advice)

    def _observations(self) -> dict[str, np.ndarray]:
        net = self.scenario.network
        return {
            spec.id: observe.build_observation(
                self.state, net.intersections[spec.intersection_id],
                spec.obs_layout).values
            for spec in self.agent_specs
        }

    def collect_trips(self) -> list[TripRecord]:
        """Completed trips plus censored records for vehicles still en route."""
        records = [rewardmetrics.trip_record(t)
                   for t in self.state.completed_trips]
        records += rewardmetrics.censored_trips(self.state, self.scenario)
        return records


def env_seed(run_seed: int, episode: int) -> np.random.SeedSequence:
    """Episode spawn stream; identical across tiers for paired comparisons."""
    return np.random.SeedSequence(entropy=(run_seed, _ENV_NS, episode))


def agent_seed(run_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(run_seed, _AGENT_NS))


def run_config_hash(scenario: ScenarioConfig, tier: Tier | str,
                    config: PPOConfig) -> str:
    """Compatibility fingerprint stored in checkpoints and manifests."""
    digest = hashlib.sha256()
    digest.update(scenario_document(scenario).encode())
    digest.update(Tier(tier).value.encode())
    digest.update(repr(tuple(config.hidden_layers)).encode())
    return digest.hexdigest()


@dataclass
class TrainResult:
    summary: RunSummary
    best_checkpoints: dict[str, PolicyParams]
    curve: list[dict]
    config_hash: str


def _rollout_episode(env: TrafficEnv, agents: list[Agent],
                     seed: np.random.SeedSequence,
                     deterministic: bool = False, trace_hook=None):
    tick = env.reset(seed=seed, trace_hook=trace_hook)
    trajectories = {agent.id: agentppo.Trajectory() for agent in agents}
    returns = {agent.id: 0.0 for agent in agents}
    while not tick.done:
        actions = {}
        for agent in agents:
            obs = tick.observations[agent.id]
            action, raw, logp, value = agent.act(obs, deterministic=deterministic)
            actions[agent.id] = action
            trajectories[agent.id].append_step(obs, action, logp, value,
                                               raw_action=raw)
        tick = env.step(actions)
        for agent in agents:
            trajectories[agent.id].complete_step(tick.rewards[agent.id],
                                                 tick.done)
            returns[agent.id] += tick.rewards[agent.id]
    return trajectories, returns


def train(scenario: ScenarioConfig, tier: Tier | str, config: PPOConfig,
          seeds: list[int], progress=None) -> list[TrainResult]:
    """Train independent learners for each seed; one update per agent per
    episode. Returns, per seed, the delay series, per-episode diagnostics,
    and the parameters from the best (minimum mean delay) episode."""
    if not seeds:
        raise ValueError("seeds must be non-empty")
    tier = Tier(tier)
    results = []
    for run_seed in seeds:
        results.append(_train_single(scenario, tier, config, run_seed, progress))
    return results


def _train_single(scenario, tier, config, run_seed, progress=None) -> TrainResult:
    env = TrafficEnv(scenario, tier)
    agents = agentppo.make_agents(scenario, tier, config,
                                  seed=agent_seed(run_seed))
    summary = RunSummary(seed=run_seed)
    curve: list[dict] = []
    best_delay = math.inf
    best_checkpoints: dict[str, PolicyParams] = {}
    for episode in range(config.episodes):
        trajectories, returns = _rollout_episode(
            env, agents, seed=env_seed(run_seed, episode))
        trips = env.collect_trips()
        delay = rewardmetrics.mean_delay(trips, include_censored=True)
        delay_completed = rewardmetrics.mean_delay(trips, include_censored=False)
        summary.episode_delays.append(delay)
        summary.episode_delays_completed.append(delay_completed)
        row: dict = {"episode": episode, "mean_delay": delay,
                     "mean_delay_completed": delay_completed}
        for agent in agents:
            batch = agentppo.prepare_batch(trajectories[agent.id], config)
            try:
                diag = agentppo.ppo_update(agent, batch, config)
            except NonFiniteLossError as exc:
                raise TrainError(
                    f"seed {run_seed} episode {episode}: {exc}") from exc
            row[f"{agent.id}/return"] = returns[agent.id]
            for key in ("policy_loss", "value_loss", "entropy",
                        "clip_fraction", "approx_kl"):
                row[f"{agent.id}/{key}"] = diag[key]
        curve.append(row)
        if delay < best_delay:
            best_delay = delay
            best_checkpoints = {a.id: a.params.copy() for a in agents}
        if progress is not None:
            progress(run_seed, episode, row)
    return TrainResult(
        summary=summary,
        best_checkpoints=best_checkpoints,
        curve=curve,
        config_hash=run_config_hash(scenario, tier, config),
    )


def evaluate(scenario: ScenarioConfig, tier: Tier | str,
             checkpoints: dict[str, tuple[PolicyParams, dict]],
             config: PPOConfig, episodes: int, seed: int,
             expected_hash: str | None = None,
             trace_hook=None) -> list[EpisodeResult]:
    """Deterministic-policy evaluation of saved parameters.

    Signal agents take the argmax phase and advice agents the mean delta.
    Raises CheckpointMismatchError when a checkpoint's config hash does not
    match the scenario/tier it is evaluated against.
    """
    tier = Tier(tier)
    target_hash = expected_hash or run_config_hash(scenario, tier, config)
    agents = agentppo.make_agents(scenario, tier, config,
                                  seed=agent_seed(seed))
    for agent in agents:
        if agent.id not in checkpoints:
            raise CheckpointMismatchError(f"missing checkpoint for {agent.id}")
        params, meta = checkpoints[agent.id]
        if meta.get("config_hash") != target_hash:
            raise CheckpointMismatchError(
                f"checkpoint {agent.id} hash {meta.get('config_hash')!r} "
                f"does not match scenario/tier hash {target_hash!r}")
        agent.load_params(params)
    env = TrafficEnv(scenario, tier)
    results = []
    for episode in range(episodes):
        _, returns = _rollout_episode(
            env, agents, seed=env_seed(seed, episode), deterministic=True,
            trace_hook=trace_hook)
        results.append(EpisodeResult(
            returns=returns, trips=env.collect_trips(),
            integrity_events=list(env.state.integrity_events)))
    return results


class FixedTimeController:
    """Cycles through phases on a fixed wall-clock schedule (baseline)."""

    def __init__(self, n_phases: int, cycle_s: float = 30.0):
        self.n_phases = n_phases
        self.phase_duration = cycle_s / n_phases

    def action(self, t: float) -> int:
        return int(t // self.phase_duration) % self.n_phases


def run_fixed_time(scenario: ScenarioConfig, cycle_s: float, episodes: int,
                   seed: int, trace_hook=None) -> list[EpisodeResult]:
    """Episodes driven by the fixed-time baseline (signal agents only)."""
    env = TrafficEnv(scenario, Tier.TLC)
    controllers = {
        spec.id: FixedTimeController(
            scenario.network.intersections[spec.intersection_id].n_phases,
            cycle_s)
        for spec in env.agent_specs
    }
    results = []
    for episode in range(episodes):
        tick = env.reset(seed=env_seed(seed, episode), trace_hook=trace_hook)
        returns = {spec.id: 0.0 for spec in env.agent_specs}
        while not tick.done:
            actions = {aid: ctrl.action(tick.t)
                       for aid, ctrl in controllers.items()}
            tick = env.step(actions)
            for aid in returns:
                returns[aid] += tick.rewards[aid]
        results.append(EpisodeResult(
            returns=returns, trips=env.collect_trips(),
            integrity_events=list(env.state.integrity_events)))
    return results
