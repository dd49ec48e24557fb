"""Policy/value networks and the clipped-surrogate policy-gradient update.

Networks are plain numpy MLPs (shared tanh trunk, a policy head and a value
head) with hand-written backpropagation, so gradients can be audited against
finite differences. Two head types exist: a categorical head for phase
choice and a tanh-squashed Gaussian head for bounded speed-advice deltas.
Agents are independent learners: each owns its parameters, optimizer state,
and RNG stream, and never touches another agent's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

ROLE_SIGNAL = "signal"
ROLE_ADVICE = "advice"

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Raised when an update produced a non-finite loss; parameters restored."""


@dataclass(frozen=True)
class PPOConfig:
    learning_rate: float = 1e-5
    episodes: int = 1400
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch_size: int = 128
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    hidden_layers: tuple[int, ...] = (256, 256, 256, 256)
    reward_scale: float = 1e-3       # rewards are summed seconds; keep returns O(1)

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_ratio <= 0.0:
            raise ValueError("clip_ratio must be > 0")


def paper_config(**overrides) -> PPOConfig:
    """Full-scale training configuration (1400 episodes, 4x256 net, lr 1e-5)."""
    return PPOConfig(**overrides)


def desk_config(**overrides) -> PPOConfig:
    """Minutes-scale configuration used by default for tests and smoke runs."""
    defaults = dict(
        learning_rate=1e-3,
        episodes=200,
        hidden_layers=(64, 64),
        discount=0.9,
        minibatch_size=256,
    )
    defaults.update(overrides)
    return PPOConfig(**defaults)


PROFILES = {"paper": paper_config, "desk": desk_config}


# ---------------------------------------------------------------------------
# Parameters and forward pass

HEAD_CATEGORICAL = "categorical"
HEAD_GAUSSIAN = "gaussian"


class PolicyParams:
    """Weights of one agent's network.

    ``trunk`` is a list of (W, b) pairs with tanh activations; ``policy_w/b``
    map the last hidden layer to head outputs (N_P logits, or per-slot means
    followed by per-slot log-stds); ``value_w/b`` produce the scalar value.
    """

    __slots__ = ("trunk", "policy_w", "policy_b", "value_w", "value_b", "head")

    def __init__(self, trunk, policy_w, policy_b, value_w, value_b, head):
        self.trunk = trunk
        self.policy_w = policy_w
        self.policy_b = policy_b
        self.value_w = value_w
        self.value_b = value_b
        self.head = head

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.policy_w.shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, (w, b) in enumerate(self.trunk):
            items.append((f"trunk_w{i}", w))
            items.append((f"trunk_b{i}", b))
        items += [("policy_w", self.policy_w), ("policy_b", self.policy_b),
                  ("value_w", self.value_w), ("value_b", self.value_b)]
        return items

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            [(w.copy(), b.copy()) for w, b in self.trunk],
            self.policy_w.copy(), self.policy_b.copy(),
            self.value_w.copy(), self.value_b.copy(), self.head)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int,
                gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_policy(input_dim: int, hidden_layers: tuple[int, ...], head: str,
                head_dim: int, rng: np.random.Generator) -> PolicyParams:
    """Orthogonally initialized network with a small final policy layer, so
    initial behavior is near-uniform (categorical) or near-zero-delta
    (gaussian)."""
    trunk = []
    prev = input_dim
    for width in hidden_layers:
        trunk.append((_orthogonal(rng, prev, width, gain=1.0),
                      np.zeros(width)))
        prev = width
    return PolicyParams(
        trunk=trunk,
        policy_w=_orthogonal(rng, prev, head_dim, gain=0.01),
        policy_b=np.zeros(head_dim),
        value_w=_orthogonal(rng, prev, 1, gain=1.0),
        value_b=np.zeros(1),
        head=head,
    )


def _forward_cached(params: PolicyParams, x: np.ndarray):
    activations = [x]
    h = x
    for w, b in params.trunk:
        h = np.tanh(h @ w + b)
        activations.append(h)
    head_out = h @ params.policy_w + params.policy_b
    values = (h @ params.value_w).ravel() + params.value_b[0]
    return head_out, values, activations


def forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, float | np.ndarray]:
    """Head outputs and value estimate; accepts a single observation or a batch."""
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"observation dim {x.shape[1]} does not match network input "
            f"dim {params.input_dim}")
    head_out, values, _ = _forward_cached(params, x)
    if single:
        return head_out[0], float(values[0])
    return head_out, values


# ---------------------------------------------------------------------------
# Distributions

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_phase(logits: np.ndarray,
                 rng: np.random.Generator) -> tuple[int, float]:
    """Sample a phase index from categorical logits; returns (index, log-prob)."""
    logp = _log_softmax(logits)
    probs = np.exp(logp)
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(probs), u))
    index = min(index, len(probs) - 1)
    return index, float(logp[index])


def categorical_logp(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    logp = _log_softmax(logits)
    return logp[np.arange(len(actions)), actions]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))),
                    np.log1p(np.exp(np.minimum(x, 0.0))))


def _squash_log_jacobian(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2), evaluated stably.
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def split_gaussian_head(head_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = head_out.shape[-1] // 2
    means = head_out[..., :k]
    log_stds = np.clip(head_out[..., k:], LOG_STD_MIN, LOG_STD_MAX)
    return means, log_stds


def gaussian_logp(means: np.ndarray, log_stds: np.ndarray, raw: np.ndarray,
                  dv_max: np.ndarray) -> np.ndarray:
    """Density of squashed deltas dv = dv_max * tanh(raw), evaluated at the
    stored pre-squash draws, including the squash and scale corrections."""
    z = (raw - means) / np.exp(log_stds)
    base = -0.5 * z * z - log_stds - _HALF_LOG_2PI
    corr = _squash_log_jacobian(raw) + np.log(dv_max)
    return (base - corr).sum(axis=-1)


def sample_advice_delta(head_out: np.ndarray, dv_max: np.ndarray,
                        rng: np.random.Generator,
                        deterministic: bool = False
                        ) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-slot bounded speed-advice increments.

    Returns (deltas in [-dv_max, +dv_max], pre-squash draws, total log-prob).
    With ``deterministic`` the mean action is taken (no density reported).
    """
    means, log_stds = split_gaussian_head(head_out)
    if deterministic:
        raw = means.copy()
    else:
        raw = means + np.exp(log_stds) * rng.standard_normal(means.shape)
    deltas = dv_max * np.tanh(raw)
    logp = float(gaussian_logp(means[None], log_stds[None], raw[None],
                               dv_max)[0])
    return deltas, raw, logp


# ---------------------------------------------------------------------------
# Advantage estimation

def gae(rewards: np.ndarray, values: np.ndarray, bootstrap_value: float,
        discount: float, lam: float,
        dones: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exponentially weighted advantage estimates and value targets.

    ``values`` are the per-step estimates V(s_t); ``bootstrap_value`` stands
    in for V(s_T). A done flag cuts bootstrapping at that step.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    if len(values) != n:
        raise ValueError("rewards and values must have equal length")
    if dones is None:
        dones = np.zeros(n, dtype=bool)
    advantages = np.empty(n)
    next_value = bootstrap_value
    acc = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + discount * next_value * live - values[t]
        acc = delta + discount * lam * live * acc
        advantages[t] = acc
        next_value = values[t]
    return advantages, advantages + values


# ---------------------------------------------------------------------------
# Optimizer

class Adam:
    """Adaptive-moment gradient descent over a fixed list of arrays."""

    def __init__(self, arrays: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / correction1) / (np.sqrt(v / correction2)
                                                + self.eps)

    def snapshot(self):
        return (self.step_count, [m.copy() for m in self.m],
                [v.copy() for v in self.v])

    def restore(self, snap) -> None:
        self.step_count = snap[0]
        for m, saved in zip(self.m, snap[1]):
            m[...] = saved
        for v, saved in zip(self.v, snap[2]):
            v[...] = saved


# ---------------------------------------------------------------------------
# Rollout storage

class Trajectory:
    """Per-agent rollout buffer for one episode."""

    def __init__(self):
        self.obs: list[np.ndarray] = []
        self.actions: list = []
        self.raw_actions: list = []       # pre-squash draws, gaussian only
        self.log_probs: list[float] = []
        self.values: list[float] = []
        self.rewards: list[float] = []
        self.dones: list[bool] = []

    def append_step(self, obs, action, log_prob, value, raw_action=None):
        self.obs.append(obs)
        self.actions.append(action)
        if raw_action is not None:
            self.raw_actions.append(raw_action)
        self.log_probs.append(log_prob)
        self.values.append(value)

    def complete_step(self, reward: float, done: bool):
        self.rewards.append(reward)
        self.dones.append(done)

    def __len__(self):
        return len(self.rewards)

    def check_aligned(self):
        n = len(self.rewards)
        if not (len(self.obs) == len(self.actions) == len(self.log_probs)
                == len(self.values) == len(self.dones) == n):
            raise ValueError("trajectory fields are not aligned")


def prepare_batch(traj: Trajectory, config: PPOConfig,
                  bootstrap_value: float = 0.0) -> dict:
    """Turn a trajectory into update arrays: scaled rewards run through the
    advantage estimator, advantages normalized over the whole batch."""
    traj.check_aligned()
    rewards = np.asarray(traj.rewards) * config.reward_scale
    values = np.asarray(traj.values)
    dones = np.asarray(traj.dones, dtype=bool)
    advantages, returns = gae(rewards, values, bootstrap_value,
                              config.discount, config.gae_lambda, dones)
    norm = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    batch = {
        "obs": np.asarray(traj.obs, dtype=float),
        "old_log_probs": np.asarray(traj.log_probs),
        "advantages": norm,
        "returns": returns,
    }
    if traj.raw_actions:
        batch["raw_actions"] = np.asarray(traj.raw_actions)
        batch["actions"] = np.asarray(traj.actions)
    else:
        batch["actions"] = np.asarray(traj.actions, dtype=int)
    return batch


# ---------------------------------------------------------------------------
# Loss and gradients (manual backprop)

def ppo_loss_and_grads(params: PolicyParams, batch: dict, config: PPOConfig,
                       dv_max: np.ndarray | None = None,
                       want_grads: bool = True):
    """Clipped-surrogate loss with value and entropy terms, plus gradients.

    Loss = -E[min(r*A, clip(r, 1 +- eps)*A)] + c_v * MSE(V, returns)
           - c_e * entropy. Returns (loss, grads or None, diagnostics).
    """
    x = batch["obs"]
    old_logp = batch["old_log_probs"]
    adv = batch["advantages"]
    returns = batch["returns"]
    n = len(adv)
    eps = config.clip_ratio

    head_out, values, activations = _forward_cached(params, x)

    if params.head == HEAD_CATEGORICAL:
        actions = batch["actions"]
        logp_all = _log_softmax(head_out)
        probs = np.exp(logp_all)
        new_logp = logp_all[np.arange(n), actions]
        entropy_per = -(probs * logp_all).sum(axis=1)
    else:
        raw = batch["raw_actions"]
        means, log_stds = split_gaussian_head(head_out)
        new_logp = gaussian_logp(means, log_stds, raw, dv_max)
        entropy_per = (log_stds + 0.5 + _HALF_LOG_2PI).sum(axis=1)

    ratio = np.exp(new_logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    policy_loss = -np.minimum(unclipped, clipped).mean()
    value_err = values - returns
    value_loss = np.mean(value_err * value_err)
    entropy = entropy_per.mean()
    loss = (policy_loss + config.value_coef * value_loss
            - config.entropy_coef * entropy)

    diagnostics = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": float(np.mean(old_logp - new_logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    if not want_grads:
        return loss, None, diagnostics

    # Gradient of the surrogate w.r.t. new log-probs: zero where the clip
    # saturates against the advantage direction.
    clipped_off = ((adv > 0) & (ratio > 1.0 + eps)) | \
                  ((adv < 0) & (ratio < 1.0 - eps))
    g_logp = np.where(clipped_off, 0.0, -ratio * adv) / n

    if params.head == HEAD_CATEGORICAL:
        one_hot = np.zeros_like(probs)
        one_hot[np.arange(n), actions] = 1.0
        g_head = g_logp[:, None] * (one_hot - probs)
        # d(-c_e * mean entropy)/d logits
        g_head += (config.entropy_coef / n) * probs * (
            logp_all + entropy_per[:, None])
    else:
        sigma = np.exp(log_stds)
        z = (raw - means) / sigma
        g_mu = g_logp[:, None] * (z / sigma)
        g_s = g_logp[:, None] * (z * z - 1.0)
        g_s -= config.entropy_coef / n
        # Gate gradients where the log-std clip is active.
        k = means.shape[1]
        raw_s = head_out[:, k:]
        g_s = np.where((raw_s > LOG_STD_MIN) & (raw_s < LOG_STD_MAX), g_s, 0.0)
        g_head = np.concatenate([g_mu, g_s], axis=1)

    g_values = (2.0 * config.value_coef / n) * value_err

    last_hidden = activations[-1]
    grads = {}
    grads["policy_w"] = last_hidden.T @ g_head
    grads["policy_b"] = g_head.sum(axis=0)
    grads["value_w"] = last_hidden.T @ g_values[:, None]
    grads["value_b"] = np.array([g_values.sum()])
    g_hidden = g_head @ params.policy_w.T + g_values[:, None] @ params.value_w.T
    for i in range(len(params.trunk) - 1, -1, -1):
        w, _b = params.trunk[i]
        h = activations[i + 1]
        g_pre = g_hidden * (1.0 - h * h)
        grads[f"trunk_w{i}"] = activations[i].T @ g_pre
        grads[f"trunk_b{i}"] = g_pre.sum(axis=0)
        g_hidden = g_pre @ w.T
    ordered = [grads[name] for name, _ in params.named_arrays()]
    return loss, ordered, diagnostics


# ---------------------------------------------------------------------------
# Agents

class Agent:
    """One independent learner: parameters, optimizer, and RNG stream."""

    def __init__(self, agent_id: str, role: str, intersection_id: str,
                 params: PolicyParams, config: PPOConfig,
                 rng: np.random.Generator, obs_layout: str,
                 dv_max: np.ndarray | None = None):
        self.id = agent_id
        self.role = role
        self.intersection_id = intersection_id
        self.params = params
        self.config = config
        self.rng = rng
        self.obs_layout = obs_layout
        self.dv_max = dv_max
        self.optimizer = Adam(params.arrays(), lr=config.learning_rate)

    def act(self, obs: np.ndarray, deterministic: bool = False):
        """Returns (action, raw_action, log_prob, value). For the signal role
        the action is a phase index and raw_action is None; for the advice
        role the action is the per-slot delta vector."""
        head_out, value = forward(self.params, obs)
        if self.role == ROLE_SIGNAL:
            if deterministic:
                logp_all = _log_softmax(head_out)
                action = int(np.argmax(head_out))
                return action, None, float(logp_all[action]), value
            action, logp = sample_phase(head_out, self.rng)
            return action, None, logp, value
        deltas, raw, logp = sample_advice_delta(
            head_out, self.dv_max, self.rng, deterministic=deterministic)
        return deltas, raw, logp, value

    def load_params(self, params: PolicyParams) -> None:
        for target, source in zip(self.params.arrays(), params.arrays()):
            target[...] = source


def ppo_update(agent: Agent, batch: dict, config: PPOConfig) -> dict:
    """Minibatched clipped-surrogate update of one agent, in place.

    A non-finite loss aborts the whole update, restores the pre-update
    parameters and optimizer state, and raises NonFiniteLossError.
    """
    params_backup = agent.params.copy()
    opt_backup = agent.optimizer.snapshot()
    n = len(batch["advantages"])
    size = min(config.minibatch_size, n)
    diag_accum: dict[str, float] = {}
    batches = 0
    try:
        for _epoch in range(config.epochs):
            order = agent.rng.permutation(n)
            for start in range(0, n, size):
                idx = order[start:start + size]
                mini = {key: value[idx] for key, value in batch.items()}
                loss, grads, diag = ppo_loss_and_grads(
                    agent.params, mini, config, dv_max=agent.dv_max)
                if not np.isfinite(loss):
                    raise NonFiniteLossError(
                        f"agent {agent.id}: non-finite loss {loss!r}")
                agent.optimizer.step(grads)
                for key, value in diag.items():
                    diag_accum[key] = diag_accum.get(key, 0.0) + value
                batches += 1
    except NonFiniteLossError:
        agent.load_params(params_backup)
        agent.optimizer.restore(opt_backup)
        raise
    return {key: value / batches for key, value in diag_accum.items()}


def make_agents(scenario, tier, config: PPOConfig,
                seed: int | np.random.SeedSequence = 0) -> list[Agent]:
    """One signal agent per intersection; plus one advice agent per
    intersection at the joint-control tier. No parameter sharing."""
    from .observe import (LAYOUT_ADVICE, SIGNAL_LAYOUT, Tier, build_slots,
                          obs_dim)
    tier = Tier(tier)
    net = scenario.network
    intersections = list(net.intersections.values())
    n_agents = len(intersections) * (2 if tier == Tier.TLC_V2X_VSA else 1)
    root = (seed if isinstance(seed, np.random.SeedSequence)
            else np.random.SeedSequence(seed))
    streams = root.spawn(n_agents)
    agents = []
    i = 0
    for inter in intersections:
        layout = SIGNAL_LAYOUT[tier]
        rng = np.random.default_rng(streams[i]); i += 1
        params = init_policy(obs_dim(layout, inter, net), config.hidden_layers,
                             HEAD_CATEGORICAL, inter.n_phases, rng)
        agents.append(Agent(f"{inter.id}/signal", ROLE_SIGNAL, inter.id,
                            params, config, rng, layout))
        if tier == Tier.TLC_V2X_VSA:
            slots = build_slots(inter, net, scenario.driver)
            dv_max = np.array([0.1 * s.primary.speed_limit for s in slots])
            rng = np.random.default_rng(streams[i]); i += 1
            params = init_policy(obs_dim(LAYOUT_ADVICE, inter, net),
                                 config.hidden_layers, HEAD_GAUSSIAN,
                                 2 * len(slots), rng)
            agents.append(Agent(f"{inter.id}/advice", ROLE_ADVICE, inter.id,
                                params, config, rng, LAYOUT_ADVICE,
                                dv_max=dv_max))
    return agents


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, params: PolicyParams, meta: dict) -> None:
    """Versioned dump of layer shapes/weights plus caller metadata."""
    payload = dict(params.named_arrays())
    payload["__meta__"] = np.frombuffer(
        json.dumps({
            "format_version": CHECKPOINT_VERSION,
            "head": params.head,
            "n_trunk": len(params.trunk),
            **meta,
        }).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('format_version')}")
        trunk = [(data[f"trunk_w{i}"], data[f"trunk_b{i}"])
                 for i in range(meta["n_trunk"])]
        params = PolicyParams(trunk, data["policy_w"], data["policy_b"],
                              data["value_w"], data["value_b"], meta["head"])
    return params, meta
