"""Independent Q-learning on top of the neural protocol model.

One *training step* covers ``ttis_per_step`` channel slots: the engine rolls
the simulator forward under epsilon-greedy actions (pushing one experience
per slot), then samples a uniform batch from replay, applies one gradient
step on the average TD loss across UEs, and soft-updates the target network.

Two bootstrap rules are available: ``max_next_q`` (default) evaluates the
target network at its own best next action, ``stored_next_action`` evaluates
it at the action that was actually taken next. Episode-final transitions
drop the bootstrap term entirely.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env import ChannelSim, EnvState, RewardConfig, compute_rewards
from .npm import (
    NUM_ACTIONS,
    NpmParams,
    backward_batch,
    forward_batch,
    greedy_actions,
    pipeline_forward,
    select_action,
    zero_grads,
)

__all__ = [
    "Experience",
    "ReplayMemory",
    "TrainConfig",
    "StepLog",
    "epsilon_at",
    "td_loss_and_grads",
    "soft_update",
    "make_optimizer_state",
    "apply_update",
    "run_training_episode",
    "run_greedy_episode",
]


@dataclass(frozen=True)
class Experience:
    """One slot-level transition for every UE jointly."""

    state: EnvState
    actions: tuple
    rewards: tuple
    next_state: EnvState
    next_actions: tuple | None
    terminal: bool


class ReplayMemory:
    """Bounded FIFO of experiences with uniform batch sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, exp: Experience) -> None:
        self._items.append(exp)

    def sample(self, size: int, rng: np.random.Generator) -> list:
        """Uniform sample without replacement inside the batch."""
        if size > len(self._items):
            raise ValueError(f"cannot sample {size} of {len(self._items)} experiences")
        idx = rng.choice(len(self._items), size=size, replace=False)
        return [self._items[i] for i in idx]

    def clear(self) -> None:
        self._items.clear()


@dataclass
class TrainConfig:
    discount: float = 0.99
    soft_update_rate: float = 1e-3
    batch_size: int = 64
    learning_rate: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.9
    epsilon_floor: float = 0.1
    ttis_per_step: int = 4
    target_rule: str = "max_next_q"          # or "stored_next_action"
    optimizer: str = "sgd"                   # or "adam"
    replay_capacity: int = 50_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if not 0.0 <= self.soft_update_rate <= 1.0:
            raise ValueError("soft_update_rate must lie in [0, 1]")
        if self.target_rule not in ("max_next_q", "stored_next_action"):
            raise ValueError(f"unknown target rule {self.target_rule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ttis_per_step < 1:
            raise ValueError("ttis_per_step must be >= 1")


@dataclass
class StepLog:
    episode: int
    step: int
    loss: float
    epsilon: float
    goodput: float


def epsilon_at(episode: int, cfg: TrainConfig) -> float:
    """Exploration rate for an episode index: floored exponential decay."""
    if episode < 0:
        raise ValueError("episode must be >= 0")
    return max(cfg.epsilon_floor, cfg.epsilon_start * cfg.epsilon_decay ** episode)


def _batch_arrays(batch: list):
    states = np.array([e.state.ue_buffers for e in batch], dtype=int)
    obs = np.array([e.state.bs_obs for e in batch], dtype=int)
    next_states = np.array([e.next_state.ue_buffers for e in batch], dtype=int)
    next_obs = np.array([e.next_state.bs_obs for e in batch], dtype=int)
    actions = np.array([e.actions for e in batch], dtype=int)
    rewards = np.array([e.rewards for e in batch], dtype=float)
    terminal = np.array([e.terminal for e in batch], dtype=bool)
    return states, obs, actions, rewards, next_states, next_obs, terminal


def td_loss_and_grads(params: NpmParams, target_params: NpmParams, batch: list, cfg: TrainConfig):
    """Average TD loss over UEs and batch, plus its parameter gradients.

    ``loss = (1/L) * sum_ue mean_batch (r + discount * targetQ - Q(s, a))^2``
    with the bootstrap dropped on terminal transitions.
    """
    if not batch:
        raise ValueError("empty batch")
    num_ues = params.num_ues
    states, obs, actions, rewards, next_states, next_obs, terminal = _batch_arrays(batch)
    b = len(batch)

    q, cache = forward_batch(params, states, obs)
    q_next, _ = forward_batch(target_params, next_states, next_obs)

    rows = np.arange(b)[:, None]
    cols = np.arange(num_ues)[None, :]
    q_taken = q[rows, cols, actions]

    if cfg.target_rule == "max_next_q":
        bootstrap = q_next.max(axis=2)
    else:
        next_actions = np.array(
            [e.next_actions if e.next_actions is not None else (0,) * num_ues for e in batch],
            dtype=int,
        )
        for e in batch:
            if not e.terminal and e.next_actions is None:
                raise ValueError("stored_next_action requires next_actions on non-terminal experiences")
        bootstrap = q_next[rows, cols, next_actions]

    target = rewards + cfg.discount * bootstrap * (~terminal)[:, None]
    err = target - q_taken
    loss = float(np.sum(err ** 2) / (num_ues * b))

    dq = np.zeros_like(q)
    dq[rows, cols, actions] = -2.0 * err / (num_ues * b)
    grads = backward_batch(params, cache, dq)
    return loss, grads


def soft_update(target_params: NpmParams, online_params: NpmParams, rate: float) -> None:
    """In-place blend: target <- (1 - rate) * target + rate * online."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    for t_stack, o_stack in zip(target_params.stacks(), online_params.stacks()):
        for (tw, tb), (ow, ob) in zip(t_stack, o_stack):
            tw *= 1.0 - rate
            tw += rate * ow
            tb *= 1.0 - rate
            tb += rate * ob


class AdamState:
    def __init__(self, params: NpmParams):
        self.m = zero_grads(params)
        self.v = zero_grads(params)
        self.t = 0


def make_optimizer_state(cfg: TrainConfig, params: NpmParams):
    return AdamState(params) if cfg.optimizer == "adam" else None


def apply_update(params: NpmParams, grads: list, cfg: TrainConfig, opt_state) -> None:
    """One optimizer step in place."""
    lr = cfg.learning_rate
    if opt_state is None:
        for stack, g_stack in zip(params.stacks(), grads):
            for (w, b), (gw, gb) in zip(stack, g_stack):
                w -= lr * gw
                b -= lr * gb
        return
    opt_state.t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    corr1 = 1.0 - b1 ** opt_state.t
    corr2 = 1.0 - b2 ** opt_state.t
    for stack, g_stack, m_stack, v_stack in zip(params.stacks(), grads, opt_state.m, opt_state.v):
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(stack, g_stack, m_stack, v_stack):
            for arr, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                arr -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


def run_training_episode(
    sim: ChannelSim,
    params: NpmParams,
    target_params: NpmParams,
    replay: ReplayMemory,
    train_cfg: TrainConfig,
    reward_cfg: RewardConfig,
    episode: int,
    *,
    arrivals_rng: np.random.Generator,
    erasures_rng: np.random.Generator,
    explore_rng: np.random.Generator,
    replay_rng: np.random.Generator,
    opt_state=None,
    ttis: int | None = None,
    grad_fn=None,
    state_sink=None,
) -> list:
    """Run one training episode of ``ttis`` slots (defaults to the episode
    length) and return per-step logs.

    ``grad_fn(params, target_params, batch) -> (loss, grads)`` defaults to
    the plain TD objective; distillation passes a composite objective.
    ``state_sink`` receives every visited state (teacher replay collection).
    Gradient steps start once the replay holds a full batch.
    """
    sim.reset()
    epsilon = epsilon_at(episode, train_cfg)
    total = sim.cfg.tti_per_episode if ttis is None else ttis
    if total > sim.cfg.tti_per_episode:
        raise ValueError("episode cannot train for more slots than it contains")
    steps = total // train_cfg.ttis_per_step
    if grad_fn is None:
        grad_fn = lambda p, t, batch: td_loss_and_grads(p, t, batch, train_cfg)

    logs: list = []
    pending = None  # (state, actions, rewards) awaiting its successor state
    for step in range(steps):
        successes = 0
        for _ in range(train_cfg.ttis_per_step):
            sim.step_arrivals(arrivals_rng)
            state = sim.observe()
            if state_sink is not None:
                state_sink(state)
            q, _ = pipeline_forward(params, state)
            actions = tuple(select_action(q[ue], epsilon, explore_rng) for ue in range(params.num_ues))
            if pending is not None:
                replay.push(Experience(*pending, next_state=state, next_actions=actions, terminal=False))
            slot = sim.apply_actions(actions, erasures_rng)
            rewards = tuple(float(r) for r in compute_rewards(slot, reward_cfg))
            successes += int(slot.success)
            pending = (state, actions, rewards)

        loss = float("nan")
        if len(replay) >= train_cfg.batch_size:
            batch = replay.sample(train_cfg.batch_size, replay_rng)
            loss, grads = grad_fn(params, target_params, batch)
            apply_update(params, grads, train_cfg, opt_state)
            soft_update(target_params, params, train_cfg.soft_update_rate)
        logs.append(StepLog(episode=episode, step=step, loss=loss, epsilon=epsilon,
                            goodput=successes / train_cfg.ttis_per_step))

    if pending is not None:
        # Episode boundary: the final observation closes the last transition.
        replay.push(Experience(*pending, next_state=sim.observe(), next_actions=None, terminal=True))
    return logs


def run_greedy_episode(
    sim: ChannelSim,
    params: NpmParams,
    ttis: int,
    *,
    arrivals_rng: np.random.Generator,
    erasures_rng: np.random.Generator,
) -> list:
    """Roll ``ttis`` slots under the greedy policy; returns per-slot success flags."""
    sim.reset()
    flags = []
    for _ in range(ttis):
        sim.step_arrivals(arrivals_rng)
        q, _ = pipeline_forward(params, sim.observe())
        slot = sim.apply_actions(greedy_actions(q), erasures_rng)
        flags.append(slot.success)
    return flags
