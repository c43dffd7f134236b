"""Distilling the text-teacher policy into the numeric student network.

The student is trained with a composite objective: the usual temporal-
difference loss on sampled experiences, plus a Kullback-Leibler term pulling
the student's temperature-softened action distributions toward the teacher's
on states replayed from a states-only memory. Teacher answers are memoized in
:class:`TeacherCache` so each distinct state is queried at most once per run.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .env import EnvState
from .npm import NpmParams, forward_batch, backward_batch, pipeline_forward
from .teacher import TeacherTransportError, action_distribution, build_queries, parse_actions
from .train import TrainConfig, apply_update, soft_update, td_loss_and_grads

__all__ = [
    "DistillConfig",
    "TeacherReplay",
    "TeacherCache",
    "soft_distributions",
    "student_soft_logits",
    "kd_loss",
    "composite_loss_and_grads",
    "make_composite_grad_fn",
    "composite_step",
]

logger = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    """Weights for the composite objective.

    ``td_weight`` scales the temporal-difference term, ``kd_weight`` the
    teacher-matching term; ``kappa`` is the softmax temperature applied to
    both the teacher scores and the student Q-values. ``kd_batch_size`` of
    ``None`` reuses the TD batch size.
    """

    kappa: float = 2.0
    td_weight: float = 0.1
    kd_weight: float = 0.9
    kd_batch_size: int | None = None

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.td_weight < 0 or self.kd_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.td_weight + self.kd_weight <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.kd_batch_size is not None and self.kd_batch_size < 1:
            raise ValueError("kd_batch_size must be >= 1 when given")


class TeacherReplay:
    """Bounded FIFO store of visited states (no actions/rewards).

    Every stored state must match the UE count declared at construction, so
    a stale memory can never feed a resized network.
    """

    def __init__(self, num_ues: int, capacity: int = 50_000):
        if num_ues < 1:
            raise ValueError("num_ues must be >= 1")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.num_ues = num_ues
        self.capacity = capacity
        self._states: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._states)

    def push(self, state: EnvState) -> None:
        if state.num_ues != self.num_ues:
            raise ValueError(f"state has {state.num_ues} UEs, store expects {self.num_ues}")
        if len(self._states) < self.capacity:
            self._states.append(state)
        else:
            self._states[self._next] = state
            self._next = (self._next + 1) % self.capacity

    def sample(self, size: int, rng: np.random.Generator) -> list:
        if size > len(self._states):
            raise ValueError(f"cannot sample {size} of {len(self._states)} states")
        idx = rng.choice(len(self._states), size=size, replace=False)
        return [self._states[i] for i in idx]

    def clear(self) -> None:
        self._states.clear()
        self._next = 0


def _state_key(state: EnvState) -> tuple:
    return tuple(int(c) for c in state.ue_buffers), int(state.bs_obs)


class TeacherCache:
    """Memoized per-state teacher action distributions.

    A miss renders the state as queries, asks the backend once, and converts
    each UE's answer-token scores into a temperature softmax (uniform when no
    scores came back). Hits return a copy of the stored matrix, so callers
    can never corrupt the cache.
    """

    def __init__(self, backend, instruction, temperature: float):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.backend = backend
        self.instruction = instruction
        self.temperature = temperature
        self._table: dict = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._table)

    def get(self, state: EnvState) -> np.ndarray:
        """(L, 3) matrix of teacher action probabilities for ``state``."""
        key = _state_key(state)
        hit = self._table.get(key)
        if hit is not None:
            self.hits += 1
            return hit.copy()
        self.misses += 1
        ue_queries, bs_query = build_queries(state)
        response = self.backend.complete(self.instruction, ue_queries, bs_query)
        rows = [action_distribution(s, self.temperature) for s in response.log_scores]
        if len(rows) != state.num_ues:
            raise ValueError("teacher returned a wrong number of score rows")
        matrix = np.stack(rows)
        self._table[key] = matrix
        return matrix.copy()

    def save(self, path) -> None:
        records = [
            {"ue_buffers": list(buffers), "bs_obs": bs, "probs": m.tolist()}
            for (buffers, bs), m in sorted(self._table.items())
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"version": 1, "temperature": self.temperature, "records": records}, fh)

    def load(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("temperature") != self.temperature:
            raise ValueError("cached distributions"
                             f" were built at temperature {data.get('temperature')},"
                             f" this cache uses {self.temperature}")
        for rec in data["records"]:
            key = (tuple(rec["ue_buffers"]), int(rec["bs_obs"]))
            self._table[key] = np.array(rec["probs"], dtype=float)


def soft_distributions(q: np.ndarray, kappa: float) -> np.ndarray:
    """Temperature softmax over the last axis, computed stably in log space."""
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    z = np.asarray(q, dtype=float) / kappa
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_soft_logits(params: NpmParams, state: EnvState, kappa: float) -> np.ndarray:
    """(L, 3) student action distributions: softmax(Q/kappa) per UE."""
    q, _ = pipeline_forward(params, state)
    return soft_distributions(q, kappa)


def kd_loss(teacher: np.ndarray, student: np.ndarray) -> float:
    """Sum over UEs of KL(teacher row || student row), with 0*ln(0) = 0."""
    m = np.asarray(teacher, dtype=float)
    p = np.asarray(student, dtype=float)
    if m.shape != p.shape:
        raise ValueError(f"teacher shape {m.shape} != student shape {p.shape}")
    terms = np.where(m > 0, m * np.log(np.where(m > 0, m, 1.0) / p), 0.0)
    return float(terms.sum())


def composite_loss_and_grads(
    params: NpmParams,
    target_params: NpmParams,
    td_batch: list,
    kd_states: list,
    kd_targets: list,
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
):
    """Weighted TD + teacher-matching loss and its parameter gradients.

    Pure in ``params`` given fixed batches, which is what makes it directly
    checkable against finite differences. ``kd_targets`` holds one (L, 3)
    teacher matrix per entry of ``kd_states``.
    """
    lam1, lam2 = distill_cfg.td_weight, distill_cfg.kd_weight
    if lam2 == 0.0:
        loss_td, grads = td_loss_and_grads(params, target_params, td_batch, train_cfg)
        if lam1 != 1.0:
            loss_td = lam1 * loss_td
            grads = [[(lam1 * w, lam1 * b) for w, b in stack] for stack in grads]
        return loss_td, grads

    if len(kd_states) != len(kd_targets):
        raise ValueError("kd_states and kd_targets must have equal length")
    total = 0.0
    grads = None
    if lam1 > 0.0 and td_batch:
        loss_td, grads = td_loss_and_grads(params, target_params, td_batch, train_cfg)
        total += lam1 * loss_td
        grads = [[(lam1 * w, lam1 * b) for w, b in stack] for stack in grads]

    if kd_states:
        counts = np.asarray([s.ue_buffers for s in kd_states], dtype=int)
        obs = np.asarray([s.bs_obs for s in kd_states], dtype=int)
        q, cache = forward_batch(params, counts, obs)
        pi = soft_distributions(q, distill_cfg.kappa)
        m = np.stack([np.asarray(t, dtype=float) for t in kd_targets])
        if m.shape != pi.shape:
            raise ValueError(f"teacher knowledge shape {m.shape} != student shape {pi.shape}")
        n = len(kd_states)
        terms = np.where(m > 0, m * np.log(np.where(m > 0, m, 1.0) / pi), 0.0)
        total += lam2 * float(terms.sum()) / n
        dq = lam2 * (pi - m) / (distill_cfg.kappa * n)
        kd_grads = backward_batch(params, cache, dq)
        if grads is None:
            grads = kd_grads
        else:
            grads = [
                [(wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(sa, sb)]
                for sa, sb in zip(grads, kd_grads)
            ]
    if grads is None:
        raise ValueError("composite loss needs a non-empty TD batch or KD state batch")
    return total, grads


def make_composite_grad_fn(
    cache: TeacherCache,
    teacher_replay: TeacherReplay,
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
    kd_rng: np.random.Generator,
):
    """Gradient callback for the training loop.

    Samples a fresh KD state batch per update, resolves teacher knowledge
    through the cache, and returns the composite loss/gradients. A teacher
    transport failure drops the affected state from that update and logs it.
    With ``kd_weight == 0`` the callback is plain (scaled) TD and touches
    neither the teacher store nor ``kd_rng``.
    """

    def grad_fn(params, target_params, batch):
        if distill_cfg.kd_weight == 0.0:
            return composite_loss_and_grads(params, target_params, batch, [], [],
                                            train_cfg, distill_cfg)
        want = distill_cfg.kd_batch_size or train_cfg.batch_size
        size = min(want, len(teacher_replay))
        states = teacher_replay.sample(size, kd_rng) if size else []
        kd_states, kd_targets = [], []
        for state in states:
            try:
                kd_targets.append(cache.get(state))
            except TeacherTransportError as exc:
                logger.warning("teacher unavailable for a replayed state, skipping it: %s", exc)
                continue
            kd_states.append(state)
        return composite_loss_and_grads(params, target_params, batch, kd_states, kd_targets,
                                        train_cfg, distill_cfg)

    return grad_fn


def composite_step(
    params: NpmParams,
    target_params: NpmParams,
    replay,
    teacher_replay: TeacherReplay,
    cache: TeacherCache,
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
    *,
    replay_rng: np.random.Generator,
    kd_rng: np.random.Generator,
    opt_state=None,
) -> float:
    """One full composite update in place: sample, step, soft-update target."""
    batch = replay.sample(train_cfg.batch_size, replay_rng)
    grad_fn = make_composite_grad_fn(cache, teacher_replay, train_cfg, distill_cfg, kd_rng)
    loss, grads = grad_fn(params, target_params, batch)
    apply_update(params, grads, train_cfg, opt_state)
    soft_update(target_params, params, train_cfg.soft_update_rate)
    return loss
