"""Discrete-time slotted multiple-access channel simulator.

A base station serves ``num_ues`` user equipments over a shared uplink.
Each slot (TTI): packets arrive into per-UE FIFO buffers with Bernoulli
probability, every UE picks one of three actions (stay silent, transmit its
head-of-line packet, or discard it), and the base station reports a single
channel observation back to all UEs:

* ``0``                 -- idle slot, nobody transmitted;
* ``1 .. num_ues``      -- the packet of that (1-based) UE was decoded;
* ``num_ues + 1``       -- transmissions happened but none was decoded
                           (erasure and/or collision).

Transmitting sends a *copy* of the head-of-line packet; only an explicit
discard removes it. A decode is only counted toward goodput the first time a
given packet is decoded.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Action",
    "SimConfig",
    "RewardConfig",
    "Packet",
    "UeBuffer",
    "BsState",
    "EnvState",
    "SlotResult",
    "ChannelSim",
    "compute_rewards",
    "goodput",
    "bler_from_snr",
]


class Action:
    """Integer action codes shared by every protocol engine."""

    SILENT = 0
    TRANSMIT = 1
    DISCARD = 2

    ALL = (SILENT, TRANSMIT, DISCARD)


def _per_ue(value, num_ues: int, name: str) -> tuple:
    """Broadcast a scalar to a per-UE tuple, or validate a sequence."""
    if isinstance(value, (int, float)):
        return tuple([value] * num_ues)
    out = tuple(value)
    if len(out) != num_ues:
        raise ValueError(f"{name} must have one entry per UE, got {len(out)} for {num_ues} UEs")
    return out


@dataclass
class SimConfig:
    """Static description of one channel environment.

    ``arrival_prob``, ``buffer_cap`` and ``erasure_prob`` accept either a
    scalar (applied to every UE) or a per-UE sequence.
    """

    num_ues: int = 2
    arrival_prob: object = 0.3
    buffer_cap: object = 3
    erasure_prob: object = 0.01
    tti_per_episode: int = 144
    seed: int = 0

    def __post_init__(self):
        if self.num_ues < 1:
            raise ValueError("num_ues must be >= 1")
        if self.tti_per_episode < 1:
            raise ValueError("tti_per_episode must be >= 1")
        self.arrival_prob = _per_ue(self.arrival_prob, self.num_ues, "arrival_prob")
        self.buffer_cap = _per_ue(self.buffer_cap, self.num_ues, "buffer_cap")
        self.erasure_prob = _per_ue(self.erasure_prob, self.num_ues, "erasure_prob")
        for p in self.arrival_prob:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"arrival_prob {p} outside [0, 1]")
        for p in self.erasure_prob:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"erasure_prob {p} outside [0, 1]")
        for b in self.buffer_cap:
            if int(b) < 1:
                raise ValueError("buffer_cap must be >= 1")
        self.buffer_cap = tuple(int(b) for b in self.buffer_cap)

    @property
    def failure_obs(self) -> int:
        """Channel observation value that encodes erasure-and/or-collision."""
        return self.num_ues + 1


@dataclass
class RewardConfig:
    """Per-slot reward shaping. Penalty fields are magnitudes (>= 0).

    The default mode rewards/penalises only the UEs that caused the slot
    outcome; bystanders in a non-idle slot receive 0. ``strict_fallthrough``
    instead applies the idle penalty to every UE not matched by an earlier
    case.
    """

    success_reward: float = 10.0
    discard_decoded_reward: float = 8.0
    discard_undecoded_penalty: float = 4.0
    collision_penalty: float = 4.0
    idle_penalty: float = 1.0
    strict_fallthrough: bool = False

    def __post_init__(self):
        for name in ("success_reward", "discard_decoded_reward", "discard_undecoded_penalty",
                     "collision_penalty", "idle_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0 (penalties are magnitudes)")


@dataclass(frozen=True)
class Packet:
    uid: int
    owner: int
    arrival_slot: int


class UeBuffer:
    """Bounded FIFO of packets; overflow drops the oldest entry."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self._q: deque[Packet] = deque()

    def __len__(self) -> int:
        return len(self._q)

    @property
    def head(self) -> Packet | None:
        return self._q[0] if self._q else None

    def packets(self) -> tuple[Packet, ...]:
        return tuple(self._q)

    def push(self, packet: Packet) -> Packet | None:
        """Append ``packet``; return the dropped head if the buffer was full."""
        dropped = None
        if len(self._q) >= self.capacity:
            dropped = self._q.popleft()
        self._q.append(packet)
        return dropped

    def pop_head(self) -> Packet:
        if not self._q:
            raise IndexError("pop from empty buffer")
        return self._q.popleft()

    def clear(self) -> None:
        self._q.clear()


@dataclass
class BsState:
    """Base-station side bookkeeping: decoded packet ids plus last observation."""

    decoded_ids: set = field(default_factory=set)
    channel_obs: int = 0


@dataclass(frozen=True)
class EnvState:
    """Observation snapshot fed to protocol engines: buffer lengths + channel obs."""

    ue_buffers: tuple[int, ...]
    bs_obs: int

    @property
    def num_ues(self) -> int:
        return len(self.ue_buffers)


@dataclass
class SlotResult:
    """Everything that happened in one slot, for reward and logging purposes."""

    success: bool
    success_ue: int | None
    decoded_uid: int | None
    new_bs_obs: int
    nonerased_tx_count: int
    transmitted: tuple[bool, ...]
    erased: tuple[bool, ...]
    collided: tuple[bool, ...]
    discarded_decoded: tuple[bool, ...]
    discarded_undecoded: tuple[bool, ...]
    duplicate_decode: tuple[bool, ...]
    coerced: tuple[bool, ...]


class ChannelSim:
    """Mutable slotted-channel simulator for one environment configuration.

    All randomness is injected through explicit generators so callers can
    keep arrivals and erasures on independent named substreams.

    ``remove_on_decode`` switches to classic instant-acknowledgement
    semantics: a freshly decoded packet is removed from its owner's buffer in
    the same slot instead of waiting for an explicit discard.
    """

    def __init__(self, cfg: SimConfig, *, remove_on_decode: bool = False):
        self.cfg = cfg
        self.remove_on_decode = remove_on_decode
        self.buffers: list[UeBuffer] = []
        self.bs = BsState()
        self.slot = 0
        self._next_uid = 0
        self.reset()

    def reset(self) -> None:
        self.buffers = [UeBuffer(cap) for cap in self.cfg.buffer_cap]
        self.bs = BsState()
        self.slot = 0
        self._next_uid = 0

    def observe(self) -> EnvState:
        return EnvState(
            ue_buffers=tuple(len(b) for b in self.buffers),
            bs_obs=self.bs.channel_obs,
        )

    def step_arrivals(self, rng: np.random.Generator) -> tuple[bool, ...]:
        """Draw one Bernoulli arrival per UE and enqueue new packets.

        Exactly ``num_ues`` uniforms are consumed per call so the arrival
        pattern is independent of buffer contents.
        """
        draws = rng.random(self.cfg.num_ues)
        arrived = []
        for ue, p in enumerate(self.cfg.arrival_prob):
            hit = bool(draws[ue] < p)
            arrived.append(hit)
            if hit:
                self.buffers[ue].push(Packet(self._next_uid, ue, self.slot))
                self._next_uid += 1
        return tuple(arrived)

    def apply_actions(self, actions: Sequence[int], rng: np.random.Generator) -> SlotResult:
        """Resolve one slot.

        Transmit/discard on an empty buffer is coerced to silent (flagged).
        Erasures are drawn per actual transmitter, in UE order. Only
        non-erased transmissions count toward the collision test.
        """
        n = self.cfg.num_ues
        if len(actions) != n:
            raise ValueError(f"expected {n} actions, got {len(actions)}")
        for a in actions:
            if a not in Action.ALL:
                raise ValueError(f"unknown action code {a}")

        coerced = [False] * n
        transmitted = [False] * n
        erased = [False] * n
        discards: list[int] = []
        for ue, act in enumerate(actions):
            if act == Action.SILENT:
                continue
            if len(self.buffers[ue]) == 0:
                coerced[ue] = True
                continue
            if act == Action.TRANSMIT:
                transmitted[ue] = True
                erased[ue] = bool(rng.random() < self.cfg.erasure_prob[ue])
            else:
                discards.append(ue)

        arrivers = [ue for ue in range(n) if transmitted[ue] and not erased[ue]]
        k = len(arrivers)
        any_tx = any(transmitted)

        success = False
        success_ue = None
        decoded_uid = None
        duplicate = [False] * n
        collided = [False] * n
        if k == 0:
            new_obs = self.cfg.failure_obs if any_tx else 0
        elif k == 1:
            sender = arrivers[0]
            head = self.buffers[sender].head
            assert head is not None
            new_obs = sender + 1
            if head.uid in self.bs.decoded_ids:
                duplicate[sender] = True
            else:
                self.bs.decoded_ids.add(head.uid)
                success = True
                success_ue = sender
                decoded_uid = head.uid
                if self.remove_on_decode:
                    self.buffers[sender].pop_head()
        else:
            new_obs = self.cfg.failure_obs
            for ue in arrivers:
                collided[ue] = True

        discarded_decoded = [False] * n
        discarded_undecoded = [False] * n
        for ue in discards:
            packet = self.buffers[ue].pop_head()
            if packet.uid in self.bs.decoded_ids:
                discarded_decoded[ue] = True
            else:
                discarded_undecoded[ue] = True

        self.bs.channel_obs = new_obs
        self.slot += 1
        return SlotResult(
            success=success,
            success_ue=success_ue,
            decoded_uid=decoded_uid,
            new_bs_obs=new_obs,
            nonerased_tx_count=k,
            transmitted=tuple(transmitted),
            erased=tuple(erased),
            collided=tuple(collided),
            discarded_decoded=tuple(discarded_decoded),
            discarded_undecoded=tuple(discarded_undecoded),
            duplicate_decode=tuple(duplicate),
            coerced=tuple(coerced),
        )


def compute_rewards(slot: SlotResult, cfg: RewardConfig) -> np.ndarray:
    """Per-UE reward for one resolved slot. Cases are mutually exclusive;
    the first matching case (in the order below) applies:

    1. fresh decode             -> +success_reward for the transmitter
    2. discard of decoded head  -> +discard_decoded_reward
    3. discard of undecoded head-> -discard_undecoded_penalty
    4. transmitted into a slot with >1 non-erased transmissions
                                -> -collision_penalty
    5. otherwise: -idle_penalty on an idle slot (every UE) and for a
       duplicate decode; other bystanders get 0 unless ``strict_fallthrough``.
    """
    n = len(slot.transmitted)
    idle = slot.new_bs_obs == 0
    out = np.zeros(n, dtype=float)
    for ue in range(n):
        if slot.success and slot.success_ue == ue:
            out[ue] = cfg.success_reward
        elif slot.discarded_decoded[ue]:
            out[ue] = cfg.discard_decoded_reward
        elif slot.discarded_undecoded[ue]:
            out[ue] = -cfg.discard_undecoded_penalty
        elif slot.transmitted[ue] and slot.nonerased_tx_count > 1:
            out[ue] = -cfg.collision_penalty
        elif idle or slot.duplicate_decode[ue] or cfg.strict_fallthrough:
            out[ue] = -cfg.idle_penalty
    return out


def goodput(success_flags: Iterable[bool]) -> float:
    """Fraction of slots with a fresh decode. Errors on an empty series."""
    flags = list(success_flags)
    if not flags:
        raise ValueError("goodput of an empty slot series is undefined")
    return float(sum(bool(f) for f in flags)) / len(flags)


def bler_from_snr(snr_db: float, midpoint: float = 0.0, slope: float = 1.0) -> float:
    """Map an SNR (dB) to a block-erasure probability via a falling logistic.

    ``slope`` must be positive; the curve crosses 0.5 at ``midpoint`` and
    decreases monotonically with SNR.
    """
    if slope <= 0:
        raise ValueError("slope must be > 0")
    return 1.0 / (1.0 + math.exp(slope * (snr_db - midpoint)))
