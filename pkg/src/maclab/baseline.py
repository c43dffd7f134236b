"""Slotted-ALOHA reference protocol: transmit with a fixed probability,
independently per backlogged UE, with no learning and no coordination.

Because the simulator models success removal as an explicit discard action,
the policy needs a convention for *when* a UE deletes an acknowledged packet.
Three are provided:

* ``persistent`` (default) -- the discard happens with the same probability
  used for transmission. The policy is memoryless: it only reacts to the
  latest channel observation, so an acknowledged head packet that is not
  discarded immediately is forgotten and may be re-transmitted, costing a
  duplicate decode.
* ``next_slot`` -- a UE that just saw its own packet decoded discards it in
  the following slot, deterministically.
* ``instant`` -- classic instant-acknowledgement semantics; the simulator
  removes decoded packets itself and the policy never discards.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Action, ChannelSim, SimConfig, goodput
from .rng import substream

__all__ = ["SAlohaConfig", "saloha_step", "run_saloha_episode", "saloha_series"]

DISCARD_MODES = ("persistent", "next_slot", "instant")


@dataclass(frozen=True)
class SAlohaConfig:
    transmit_prob: float = 0.33
    discard_mode: str = "persistent"

    def __post_init__(self):
        if not 0.0 <= self.transmit_prob <= 1.0:
            raise ValueError("transmit_prob must lie in [0, 1]")
        if self.discard_mode not in DISCARD_MODES:
            raise ValueError(f"discard_mode must be one of {DISCARD_MODES}")


def saloha_step(buffer_counts, decoded_ue, cfg: SAlohaConfig,
                rng: np.random.Generator) -> list:
    """Joint action for one slot.

    ``decoded_ue`` is the (0-based) UE whose packet the base station reported
    decoded in the previous slot, or ``None``. One probability draw is
    consumed per backlogged UE facing a random choice, in UE order.
    """
    actions = []
    for ue, count in enumerate(buffer_counts):
        if count < 1:
            actions.append(Action.SILENT)
            continue
        if ue == decoded_ue:
            if cfg.discard_mode == "next_slot":
                actions.append(Action.DISCARD)
                continue
            if cfg.discard_mode == "persistent":
                actions.append(Action.DISCARD if rng.random() < cfg.transmit_prob
                               else Action.SILENT)
                continue
            # instant mode: the decoded packet is already gone; fall through
        actions.append(Action.TRANSMIT if rng.random() < cfg.transmit_prob
                       else Action.SILENT)
    return actions


def run_saloha_episode(
    sim: ChannelSim,
    cfg: SAlohaConfig,
    ttis: int,
    *,
    arrivals_rng: np.random.Generator,
    erasures_rng: np.random.Generator,
    policy_rng: np.random.Generator,
) -> list:
    """Per-slot success flags for one episode of the fixed-probability policy."""
    sim.reset()
    flags = []
    decoded_ue = None
    for _ in range(ttis):
        sim.step_arrivals(arrivals_rng)
        state = sim.observe()
        actions = saloha_step(state.ue_buffers, decoded_ue, cfg, policy_rng)
        slot = sim.apply_actions(actions, erasures_rng)
        flags.append(slot.success)
        decoded_ue = slot.new_bs_obs - 1 if 1 <= slot.new_bs_obs <= state.num_ues else None
    return flags


def saloha_series(sim_cfg: SimConfig, cfg: SAlohaConfig, *, seed: int,
                  episodes: int) -> list:
    """Per-episode goodputs on the same testing streams the learned
    protocols use, so comparisons share arrival realizations."""
    sim = ChannelSim(sim_cfg, remove_on_decode=cfg.discard_mode == "instant")
    ttis = sim_cfg.tti_per_episode
    series = []
    for episode in range(episodes):
        flags = run_saloha_episode(
            sim, cfg, ttis,
            arrivals_rng=substream(seed, "test-arrivals", episode),
            erasures_rng=substream(seed, "test-erasures", episode),
            policy_rng=substream(seed, "saloha-policy", episode),
        )
        series.append(goodput(flags))
    return series
