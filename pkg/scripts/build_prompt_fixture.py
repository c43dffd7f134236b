#!/usr/bin/env python3
"""Rebuild tests/fixtures/prompt_trace.json.

The fixture freezes one two-epoch instruction-refinement trace so the test
suite can replay the textual forward/feedback/update loop without a live
endpoint: the terse seed instruction answers the training queries badly, the
recorded critique spells out the missing rules, the rewrite produces the
detailed default instruction, and a second pass returns the convergence
sentinel.
"""
from __future__ import annotations

import json
from pathlib import Path

from maclab.env import EnvState, RewardConfig
from maclab.promptopt import (
    CONVERGENCE_SENTINEL,
    RecordingPromptBackend,
    load_training_observations,
    render_objective,
    render_training_queries,
)
from maclab.teacher import Instruction, parse_actions, render_answer, rule_policy

FIXTURE_PATH = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "prompt_trace.json"

FEEDBACK_TEXT = """\
The system prompt should explicitly state the following key rules to align with the objective function:
1. Only one UE should transmit at a time to avoid collisions.
2. UEs must delete packets that have already been successfully decoded by the BS.
3. UEs should not delete packets that have not been decoded.
4. Avoid waiting or transmitting packets that have already been decoded, as this wastes time.
Adding these constraints will help the language model consistently optimize for successful, efficient packet transmissions while avoiding unnecessary actions."""


def naive_answer(observations) -> str:
    """What the terse instruction earns: every backlogged UE transmits."""
    blocks = []
    for obs in observations:
        actions = [1 if count > 0 else 0 for count in obs["ue_buffers"]]
        blocks.append(render_answer(actions))
    return "\n\n".join(blocks)


def informed_answer(observations) -> str:
    """Rule-following answers for the same observation batch."""
    blocks = []
    for obs in observations:
        state = EnvState(tuple(obs["ue_buffers"]), int(obs["bs_obs"]))
        decoded = state.bs_obs - 1 if 1 <= state.bs_obs <= state.num_ues else None
        blocks.append(render_answer(rule_policy(list(state.ue_buffers), decoded)))
    return "\n\n".join(blocks)


class CannedOptimizer:
    """Two-epoch scripted optimizer: critique the seed, rewrite it to the
    detailed instruction, then declare convergence."""

    def __init__(self):
        self.seed_text = Instruction.seed().text
        self.default_text = Instruction.default().text
        self.observations = load_training_observations()

    def forward(self, instruction: str, queries: str) -> str:
        if instruction == self.seed_text:
            return naive_answer(self.observations)
        return informed_answer(self.observations)

    def feedback(self, instruction: str, queries: str, response: str, objective: str) -> str:
        if instruction == self.seed_text:
            return FEEDBACK_TEXT
        return CONVERGENCE_SENTINEL

    def update(self, instruction: str, feedback: str) -> str:
        return self.default_text


def main() -> None:
    recorder = RecordingPromptBackend(CannedOptimizer())
    observations = load_training_observations()
    queries = render_training_queries(observations)
    objective = render_objective(RewardConfig())

    seed = Instruction.seed()
    answer0 = recorder.forward(seed.text, queries)
    critique = recorder.feedback(seed.text, queries, answer0, objective)
    updated = recorder.update(seed.text, critique)
    assert updated == Instruction.default().text

    answer1 = recorder.forward(updated, queries)
    sentinel = recorder.feedback(updated, queries, answer1, objective)
    assert sentinel == CONVERGENCE_SENTINEL
    # Sanity: the informed answers really differ from the naive ones.
    assert parse_actions(answer0.split("\n\n")[0], 3) != parse_actions(answer1.split("\n\n")[0], 3)

    FIXTURE_PATH.parent.mkdir(parents=True, exist_ok=True)
    recorder.save(FIXTURE_PATH)
    data = json.loads(FIXTURE_PATH.read_text(encoding="utf-8"))
    print(f"wrote {FIXTURE_PATH} ({len(data['records'])} records)")


if __name__ == "__main__":
    main()
