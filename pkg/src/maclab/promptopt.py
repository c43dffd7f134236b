"""Automatic instruction refinement through textual forward/feedback/update.

The loop mirrors gradient training with text in place of numbers: the current
instruction answers a fixed batch of rendered observations (forward), a
critique of that answer against the natural-language reward rules plays the
role of the gradient (feedback), and a rewrite of the instruction applies it
(update). Every candidate instruction is scored by mean goodput in the
simulator, and the best scorer wins.

Backends are pluggable: a remote chat endpoint for live runs, a fixture
replayer for tests. Empty or ``NO_CHANGE`` feedback is the convergence
signal. An update that drops the mandatory answer-format clause is rejected
and the previous instruction is kept.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .env import ChannelSim, RewardConfig, SimConfig
from .rng import substream
from .env import EnvState
from .teacher import (
    ANSWER_FORMAT_CLAUSE,
    Instruction,
    RemoteConfig,
    TeacherTransportError,
    _post_chat,
    build_queries,
    run_tpm_episode,
)

__all__ = [
    "render_objective",
    "load_training_observations",
    "render_training_queries",
    "PromptEpoch",
    "PromptOptState",
    "textual_forward",
    "textual_feedback",
    "textual_update",
    "evaluate_instruction",
    "select_best",
    "optimize_instruction",
    "is_convergence_feedback",
    "prompt_request_key",
    "RemotePromptBackend",
    "FixturePromptBackend",
    "RecordingPromptBackend",
]

logger = logging.getLogger(__name__)

CONVERGENCE_SENTINEL = "NO_CHANGE"


def render_objective(reward_cfg: RewardConfig) -> str:
    """Natural-language rendering of every reward rule, for feedback prompts."""
    template = resources.files("maclab.templates").joinpath("objective.txt") \
        .read_text(encoding="utf-8")
    return template.format(
        success_reward=reward_cfg.success_reward,
        discard_decoded_reward=reward_cfg.discard_decoded_reward,
        discard_undecoded_penalty=reward_cfg.discard_undecoded_penalty,
        collision_penalty=reward_cfg.collision_penalty,
        idle_penalty=reward_cfg.idle_penalty,
    ).strip()


def load_training_observations(path=None) -> list:
    """Hand-written observation snapshots used as the optimization batch."""
    if path is None:
        raw = resources.files("maclab.templates") \
            .joinpath("promptopt_observations.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    data = json.loads(raw)
    if not data:
        raise ValueError("observation file holds no entries")
    return data


def render_training_queries(observations) -> str:
    """Render observation snapshots to the same query text used at runtime."""
    blocks = []
    for obs in observations:
        counts = [int(c) for c in obs["ue_buffers"]]
        state = EnvState(ue_buffers=tuple(counts), bs_obs=int(obs["bs_obs"]))
        ue_queries, bs_query = build_queries(state)
        blocks.append("\n".join([*ue_queries, bs_query]))
    return "\n\n".join(blocks)


@dataclass
class PromptEpoch:
    """One history row: an instruction, what it answered, the critique it
    received, and its measured goodput."""

    epoch: int
    instruction: Instruction
    goodput: float
    response: str | None = None
    feedback: str | None = None


@dataclass
class PromptOptState:
    max_epochs: int
    history: list = field(default_factory=list)
    converged: bool = False
    aborted: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def is_convergence_feedback(feedback: str) -> bool:
    text = feedback.strip()
    return text == "" or text.upper() == CONVERGENCE_SENTINEL


def textual_forward(backend, instruction: Instruction, queries: str) -> str:
    """The instruction's answer to the training queries."""
    if not queries.strip():
        raise ValueError("training queries must be non-empty")
    return backend.forward(instruction.text, queries)


def textual_feedback(backend, instruction: Instruction, queries: str, response: str,
                     objective: str) -> str:
    """Critique of the response against the reward rules."""
    return backend.feedback(instruction.text, queries, response, objective)


def textual_update(backend, instruction: Instruction, feedback: str) -> Instruction:
    """The rewritten instruction; kept unchanged if the rewrite drops the
    mandatory answer-format clause."""
    if not feedback.strip():
        raise ValueError("cannot update from empty feedback")
    text = backend.update(instruction.text, feedback).strip()
    if ANSWER_FORMAT_CLAUSE not in text:
        logger.warning("rewrite dropped the %r clause; keeping previous instruction",
                       ANSWER_FORMAT_CLAUSE)
        return instruction
    return Instruction(text=text, tag="optimized")

def evaluate_instruction(
    instruction: Instruction,
    sim_cfg: SimConfig,
    backend,
    episodes: int,
    seed: int,
) -> float:
    """Mean per-slot goodput of the text-driven policy over fresh episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    sim = ChannelSim(sim_cfg)
    ttis = sim_cfg.tti_per_episode
    rates = []
    for idx in range(episodes):
        flags = run_tpm_episode(
            sim, backend, instruction, ttis,
            arrivals_rng=substream(seed, "prompt-eval-arrivals", idx),
            erasures_rng=substream(seed, "prompt-eval-erasures", idx),
        )
        rates.append(sum(flags) / len(flags))
    return float(np.mean(rates))


def select_best(state: PromptOptState) -> Instruction:
    """Goodput argmax over the history; ties go to the earliest epoch."""
    if not state.history:
        raise ValueError("no evaluated instructions")
    best = state.history[0]
    for entry in state.history[1:]:
        if entry.goodput > best.goodput:
            best = entry
    return best.instruction


def optimize_instruction(
    opt_backend,
    eval_backend,
    sim_cfg: SimConfig,
    reward_cfg: RewardConfig,
    *,
    seed: int,
    max_epochs: int = 10,
    eval_episodes: int = 2,
    initial: Instruction | None = None,
    observations=None,
) -> PromptOptState:
    """Full refinement loop from an initial instruction.

    Stops at ``max_epochs`` or at the convergence sentinel, whichever comes
    first; a backend transport failure aborts the current epoch and returns
    the state built so far.
    """
    instruction = initial if initial is not None else Instruction.seed()
    if observations is None:
        observations = load_training_observations()
    queries = render_training_queries(observations)
    objective = render_objective(reward_cfg)

    state = PromptOptState(max_epochs=max_epochs)
    goodput = evaluate_instruction(instruction, sim_cfg, eval_backend,
                                   episodes=eval_episodes, seed=seed)
    state.history.append(PromptEpoch(epoch=0, instruction=instruction, goodput=goodput))

    for epoch in range(max_epochs):
        entry = state.history[-1]
        try:
            response = textual_forward(opt_backend, entry.instruction, queries)
            entry.response = response
            feedback = textual_feedback(opt_backend, entry.instruction, queries, response,
                                        objective)
            entry.feedback = feedback
        except TeacherTransportError as exc:
            logger.warning("prompt backend unavailable at epoch %d: %s", epoch, exc)
            state.aborted = True
            break
        if is_convergence_feedback(feedback):
            state.converged = True
            break
        updated = textual_update(opt_backend, entry.instruction, feedback)
        goodput = evaluate_instruction(updated, sim_cfg, eval_backend,
                                       episodes=eval_episodes, seed=seed)
        state.history.append(PromptEpoch(epoch=epoch + 1, instruction=updated,
                                         goodput=goodput))
    return state


# --- backends -------------------------------------------------------------

def prompt_request_key(op: str, inputs: dict) -> str:
    blob = json.dumps({"op": op, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_FEEDBACK_SYSTEM = (
    "You review an instruction used to coordinate radio uplink transmissions. "
    "Given the scoring rules, the instruction, example queries, and the answer they "
    "produced, point out what the instruction should state to score higher. "
    f"If the instruction already matches the rules, reply exactly {CONVERGENCE_SENTINEL}."
)
_UPDATE_SYSTEM = (
    "You rewrite an instruction according to reviewer feedback. Reply with the revised "
    "instruction only. Always keep the answer-format clause "
    f"\"Provide answers in the format: '{ANSWER_FORMAT_CLAUSE}'.\""
)


class RemotePromptBackend:
    """Runs the three textual steps over a chat-completions endpoint."""

    def __init__(self, cfg: RemoteConfig, session=None):
        self.cfg = cfg
        self._session = session

    def _chat(self, system: str, user: str) -> str:
        payload = _post_chat(self.cfg, [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ], logprobs=False, session=self._session)
        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            logger.warning("malformed prompt-backend payload; treating as empty text")
            return ""

    def forward(self, instruction: str, queries: str) -> str:
        return self._chat(instruction, queries)

    def feedback(self, instruction: str, queries: str, response: str, objective: str) -> str:
        user = (f"# Scoring rules\n{objective}\n\n# Instruction\n{instruction}\n\n"
                f"# Queries\n{queries}\n\n# Answer\n{response}")
        return self._chat(_FEEDBACK_SYSTEM, user)

    def update(self, instruction: str, feedback: str) -> str:
        user = f"# Instruction\n{instruction}\n\n# Feedback\n{feedback}"
        return self._chat(_UPDATE_SYSTEM, user)


class FixturePromptBackend:
    """Replays recorded textual steps; raises ``KeyError`` on unseen input."""

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        self._records = {rec["key"]: rec["output"] for rec in data["records"]}

    def _lookup(self, op: str, inputs: dict) -> str:
        key = prompt_request_key(op, inputs)
        if key not in self._records:
            raise KeyError(f"no recorded {op} output for request {key[:12]}...")
        return self._records[key]

    def forward(self, instruction: str, queries: str) -> str:
        return self._lookup("forward", {"instruction": instruction, "queries": queries})

    def feedback(self, instruction: str, queries: str, response: str, objective: str) -> str:
        return self._lookup("feedback", {"instruction": instruction, "queries": queries,
                                         "response": response, "objective": objective})

    def update(self, instruction: str, feedback: str) -> str:
        return self._lookup("update", {"instruction": instruction, "feedback": feedback})


class RecordingPromptBackend:
    """Wraps a live backend and collects replayable records."""

    def __init__(self, inner):
        self.inner = inner
        self.records = []

    def _record(self, op: str, inputs: dict, output: str) -> str:
        self.records.append({"op": op, "key": prompt_request_key(op, inputs),
                             "inputs": inputs, "output": output})
        return output

    def forward(self, instruction: str, queries: str) -> str:
        inputs = {"instruction": instruction, "queries": queries}
        return self._record("forward", inputs, self.inner.forward(instruction, queries))

    def feedback(self, instruction: str, queries: str, response: str, objective: str) -> str:
        inputs = {"instruction": instruction, "queries": queries, "response": response,
                  "objective": objective}
        return self._record("feedback", inputs,
                            self.inner.feedback(instruction, queries, response, objective))

    def update(self, instruction: str, feedback: str) -> str:
        inputs = {"instruction": instruction, "feedback": feedback}
        return self._record("update", inputs, self.inner.update(instruction, feedback))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"version": 1, "records": self.records}, fh, indent=1)
