"""Token-based protocol engine: natural-language queries and answers.

Every slot, the observations are rendered as text -- one buffer-status line
per UE plus one base-station line -- and a *teacher backend* answers with one
``UE #: Action #`` line per UE. Unparseable or missing lines fall back to
staying silent, so a garbled answer can never crash a run.

Backends:

* :class:`ScriptedOracle` -- a deterministic rule policy (discard what the
  base station just decoded, let the longest non-empty buffer transmit) with
  synthetic confidence scores. A seeded ``miss_rate`` garbles individual
  answer lines to emulate an imperfect language model; it is a pure function
  of (queries, seed), so identical inputs always produce identical output.
* :class:`RemoteBackend` -- an OpenAI-style chat-completions HTTP client that
  extracts per-action token log-scores from the response when available.
* :class:`FixtureBackend` -- replays recorded responses from a JSON file, for
  tests and offline runs.

Per-UE scores are converted to action distributions with a temperature
softmax over the three action-token log-scores; absent scores yield the
uniform distribution.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import requests

from .env import Action, ChannelSim, EnvState
from .rng import substream

__all__ = [
    "ANSWER_FORMAT_CLAUSE",
    "Instruction",
    "TeacherResponse",
    "TeacherTransportError",
    "TpmDecision",
    "build_ue_query",
    "build_bs_query",
    "build_queries",
    "parse_actions",
    "action_distribution",
    "render_answer",
    "rule_policy",
    "ScriptedOracle",
    "RemoteConfig",
    "RemoteBackend",
    "FixtureBackend",
    "RecordingBackend",
    "tpm_step",
    "run_tpm_episode",
]

logger = logging.getLogger(__name__)

ANSWER_FORMAT_CLAUSE = "UE #: Action #"


def _load_template(name: str) -> str:
    return resources.files("maclab.templates").joinpath(name).read_text(encoding="utf-8")


def _query_templates() -> dict:
    return json.loads(_load_template("queries.json"))


_QUERIES = _query_templates()


class TeacherTransportError(RuntimeError):
    """A backend could not produce any response (network/transport failure)."""


@dataclass(frozen=True)
class Instruction:
    """System prompt handed to a teacher backend."""

    text: str
    tag: str = "custom"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")
        if ANSWER_FORMAT_CLAUSE not in self.text:
            raise ValueError(f"instruction must pin the answer format {ANSWER_FORMAT_CLAUSE!r}")

    @classmethod
    def default(cls) -> "Instruction":
        return cls(text=_load_template("instruction_default.txt").strip(), tag="default")

    @classmethod
    def seed(cls) -> "Instruction":
        """Deliberately terse starting instruction for prompt optimization."""
        return cls(text=_load_template("instruction_seed.txt").strip(), tag="seed")


@dataclass
class TeacherResponse:
    """Raw answer text plus per-UE parsed tokens and action-token log-scores."""

    text: str
    action_tokens: tuple
    log_scores: tuple          # per UE: np.ndarray of 3 log-scores, or None
    transport_ok: bool = True


@dataclass
class TpmDecision:
    actions: list
    response: TeacherResponse | None
    transport_failed: bool = False


def build_ue_query(ue: int, count: int) -> str:
    """Buffer-status line for a (1-based) UE."""
    if ue < 1:
        raise ValueError("UE labels are 1-based")
    if count < 0:
        raise ValueError("buffer length must be >= 0")
    word = "packet" if count == 1 else "packets"
    return _QUERIES["ue"].format(ue=ue, count=count, packet_word=word)


def build_bs_query(bs_obs: int, num_ues: int) -> str:
    """Base-station status line plus the closing question."""
    if not 0 <= bs_obs <= num_ues + 1:
        raise ValueError(f"channel observation {bs_obs} outside [0, {num_ues + 1}]")
    if bs_obs == 0:
        line = _QUERIES["bs_idle"]
    elif bs_obs <= num_ues:
        line = _QUERIES["bs_decode"].format(ue=bs_obs)
    else:
        line = _QUERIES["bs_failure"]
    return f"{line} {_QUERIES['suffix']}"


def build_queries(state: EnvState) -> tuple:
    """(per-UE query list, base-station query) for an observation snapshot."""
    ue_queries = [build_ue_query(ue + 1, count) for ue, count in enumerate(state.ue_buffers)]
    return ue_queries, build_bs_query(state.bs_obs, state.num_ues)


def _find_action_token(text: str, ue: int) -> tuple:
    """(token, char offset of the token) for a 1-based UE, or (None, None)."""
    m = re.search(rf"UE\s*{ue}\s*:\s*Action\s*(\S+)", text)
    if not m:
        return None, None
    return m.group(1), m.start(1)


def parse_actions(response: "TeacherResponse | str", num_ues: int) -> list:
    """Per-UE actions parsed from the answer text.

    A UE whose line is missing, malformed, or names an unknown action stays
    silent. Only the first matching line per UE counts.
    """
    text = response if isinstance(response, str) else response.text
    actions = []
    for ue in range(1, num_ues + 1):
        token, _ = _find_action_token(text, ue)
        if token is not None and token.rstrip(".,;") in ("0", "1", "2"):
            actions.append(int(token.rstrip(".,;")))
        else:
            actions.append(Action.SILENT)
    return actions


def action_distribution(log_scores, temperature: float) -> np.ndarray:
    """Temperature softmax over three action-token log-scores.

    ``None`` (no scores available) maps to the uniform distribution. Computed
    in the log domain for numerical stability.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if log_scores is None:
        return np.full(3, 1.0 / 3.0)
    s = np.asarray(log_scores, dtype=float) / temperature
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def render_answer(actions) -> str:
    return "\n".join(f"UE {ue + 1}: Action {int(a)}" for ue, a in enumerate(actions))


def rule_policy(buffer_counts, decoded_ue) -> list:
    """Deterministic reference policy over observed buffer lengths.

    The (0-based) UE whose packet was just decoded discards it; among the
    remaining UEs the one with the longest non-empty buffer transmits (ties
    go to the lowest index); everyone else stays silent.
    """
    n = len(buffer_counts)
    actions = [Action.SILENT] * n
    discarding = None
    if decoded_ue is not None and 0 <= decoded_ue < n and buffer_counts[decoded_ue] > 0:
        actions[decoded_ue] = Action.DISCARD
        discarding = decoded_ue
    best = None
    for ue, count in enumerate(buffer_counts):
        if ue == discarding or count < 1:
            continue
        if best is None or count > buffer_counts[best]:
            best = ue
    if best is not None:
        actions[best] = Action.TRANSMIT
    return actions


_UE_QUERY_RE = re.compile(r"UE\s*(\d+)\s*has\s*(\d+)\s*packet")
_DECODE_RE = re.compile(r"decoded\s+Agent\s*(\d+)")


class ScriptedOracle:
    """Rule-policy backend that answers through the same text interface as a
    language model.

    ``confidence`` is the synthetic score mass placed on the chosen action
    (the rest splits evenly). With ``miss_rate > 0`` each answer line is
    independently garbled with that probability; the draw is derived from
    (seed, query text), so the backend stays a pure function of its inputs.
    """

    def __init__(self, confidence: float = 0.8, miss_rate: float = 0.0, seed: int = 0):
        if not (1.0 / 3.0) < confidence <= 1.0 - 1e-9:
            raise ValueError("confidence must lie in (1/3, 1)")
        if not 0.0 <= miss_rate < 1.0:
            raise ValueError("miss_rate must lie in [0, 1)")
        self.confidence = confidence
        self.miss_rate = miss_rate
        self.seed = seed

    def complete(self, instruction: Instruction, ue_queries, bs_query: str) -> TeacherResponse:
        del instruction  # the rule policy is instruction-agnostic
        counts = []
        for i, q in enumerate(ue_queries):
            m = _UE_QUERY_RE.search(q)
            if not m:
                raise ValueError(f"cannot parse buffer status from query {q!r}")
            counts.append(int(m.group(2)))
        m = _DECODE_RE.search(bs_query)
        decoded_ue = int(m.group(1)) - 1 if m else None
        actions = rule_policy(counts, decoded_ue)

        n = len(counts)
        if self.miss_rate > 0.0:
            digest = hashlib.sha256("\n".join([*ue_queries, bs_query]).encode("utf-8")).digest()
            key = int.from_bytes(digest[:8], "big")
            missed = substream(self.seed, "oracle-miss", key).random(n) < self.miss_rate
        else:
            missed = [False] * n

        lines, tokens, scores = [], [], []
        low = (1.0 - self.confidence) / 2.0
        for ue in range(n):
            if missed[ue]:
                lines.append(f"UE {ue + 1}: Action ?")
                tokens.append(None)
                scores.append(None)
            else:
                lines.append(f"UE {ue + 1}: Action {actions[ue]}")
                tokens.append(str(actions[ue]))
                row = np.full(3, low)
                row[actions[ue]] = self.confidence
                scores.append(np.log(row))
        return TeacherResponse(text="\n".join(lines), action_tokens=tuple(tokens),
                               log_scores=tuple(scores))

    def respond_to_state(self, instruction: Instruction, state: EnvState) -> TeacherResponse:
        ue_queries, bs_query = build_queries(state)
        return self.complete(instruction, ue_queries, bs_query)


@dataclass
class RemoteConfig:
    """Chat-completions endpoint description. The auth token is read from the
    environment variable named by ``token_env`` at request time."""

    base_url: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 128
    token_env: str = "MACLAB_API_TOKEN"
    request_logprobs: bool = True
    top_logprobs: int = 5
    timeout_s: float = 30.0


def _post_chat(cfg: RemoteConfig, messages: list, *, logprobs: bool, session=None) -> dict:
    payload = {
        "model": cfg.model,
        "messages": messages,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    }
    if logprobs:
        payload["logprobs"] = True
        payload["top_logprobs"] = cfg.top_logprobs
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    poster = session or requests
    try:
        resp = poster.post(url, json=payload, headers=headers, timeout=cfg.timeout_s)
    except requests.RequestException as exc:
        raise TeacherTransportError(f"chat request failed: {exc}") from exc
    if resp.status_code != 200:
        raise TeacherTransportError(f"chat request returned HTTP {resp.status_code}")
    return resp.json()


def response_from_chat_payload(payload: dict, num_ues: int) -> TeacherResponse:
    """Build a :class:`TeacherResponse` from a chat-completions payload,
    extracting top-candidate log-scores at each UE's action-token position
    when the payload carries token logprobs."""
    try:
        choice = payload["choices"][0]
        content = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        logger.warning("malformed chat payload; treating as empty answer")
        return TeacherResponse(text="", action_tokens=(None,) * num_ues,
                               log_scores=(None,) * num_ues)

    token_infos = None
    logprobs = choice.get("logprobs") if isinstance(choice, dict) else None
    if isinstance(logprobs, dict):
        token_infos = logprobs.get("content")

    spans = []
    if token_infos:
        pos = 0
        for info in token_infos:
            tok = info.get("token", "")
            spans.append((pos, pos + len(tok), info))
            pos += len(tok)

    tokens, scores = [], []
    for ue in range(1, num_ues + 1):
        token, offset = _find_action_token(content, ue)
        tokens.append(token)
        row = None
        if token is not None and spans:
            info = next((i for s, e, i in spans if s <= offset < e), None)
            if info is not None:
                top = {str(t.get("token", "")).strip(): float(t.get("logprob"))
                       for t in info.get("top_logprobs", []) if t.get("logprob") is not None}
                vals = [top.get(str(d)) for d in range(3)]
                present = [v for v in vals if v is not None]
                if present:
                    floor = min(present) - 5.0
                    row = np.array([v if v is not None else floor for v in vals])
        scores.append(row)
    return TeacherResponse(text=content, action_tokens=tuple(tokens), log_scores=tuple(scores))


class RemoteBackend:
    """Teacher backend talking to an OpenAI-style chat-completions endpoint."""

    def __init__(self, cfg: RemoteConfig, session=None):
        self.cfg = cfg
        self._session = session

    def complete(self, instruction: Instruction, ue_queries, bs_query: str) -> TeacherResponse:
        user = "\n".join([*ue_queries, bs_query])
        messages = [
            {"role": "system", "content": instruction.text},
            {"role": "user", "content": user},
        ]
        payload = _post_chat(self.cfg, messages, logprobs=self.cfg.request_logprobs,
                             session=self._session)
        return response_from_chat_payload(payload, num_ues=len(ue_queries))


def _request_key(instruction_text: str, ue_queries, bs_query: str) -> str:
    blob = json.dumps(
        {"instruction": instruction_text, "ue_queries": list(ue_queries), "bs_query": bs_query},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class FixtureBackend:
    """Replays recorded responses; raises ``KeyError`` on an unseen request."""

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        self._records = {rec["key"]: rec["response"] for rec in data["records"]}

    def complete(self, instruction: Instruction, ue_queries, bs_query: str) -> TeacherResponse:
        key = _request_key(instruction.text, ue_queries, bs_query)
        if key not in self._records:
            raise KeyError(f"no recorded response for request {key[:12]}...")
        rec = self._records[key]
        scores = tuple(np.array(s) if s is not None else None for s in rec["log_scores"])
        return TeacherResponse(
            text=rec["text"],
            action_tokens=tuple(rec["action_tokens"]),
            log_scores=scores,
        )


class RecordingBackend:
    """Wraps a live backend and accumulates replayable fixture records."""

    def __init__(self, inner):
        self.inner = inner
        self.records = []

    def complete(self, instruction: Instruction, ue_queries, bs_query: str) -> TeacherResponse:
        resp = self.inner.complete(instruction, ue_queries, bs_query)
        self.records.append({
            "key": _request_key(instruction.text, ue_queries, bs_query),
            "request": {"instruction": instruction.text, "ue_queries": list(ue_queries),
                        "bs_query": bs_query},
            "response": {
                "text": resp.text,
                "action_tokens": list(resp.action_tokens),
                "log_scores": [None if s is None else [float(x) for x in s]
                               for s in resp.log_scores],
            },
        })
        return resp

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"version": 1, "records": self.records}, fh, indent=1)


def tpm_step(state: EnvState, backend, instruction: Instruction) -> TpmDecision:
    """One language-driven decision: render queries, ask, parse.

    A transport failure yields an all-silent joint action with the failure
    flagged, never an exception.
    """
    ue_queries, bs_query = build_queries(state)
    try:
        response = backend.complete(instruction, ue_queries, bs_query)
    except TeacherTransportError as exc:
        logger.warning("teacher transport failure, staying silent: %s", exc)
        return TpmDecision(actions=[Action.SILENT] * state.num_ues, response=None,
                           transport_failed=True)
    return TpmDecision(actions=parse_actions(response, state.num_ues), response=response)


def run_tpm_episode(
    sim: ChannelSim,
    backend,
    instruction: Instruction,
    ttis: int,
    *,
    arrivals_rng: np.random.Generator,
    erasures_rng: np.random.Generator,
) -> list:
    """Roll ``ttis`` slots under the language-driven policy; returns success flags."""
    sim.reset()
    flags = []
    for _ in range(ttis):
        sim.step_arrivals(arrivals_rng)
        decision = tpm_step(sim.observe(), backend, instruction)
        slot = sim.apply_actions(decision.actions, erasures_rng)
        flags.append(slot.success)
    return flags
