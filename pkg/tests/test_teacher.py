import numpy as np
import pytest

from maclab.env import Action, ChannelSim, EnvState, SimConfig
from maclab.rng import substream
from maclab.teacher import (
    ANSWER_FORMAT_CLAUSE,
    FixtureBackend,
    Instruction,
    RecordingBackend,
    ScriptedOracle,
    TeacherTransportError,
    action_distribution,
    build_bs_query,
    build_queries,
    build_ue_query,
    parse_actions,
    render_answer,
    response_from_chat_payload,
    rule_policy,
    run_tpm_episode,
    tpm_step,
)


class TestQueries:
    def test_ue_query_wording(self):
        assert build_ue_query(1, 1) == "UE 1 has 1 packet in the buffer."
        assert build_ue_query(2, 0) == "UE 2 has 0 packets in the buffer."
        assert build_ue_query(3, 4) == "UE 3 has 4 packets in the buffer."

    def test_ue_query_validation(self):
        with pytest.raises(ValueError):
            build_ue_query(0, 1)
        with pytest.raises(ValueError):
            build_ue_query(1, -1)

    def test_bs_query_branches(self):
        idle = build_bs_query(0, 2)
        decode = build_bs_query(2, 2)
        failure = build_bs_query(3, 2)
        assert idle.startswith("BS received no packet")
        assert "decoded Agent 2" in decode
        assert failure.startswith("BS failed to decode")
        for q in (idle, decode, failure):
            assert q.endswith("Which action should each UE choose right now?")

    def test_bs_query_range(self):
        with pytest.raises(ValueError):
            build_bs_query(4, 2)

    def test_build_queries_assembles_state(self):
        ue_queries, bs_query = build_queries(EnvState((2, 0, 1), 1))
        assert len(ue_queries) == 3
        assert ue_queries[0] == "UE 1 has 2 packets in the buffer."
        assert "decoded Agent 1" in bs_query


class TestParseActions:
    def test_well_formed(self):
        text = "UE 1: Action 1\nUE 2: Action 0\nUE 3: Action 2"
        assert parse_actions(text, 3) == [1, 0, 2]

    def test_missing_line_stays_silent(self):
        assert parse_actions("UE 2: Action 1", 2) == [Action.SILENT, 1]

    def test_unknown_token_stays_silent(self):
        assert parse_actions("UE 1: Action ?\nUE 2: Action 9", 2) == [0, 0]

    def test_trailing_punctuation_tolerated(self):
        assert parse_actions("UE 1: Action 2.\nUE 2: Action 1,", 2) == [2, 1]

    def test_first_match_wins(self):
        assert parse_actions("UE 1: Action 1\nUE 1: Action 2", 1) == [1]

    def test_loose_spacing(self):
        assert parse_actions("UE  1 :  Action  2", 1) == [2]

    def test_render_answer_round_trip(self):
        actions = [0, 2, 1]
        assert parse_actions(render_answer(actions), 3) == actions


class TestActionDistribution:
    def test_none_maps_to_uniform(self):
        np.testing.assert_allclose(action_distribution(None, 2.0), 1 / 3)

    def test_softmax_normalises(self):
        row = action_distribution(np.log([0.8, 0.1, 0.1]), 1.0)
        np.testing.assert_allclose(row, [0.8, 0.1, 0.1], rtol=1e-12)

    def test_temperature_flattens(self):
        sharp = action_distribution(np.array([4.0, 0.0, 0.0]), 1.0)
        flat = action_distribution(np.array([4.0, 0.0, 0.0]), 10.0)
        assert sharp[0] > flat[0] > 1 / 3

    def test_validation(self):
        with pytest.raises(ValueError):
            action_distribution(np.zeros(3), 0.0)


class TestRulePolicy:
    def test_longest_queue_transmits(self):
        assert rule_policy([1, 3, 2], None) == [0, 1, 0]

    def test_tie_goes_to_lowest_index(self):
        assert rule_policy([2, 2], None) == [1, 0]

    def test_decoded_ue_discards_and_is_excluded(self):
        assert rule_policy([3, 1], 0) == [Action.DISCARD, Action.TRANSMIT]

    def test_decoded_ue_with_empty_buffer_does_nothing(self):
        assert rule_policy([0, 1], 0) == [0, 1]

    def test_all_empty(self):
        assert rule_policy([0, 0, 0], None) == [0, 0, 0]

    def test_out_of_range_decode_ignored(self):
        assert rule_policy([1, 1], 5) == [1, 0]


class TestScriptedOracle:
    def test_answers_follow_rule_policy(self):
        oracle = ScriptedOracle(confidence=0.8, miss_rate=0.0)
        state = EnvState((1, 3), 0)
        resp = oracle.respond_to_state(Instruction.default(), state)
        assert parse_actions(resp, 2) == rule_policy([1, 3], None)

    def test_decode_line_reaches_policy(self):
        oracle = ScriptedOracle(miss_rate=0.0)
        resp = oracle.respond_to_state(Instruction.default(), EnvState((2, 2), 1))
        assert parse_actions(resp, 2) == [Action.DISCARD, Action.TRANSMIT]

    def test_confidence_mass_on_chosen_token(self):
        oracle = ScriptedOracle(confidence=0.8, miss_rate=0.0)
        resp = oracle.respond_to_state(Instruction.default(), EnvState((0, 2), 0))
        probs = np.exp(resp.log_scores[1])
        np.testing.assert_allclose(probs, [0.1, 0.8, 0.1], rtol=1e-12)

    def test_pure_function_of_inputs(self):
        oracle = ScriptedOracle(confidence=0.8, miss_rate=0.5, seed=3)
        state = EnvState((2, 1), 2)
        a = oracle.respond_to_state(Instruction.default(), state)
        b = oracle.respond_to_state(Instruction.default(), state)
        assert a.text == b.text

    def test_miss_rate_garbles_lines_persistently(self):
        oracle = ScriptedOracle(miss_rate=0.95, seed=0)
        resp = oracle.respond_to_state(Instruction.default(), EnvState((1, 1), 0))
        assert any(tok is None for tok in resp.action_tokens)
        garbled = [ue for ue, tok in enumerate(resp.action_tokens) if tok is None]
        assert all(resp.log_scores[ue] is None for ue in garbled)
        assert all("Action ?" in line
                   for ue, line in enumerate(resp.text.splitlines()) if ue in garbled)

    def test_miss_patterns_vary_across_states(self):
        oracle = ScriptedOracle(miss_rate=0.5, seed=1)
        patterns = set()
        for cnt in range(4):
            resp = oracle.respond_to_state(Instruction.default(), EnvState((cnt, 1), 0))
            patterns.add(tuple(tok is None for tok in resp.action_tokens))
        assert len(patterns) > 1

    def test_validation(self):
        with pytest.raises(ValueError):
            ScriptedOracle(confidence=0.2)
        with pytest.raises(ValueError):
            ScriptedOracle(confidence=1.0)
        with pytest.raises(ValueError):
            ScriptedOracle(miss_rate=1.0)


class TestInstruction:
    def test_default_pins_answer_format(self):
        inst = Instruction.default()
        assert ANSWER_FORMAT_CLAUSE in inst.text
        assert inst.tag == "default"

    def test_seed_is_terse_variant(self):
        seed = Instruction.seed()
        assert ANSWER_FORMAT_CLAUSE in seed.text
        assert len(seed.text) < len(Instruction.default().text)

    def test_rejects_missing_format_clause(self):
        with pytest.raises(ValueError):
            Instruction(text="Do whatever seems best.")

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Instruction(text="   ")


def chat_payload(content, token_rows=None):
    """Minimal chat-completions payload; token_rows maps action-token text to
    top-logprob alternatives."""
    choice = {"message": {"content": content}}
    if token_rows is not None:
        infos = []
        for tok, top in token_rows:
            infos.append({"token": tok,
                          "top_logprobs": [{"token": t, "logprob": lp} for t, lp in top]})
        choice["logprobs"] = {"content": infos}
    return {"choices": [choice]}


class TestChatPayloadParsing:
    def test_tokens_without_logprobs(self):
        resp = response_from_chat_payload(chat_payload("UE 1: Action 1\nUE 2: Action 0"), 2)
        assert resp.action_tokens == ("1", "0")
        assert resp.log_scores == (None, None)

    def test_logprob_rows_extracted_at_token_positions(self):
        content = "UE 1: Action 1"
        rows = [("UE", []), (" 1", []), (":", []), (" Action", []),
                (" 1", [("1", -0.1), ("0", -2.3)])]
        resp = response_from_chat_payload(chat_payload(content, rows), 1)
        assert resp.action_tokens == ("1",)
        got = resp.log_scores[0]
        assert got[1] == pytest.approx(-0.1)
        assert got[0] == pytest.approx(-2.3)
        # Digit 2 was absent: floored five nats under the lowest present score.
        assert got[2] == pytest.approx(-2.3 - 5.0)

    def test_malformed_payload_degrades_to_empty(self):
        resp = response_from_chat_payload({"oops": []}, 2)
        assert resp.text == ""
        assert resp.action_tokens == (None, None)
        assert resp.log_scores == (None, None)


class TestFixtureRecording:
    def test_round_trip_replay(self, tmp_path):
        inner = ScriptedOracle(confidence=0.8, miss_rate=0.3, seed=7)
        recorder = RecordingBackend(inner)
        inst = Instruction.default()
        states = [EnvState((1, 2), 0), EnvState((0, 3), 2), EnvState((2, 2), 3)]
        want = []
        for s in states:
            q_ue, q_bs = build_queries(s)
            want.append(recorder.complete(inst, q_ue, q_bs))
        path = tmp_path / "fixture.json"
        recorder.save(path)

        replay = FixtureBackend(path)
        for s, expected in zip(states, want):
            q_ue, q_bs = build_queries(s)
            got = replay.complete(inst, q_ue, q_bs)
            assert got.text == expected.text
            assert got.action_tokens == expected.action_tokens
            for g, e in zip(got.log_scores, expected.log_scores):
                if e is None:
                    assert g is None
                else:
                    np.testing.assert_allclose(g, e, rtol=1e-12)

    def test_unseen_request_raises(self, tmp_path):
        recorder = RecordingBackend(ScriptedOracle())
        recorder.save(tmp_path / "empty.json")
        replay = FixtureBackend(tmp_path / "empty.json")
        with pytest.raises(KeyError):
            replay.complete(Instruction.default(), ["UE 1 has 1 packet in the buffer."],
                            build_bs_query(0, 1))


class _FailingBackend:
    def complete(self, instruction, ue_queries, bs_query):
        raise TeacherTransportError("connection refused")


class TestTpmStep:
    def test_normal_path(self):
        decision = tpm_step(EnvState((1, 2), 0), ScriptedOracle(miss_rate=0.0),
                            Instruction.default())
        assert decision.actions == [0, 1]
        assert not decision.transport_failed

    def test_transport_failure_goes_silent(self):
        decision = tpm_step(EnvState((1, 2), 0), _FailingBackend(), Instruction.default())
        assert decision.actions == [Action.SILENT, Action.SILENT]
        assert decision.transport_failed
        assert decision.response is None


class TestTpmEpisode:
    def test_flags_and_determinism(self):
        cfg = SimConfig(num_ues=2)
        backend = ScriptedOracle(miss_rate=0.0)
        inst = Instruction.default()

        def roll():
            sim = ChannelSim(cfg)
            return run_tpm_episode(sim, backend, inst, 48,
                                   arrivals_rng=substream(0, "test-arrivals", 0),
                                   erasures_rng=substream(0, "test-erasures", 0))

        flags = roll()
        assert len(flags) == 48
        assert roll() == flags

    def test_perfect_oracle_beats_idle(self):
        cfg = SimConfig(num_ues=2)
        sim = ChannelSim(cfg)
        flags = run_tpm_episode(sim, ScriptedOracle(miss_rate=0.0), Instruction.default(), 144,
                                arrivals_rng=substream(1, "test-arrivals", 0),
                                erasures_rng=substream(1, "test-erasures", 0))
        assert np.mean(flags) > 0.4
