import numpy as np
import pytest

from logkv.policies import (
    PolicyConfig,
    SelectionState,
    config_for_budget,
    h2o_append,
    h2o_select,
    kivi_append,
    logquant_append,
    policy_append,
    streaming_append,
    update_h2o_scores,
)


def run_logquant(positions, w):
    state = SelectionState()
    releases = {}
    for pos in positions:
        _, rel = logquant_append(state, pos, w)
        if rel:
            releases[pos] = rel
    return state, releases


class TestLogQuant:
    def test_hand_trace_w2(self):
        state, releases = run_logquant(range(10), 2)
        assert state.kept == [0, 4, 6, 7, 8, 9]
        assert releases[6] == [1, 3]
        assert releases[8] == [2, 5]

    def test_intermediate_states_w2(self):
        state = SelectionState()
        snapshots = {}
        for pos in range(10):
            logquant_append(state, pos, 2)
            snapshots[pos] = list(state.kept)
        assert snapshots[5] == [0, 1, 2, 3, 4, 5]  # below 3W: no release
        assert snapshots[6] == [0, 2, 4, 5, 6]
        assert snapshots[8] == [0, 4, 6, 7, 8]

    def test_occupancy_band(self):
        for w in (1, 2, 5, 16):
            state = SelectionState()
            for pos in range(40 * w):
                logquant_append(state, pos, w)
                assert 1 <= len(state.kept) <= 3 * w
                if pos + 1 >= 3 * w:
                    assert 2 * w <= len(state.kept) <= 3 * w

    def test_decimation_keeps_even_indices(self):
        state = SelectionState()
        for pos in range(12):
            logquant_append(state, pos, 4)
        kept_before = list(state.kept)
        _, released = logquant_append(state, 12, 4)
        assert released == kept_before[1:8:2]
        assert state.kept == kept_before[0:8:2] + kept_before[8:12] + [12]

    def test_gaps_nondecreasing_backward(self):
        # After each decimation the spacing between surviving positions must
        # grow (weakly) with distance from the newest token.
        state = SelectionState()
        for pos in range(3000):
            _, released = logquant_append(state, pos, 8)
            if released and pos > 100:
                gaps = np.diff(state.kept)
                assert (np.diff(gaps) <= 0).all(), state.kept

    def test_monotonic_positions_required(self):
        state = SelectionState()
        logquant_append(state, 5, 2)
        with pytest.raises(ValueError, match="strictly increasing"):
            logquant_append(state, 5, 2)


class TestKivi:
    def test_sliding_window(self):
        state = SelectionState()
        for pos in range(6):
            kivi_append(state, pos, 4)
        assert state.kept == [2, 3, 4, 5]
        assert state.all_released() == [0, 1]

    def test_long_run_occupancy(self):
        state = SelectionState()
        for pos in range(600):
            kivi_append(state, pos, 128)
        assert len(state.kept) == 128

    def test_batched_release(self):
        state = SelectionState()
        events = {}
        for pos in range(6):
            _, rel = kivi_append(state, pos, 4, release_batch=2)
            if rel:
                events[pos] = rel
        assert events == {5: [0, 1]}
        assert state.kept == [2, 3, 4, 5]

    def test_batched_occupancy_band(self):
        state = SelectionState()
        for pos in range(200):
            kivi_append(state, pos, 16, release_batch=4)
            if pos >= 16:
                assert 16 <= len(state.kept) <= 19


class TestStreaming:
    def test_hand_trace(self):
        state = SelectionState()
        for pos in range(10):
            streaming_append(state, pos, 6, sink_count=4)
        assert state.kept == [0, 1, 2, 3, 8, 9]

    def test_under_budget_keeps_all(self):
        state = SelectionState()
        for pos in range(4):
            streaming_append(state, pos, 6, sink_count=4)
        assert state.kept == [0, 1, 2, 3]

    def test_zero_sinks_equals_kivi(self):
        rng = np.random.default_rng(0)
        for batch in (None, 3):
            a, b = SelectionState(), SelectionState()
            pos = 0
            for _ in range(300):
                pos += int(rng.integers(1, 3))
                _, rel_a = streaming_append(a, pos, 7, sink_count=0, release_batch=batch)
                _, rel_b = kivi_append(b, pos, 7, release_batch=batch)
                assert rel_a == rel_b
            assert a.kept == b.kept
            assert a.released_log == b.released_log

    def test_budget_must_exceed_sinks(self):
        state = SelectionState()
        with pytest.raises(ValueError, match="exceed sink_count"):
            streaming_append(state, 0, 4, sink_count=4)


class TestH2O:
    def test_select_top_by_score(self):
        assert h2o_select({0: 9, 1: 1, 2: 1, 3: 5}, budget=2) == [0, 3]

    def test_tie_break_recent(self):
        scores = {p: 1.0 for p in range(6)}
        assert h2o_select(scores, budget=3) == [3, 4, 5]

    def test_budget_covers_all(self):
        assert h2o_select({0: 1, 1: 2}, budget=5) == [0, 1]

    def test_recent_window_pinned(self):
        scores = {0: 9, 1: 8, 2: 0, 3: 0}
        assert h2o_select(scores, budget=3, recent_window=2) == [0, 2, 3]

    def test_budget_below_recent_window(self):
        with pytest.raises(ValueError):
            h2o_select({0: 1}, budget=1, recent_window=2)

    def test_score_accumulation(self):
        state = SelectionState()
        h2o_append(state, 0, 10)
        h2o_append(state, 1, 10)
        update_h2o_scores(state, [0.5, 0.5])
        assert state.h2o_scores == {0: 0.5, 1: 0.5}
        h2o_append(state, 2, 10)
        update_h2o_scores(state, [1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(
            [state.h2o_scores[p] for p in (0, 1, 2)],
            [0.5 + 1 / 3, 0.5 + 1 / 3, 1 / 3])

    def test_eviction_drops_score(self):
        state = SelectionState()
        for pos in range(3):
            h2o_append(state, pos, 3)
        update_h2o_scores(state, [0.2, 0.5, 0.3])
        _, released = h2o_append(state, 3, 3)
        assert released == [3]  # fresh token has the lowest score
        state2 = SelectionState()
        for pos in range(3):
            h2o_append(state2, pos, 3)
        update_h2o_scores(state2, [0.1, 0.5, 0.4])
        update_h2o_scores(state2, [0.6, 0.2, 0.2])
        _, released = h2o_append(state2, 3, 3, recent_window=1)
        assert released == [2]  # lowest cumulative score among non-recent
        assert 2 not in state2.h2o_scores
        assert state2.kept == [0, 1, 3]

    def test_length_mismatch(self):
        state = SelectionState()
        h2o_append(state, 0, 4)
        with pytest.raises(ValueError, match="length mismatch"):
            update_h2o_scores(state, [0.5, 0.5])


class TestInvariants:
    @pytest.mark.parametrize("kind,kwargs", [
        ("logquant", {}),
        ("kivi", {}),
        ("kivi", {"release_batch": 5}),
        ("streaming_llm", {}),
        ("h2o", {}),
        ("h2o", {"recent_window": 3}),
    ])
    def test_conservation_no_loss_no_duplication(self, kind, kwargs):
        cfg = config_for_budget(kind, 12, **kwargs)
        state = SelectionState()
        rng = np.random.default_rng(hash(kind) % 2**32)
        appended = []
        for pos in range(250):
            policy_append(cfg, state, pos)
            appended.append(pos)
            if kind == "h2o":
                update_h2o_scores(state, rng.dirichlet(np.ones(len(state.kept))))
        released = state.all_released()
        assert sorted(state.kept + released) == appended
        assert len(set(released)) == len(released)
        assert state.kept == sorted(state.kept)

    def test_positions_never_reappear(self):
        cfg = config_for_budget("logquant", 9)
        state = SelectionState()
        seen_released = set()
        for pos in range(500):
            policy_append(cfg, state, pos)
            newly = set(state.all_released()) - seen_released
            assert not (newly & set(state.kept))
            seen_released |= newly
            assert not (seen_released & set(state.kept))

    def test_determinism(self):
        for kind in ("logquant", "kivi", "streaming_llm"):
            cfg = config_for_budget(kind, 9)
            runs = []
            for _ in range(2):
                state = SelectionState()
                log = []
                for pos in range(200):
                    log.append(tuple(policy_append(cfg, state, pos)))
                runs.append((log, state.kept))
            assert runs[0] == runs[1]


class TestConfig:
    def test_budget_derivation(self):
        cfg = config_for_budget("logquant", 128)
        assert cfg.window == 42 and cfg.fp_budget == 126
        cfg = config_for_budget("kivi", 128)
        assert cfg.fp_budget == 128
        cfg = config_for_budget("streaming_llm", 128)
        assert cfg.sink_count == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            config_for_budget("logquant", 2)
        with pytest.raises(ValueError):
            PolicyConfig("kivi", 0)
        with pytest.raises(ValueError):
            PolicyConfig("kivi", 4, sink_count=4)
        with pytest.raises(ValueError):
            PolicyConfig("nope", 4)
        with pytest.raises(ValueError):
            PolicyConfig("kivi", 4, mode="drop_rest")
