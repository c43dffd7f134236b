import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import rankdata

from maclab.env import RewardConfig, SimConfig
from maclab.npm import NetworkShape, init_params
from maclab.rng import substream
from maclab.switch import (
    MEASURE_WINDOW,
    SwitchConfig,
    SwitchState,
    mann_whitney_one_sided,
    measure_goodput,
    pool_measurements,
    run_t3npm,
    should_switch,
)
from maclab.train import TrainConfig


# --- independent oracle -----------------------------------------------------
# Permutation-test definition: enumerate every way to assign the pooled values
# to the second group and count rank sums at least as large as the observed one.

def oracle_mwu(a, b):
    pooled = np.concatenate([np.asarray(a, float), np.asarray(b, float)])
    ranks = rankdata(pooled, method="average")
    n1, n2 = len(a), len(b)
    r_b = ranks[n1:].sum()
    u = r_b - n2 * (n2 + 1) / 2.0
    count = 0
    total = 0
    for combo in itertools.combinations(range(n1 + n2), n2):
        total += 1
        if ranks[list(combo)].sum() >= r_b - 1e-9:
            count += 1
    return u, count / total


class TestMannWhitney:
    def test_clean_separation_hand_case(self):
        u, p = mann_whitney_one_sided([1, 2, 3], [4, 5, 6])
        assert u == 9.0
        assert p == pytest.approx(1 / 20, abs=1e-15)

    def test_reversed_separation(self):
        u, p = mann_whitney_one_sided([4, 5, 6], [1, 2, 3])
        assert u == 0.0
        assert p == pytest.approx(1.0, abs=1e-15)

    def test_identical_multisets_never_switch(self):
        _, p = mann_whitney_one_sided([1, 2, 3], [1, 2, 3])
        assert p >= 0.5

    def test_all_ties(self):
        u, p = mann_whitney_one_sided([5, 5], [5, 5, 5])
        assert u == pytest.approx(2 * 3 / 2)
        assert p == pytest.approx(1.0)

    def test_exact_matches_enumeration_small_grids(self):
        rng = np.random.default_rng(42)
        for n1 in (1, 2, 3, 5):
            for n2 in (1, 2, 4):
                for _ in range(4):
                    a = rng.integers(0, 6, size=n1).astype(float)
                    b = rng.integers(0, 6, size=n2).astype(float)
                    u, p = mann_whitney_one_sided(a, b, method="exact")
                    u_ref, p_ref = oracle_mwu(a, b)
                    assert u == pytest.approx(u_ref, abs=1e-12)
                    assert p == pytest.approx(p_ref, abs=1e-12)

    def test_auto_uses_exact_path_at_pool_sizes(self):
        # 12 vs 12 samples sits inside the exact-path budget (144 <= 400).
        rng = np.random.default_rng(3)
        a = rng.random(12)
        b = rng.random(12) + 0.1
        auto = mann_whitney_one_sided(a, b, method="auto")
        exact = mann_whitney_one_sided(a, b, method="exact")
        assert auto == exact

    def test_approx_close_to_exact_mid_sizes(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            n1 = int(rng.integers(8, 13))
            n2 = int(rng.integers(8, 13))
            a = rng.normal(size=n1)
            b = rng.normal(loc=rng.uniform(-1, 1), size=n2)
            _, p_exact = mann_whitney_one_sided(a, b, method="exact")
            _, p_approx = mann_whitney_one_sided(a, b, method="approx")
            worst = max(worst, abs(p_exact - p_approx))
        assert worst < 0.02

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_one_sided([], [1.0])
        with pytest.raises(ValueError):
            mann_whitney_one_sided([1.0], [])

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            mann_whitney_one_sided([1.0], [2.0], method="bootstrap")

    @given(st.lists(st.integers(0, 8), min_size=1, max_size=6),
           st.lists(st.integers(0, 8), min_size=1, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_exact_property_vs_enumeration(self, a, b):
        u, p = mann_whitney_one_sided(a, b, method="exact")
        u_ref, p_ref = oracle_mwu(a, b)
        assert u == pytest.approx(u_ref, abs=1e-12)
        assert p == pytest.approx(p_ref, abs=1e-12)

    def test_u_complement_identity(self):
        # U_b + U_a = n1 * n2 for any tie pattern.
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = rng.integers(0, 4, size=5).astype(float)
            b = rng.integers(0, 4, size=7).astype(float)
            u_b, _ = mann_whitney_one_sided(a, b)
            u_a, _ = mann_whitney_one_sided(b, a)
            assert u_a + u_b == pytest.approx(35.0)


class TestShouldSwitch:
    def test_strict_inequality(self):
        assert should_switch(0.049, 0.05)
        assert not should_switch(0.05, 0.05)
        assert not should_switch(0.8, 0.05)

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            should_switch(0.01, 0.0)
        with pytest.raises(ValueError):
            should_switch(0.01, 1.0)


class TestSwitchConfig:
    def test_pooling_depth(self):
        assert SwitchConfig(t_m=24).k == 5
        assert SwitchConfig(t_m=48).k == 2
        assert SwitchConfig(t_m=144).k == 0
        assert SwitchConfig(t_m=60).k == 2

    def test_k_undefined_without_measurement(self):
        with pytest.raises(ValueError):
            SwitchConfig(t_m=0).k

    def test_window_multiple_enforced(self):
        with pytest.raises(ValueError):
            SwitchConfig(t_m=10)
        with pytest.raises(ValueError):
            SwitchConfig(t_m=-12)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            SwitchConfig(alpha=0.0)

    def test_total_budget_validation(self):
        with pytest.raises(ValueError):
            SwitchConfig(total_measure_ttis=30)


class TestSwitchState:
    def test_ring_capacity_and_pooling_order(self):
        state = SwitchState(k=2)
        for i in range(5):
            state.record([float(i)] * 2)
        assert state.full
        # Ring keeps the last 3 episodes; pooled newest first.
        assert pool_measurements(state.ring, 2) == [4.0, 4.0, 3.0, 3.0, 2.0, 2.0]

    def test_pool_requires_full_ring(self):
        state = SwitchState(k=3)
        state.record([1.0])
        with pytest.raises(ValueError):
            pool_measurements(state.ring, 3)

    def test_latch_is_permanent(self):
        state = SwitchState(k=1)
        state.latch(7)
        state.latch(9)
        assert state.switched and state.switch_episode == 7

    def test_no_measurement_after_switch(self):
        state = SwitchState(k=1)
        state.latch(0)
        with pytest.raises(ValueError):
            state.record([0.5])


class TestMeasureGoodput:
    def _params(self):
        return init_params(NetworkShape(ue_hidden=(4,), bs_hidden=(4,), head_hidden=(4,)),
                           2, 3, substream(0, "init"))

    def test_sample_count_and_range(self):
        cfg = SimConfig(num_ues=2)
        samples = measure_goodput(self._params(), cfg, 36,
                                  arrivals_rng=substream(0, "measure-arrivals", 0),
                                  erasures_rng=substream(0, "measure-erasures", 0))
        assert len(samples) == 3
        assert all(0.0 <= s <= 1.0 for s in samples)

    def test_zero_window_yields_nothing(self):
        samples = measure_goodput(self._params(), SimConfig(num_ues=2), 0,
                                  arrivals_rng=substream(0, "x"), erasures_rng=substream(0, "y"))
        assert samples == []

    def test_window_multiple_enforced(self):
        with pytest.raises(ValueError):
            measure_goodput(self._params(), SimConfig(num_ues=2), 18,
                            arrivals_rng=substream(0, "x"), erasures_rng=substream(0, "y"))

    def test_deterministic_given_streams(self):
        cfg = SimConfig(num_ues=2)
        p = self._params()
        one = measure_goodput(p, cfg, 24, arrivals_rng=substream(5, "measure-arrivals", 1),
                              erasures_rng=substream(5, "measure-erasures", 1))
        two = measure_goodput(p, cfg, 24, arrivals_rng=substream(5, "measure-arrivals", 1),
                              erasures_rng=substream(5, "measure-erasures", 1))
        assert one == two


class TestRunValidation:
    def _params(self, num_ues=2):
        return init_params(NetworkShape(ue_hidden=(4,), bs_hidden=(4,), head_hidden=(4,)),
                           num_ues, 3, substream(0, "init"))

    def test_measurement_without_teacher_rejected(self):
        with pytest.raises(ValueError):
            run_t3npm(SimConfig(num_ues=2), self._params(), None, None,
                      train_cfg=TrainConfig(), reward_cfg=RewardConfig(),
                      switch_cfg=SwitchConfig(t_m=24), seed=0, episodes=1)

    def test_window_longer_than_episode_rejected(self):
        cfg = SimConfig(num_ues=2, tti_per_episode=144)
        with pytest.raises(ValueError):
            run_t3npm(cfg, self._params(), None, None,
                      train_cfg=TrainConfig(), reward_cfg=RewardConfig(),
                      switch_cfg=SwitchConfig(t_m=156), seed=0, episodes=1)
