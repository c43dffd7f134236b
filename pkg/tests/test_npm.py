import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maclab.env import EnvState
from maclab.npm import (
    NUM_ACTIONS,
    NetworkShape,
    UeCountMismatch,
    encode_bs_obs,
    encode_ue_obs,
    expand_for_ue_count,
    forward_batch,
    greedy_actions,
    init_params,
    load_params,
    param_count,
    pipeline_backward,
    pipeline_forward,
    save_params,
    select_action,
    shrink_for_ue_count,
    zero_grads,
)
from maclab.rng import substream


# --- independent oracle -----------------------------------------------------
# A from-scratch scalar re-implementation of the three-stage pipeline. Kept
# deliberately loop-based and separate from the library code.

def oracle_forward(params, counts, obs):
    def mlp(stack, x):
        h = np.asarray(x, dtype=float)
        for i, (w, b) in enumerate(stack):
            z = h @ w + b
            if i < len(stack) - 1:
                z = np.tanh(z)
            h = z
        return h

    messages = []
    for ue in range(params.num_ues):
        cap = params.ue_caps[ue]
        onehot = np.zeros(cap + 1)
        onehot[min(max(int(counts[ue]), 0), cap)] = 1.0
        messages.append(mlp(params.ue_nets[ue], onehot))
    bs_onehot = np.zeros(params.num_ues + 2)
    bs_onehot[min(max(int(obs), 0), params.num_ues + 1)] = 1.0
    bs_in = np.concatenate([*messages, bs_onehot])
    d_all = mlp(params.bs_net, bs_in)
    dcm = params.shape.dcm_dim
    q = []
    for ue in range(params.num_ues):
        q.append(mlp(params.head_nets[ue], d_all[ue * dcm:(ue + 1) * dcm]))
    return np.stack(q)


def random_state(rng, num_ues, cap):
    counts = [int(rng.integers(0, cap + 1)) for _ in range(num_ues)]
    obs = int(rng.integers(0, num_ues + 2))
    return counts, obs


class TestForward:
    def test_matches_independent_reimplementation(self, tiny_params):
        rng = np.random.default_rng(5)
        for _ in range(25):
            counts, obs = random_state(rng, 2, 3)
            q, _ = pipeline_forward(tiny_params, EnvState(tuple(counts), obs))
            expected = oracle_forward(tiny_params, counts, obs)
            np.testing.assert_allclose(q, expected, rtol=1e-12, atol=1e-12)

    def test_matches_oracle_on_larger_nets(self):
        params = init_params(NetworkShape(), 3, 4, substream(9, "init"))
        rng = np.random.default_rng(6)
        for _ in range(10):
            counts, obs = random_state(rng, 3, 4)
            q, _ = pipeline_forward(params, EnvState(tuple(counts), obs))
            np.testing.assert_allclose(q, oracle_forward(params, counts, obs),
                                       rtol=1e-12, atol=1e-12)

    def test_batch_equals_loop(self, tiny_params):
        rng = np.random.default_rng(7)
        states = [random_state(rng, 2, 3) for _ in range(8)]
        counts = np.array([s[0] for s in states])
        obs = np.array([s[1] for s in states])
        q_batch, _ = forward_batch(tiny_params, counts, obs)
        for i, (c, o) in enumerate(states):
            q_single, _ = pipeline_forward(tiny_params, EnvState(tuple(c), o))
            np.testing.assert_allclose(q_batch[i], q_single, rtol=1e-12, atol=1e-12)

    def test_pure_function(self, tiny_params):
        state = EnvState((1, 2), 0)
        q1, _ = pipeline_forward(tiny_params, state)
        q2, _ = pipeline_forward(tiny_params, state)
        np.testing.assert_array_equal(q1, q2)

    def test_count_clamping(self, tiny_params):
        q_cap, _ = pipeline_forward(tiny_params, EnvState((3, 3), 0))
        q_over, _ = pipeline_forward(tiny_params, EnvState((9, 7), 0))
        np.testing.assert_array_equal(q_cap, q_over)

    def test_ue_count_mismatch(self, tiny_params):
        with pytest.raises(UeCountMismatch):
            forward_batch(tiny_params, np.zeros((1, 3), dtype=int), np.zeros(1, dtype=int))

    def test_output_shape(self, tiny_params):
        q, _ = forward_batch(tiny_params, np.zeros((4, 2), dtype=int), np.zeros(4, dtype=int))
        assert q.shape == (4, 2, NUM_ACTIONS)


class TestEncoders:
    def test_ue_onehot(self):
        np.testing.assert_array_equal(encode_ue_obs(2, 3), [0, 0, 1, 0])

    def test_ue_range(self):
        with pytest.raises(ValueError):
            encode_ue_obs(4, 3)

    def test_bs_onehot(self):
        np.testing.assert_array_equal(encode_bs_obs(3, 2), [0, 0, 0, 1])

    def test_bs_range(self):
        with pytest.raises(ValueError):
            encode_bs_obs(4, 2)


class TestGradients:
    def test_full_composition_finite_difference(self, tiny_params):
        """Central finite differences on a scalar loss sum(q * G) for a fixed
        random G, through all three stages."""
        rng = np.random.default_rng(11)
        counts = np.array([[1, 2], [3, 0], [0, 0]])
        obs = np.array([0, 3, 1])
        g_weights = rng.normal(size=(3, 2, NUM_ACTIONS))

        def loss(p):
            q, _ = forward_batch(p, counts, obs)
            return float(np.sum(q * g_weights))

        q, cache = forward_batch(tiny_params, counts, obs)
        from maclab.npm import backward_batch
        grads = backward_batch(tiny_params, cache, g_weights)

        h = 1e-5
        worst = 0.0
        for si, stack in enumerate(tiny_params.stacks()):
            for li in range(len(stack)):
                for arr, garr in zip(stack[li], grads[si][li]):
                    flat = arr.reshape(-1)
                    gflat = garr.reshape(-1)
                    for k in range(0, flat.size, max(1, flat.size // 3)):
                        orig = flat[k]
                        flat[k] = orig + h
                        lp = loss(tiny_params)
                        flat[k] = orig - h
                        lm = loss(tiny_params)
                        flat[k] = orig
                        fd = (lp - lm) / (2 * h)
                        rel = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), 1e-8)
                        worst = max(worst, rel)
        assert worst < 1e-4

    def test_head_gradients_are_structurally_separate(self, tiny_params):
        """Pushing gradient through UE 0's Q-row leaves UE 1's head untouched."""
        state = EnvState((2, 1), 0)
        _, cache = pipeline_forward(tiny_params, state)
        q_grads = np.zeros((2, NUM_ACTIONS))
        q_grads[0, 1] = 1.0
        grads = pipeline_backward(tiny_params, cache, q_grads)
        # stacks order: ue0, ue1, bs, head0, head1
        head0, head1 = grads[3], grads[4]
        assert all(np.all(w == 0) and np.all(b == 0) for w, b in head1)
        assert any(np.any(w != 0) for w, _ in head0)
        assert any(np.any(w != 0) for w, _ in grads[2])  # shared net does move

    def test_zero_grads_shapes(self, tiny_params):
        grads = zero_grads(tiny_params)
        for gstack, pstack in zip(grads, tiny_params.stacks()):
            for (gw, gb), (w, b) in zip(gstack, pstack):
                assert gw.shape == w.shape and gb.shape == b.shape
                assert not gw.any() and not gb.any()


class TestInit:
    def test_uniform_bounds_per_layer(self):
        params = init_params(NetworkShape(), 2, 3, substream(0, "init"))
        for stack in params.stacks():
            for w, b in stack:
                bound = np.sqrt(1.0 / w.shape[0])
                assert np.all(np.abs(w) <= bound)
                assert np.all(np.abs(b) <= bound)

    def test_deterministic_from_seed(self):
        a = init_params(NetworkShape(), 2, 3, substream(4, "init"))
        b = init_params(NetworkShape(), 2, 3, substream(4, "init"))
        for wa, wb in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(wa, wb)

    def test_heterogeneous_caps(self):
        params = init_params(NetworkShape(ue_hidden=(4,)), 2, [2, 5], substream(0, "init"))
        assert params.ue_nets[0][0][0].shape[0] == 3
        assert params.ue_nets[1][0][0].shape[0] == 6


class TestSelectAction:
    def test_greedy_argmax(self):
        rng = substream(0, "explore")
        assert select_action(np.array([0.1, 0.9, 0.2]), 0.0, rng) == 1

    def test_tie_breaks_low(self):
        rng = substream(0, "explore")
        assert select_action(np.array([0.5, 0.5, 0.1]), 0.0, rng) == 0

    def test_uniform_when_fully_random(self):
        rng = substream(0, "explore")
        draws = [select_action(np.array([9.0, 0.0, 0.0]), 1.0, rng) for _ in range(30_000)]
        freqs = np.bincount(draws, minlength=3) / len(draws)
        assert np.all(np.abs(freqs - 1 / 3) < 0.01)

    def test_epsilon_validation(self):
        with pytest.raises(ValueError):
            select_action(np.zeros(3), 1.5, substream(0, "explore"))

    def test_greedy_actions_matrix(self):
        q = np.array([[0.1, 0.9, 0.2], [1.0, 0.9, 0.2], [0.0, 0.0, 1.0]])
        assert greedy_actions(q) == [1, 0, 2]


def analytic_param_count(shape, num_ues, caps):
    def stack_count(dims):
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    total = 0
    for cap in caps:
        total += stack_count([cap + 1, *shape.ue_hidden, shape.ucm_dim])
    bs_in = num_ues * shape.ucm_dim + num_ues + 2
    total += stack_count([bs_in, *shape.bs_hidden, num_ues * shape.dcm_dim])
    total += num_ues * stack_count([shape.dcm_dim, *shape.head_hidden, NUM_ACTIONS])
    return total


class TestResize:
    def test_old_ue_nets_preserved_bit_exact(self, tiny_params):
        before = [[(w.copy(), b.copy()) for w, b in s] for s in tiny_params.ue_nets]
        grown = expand_for_ue_count(tiny_params, 3, substream(0, "expand-init"))
        for old_stack, new_stack in zip(before, grown.ue_nets):
            for (ow, ob), (nw, nb) in zip(old_stack, new_stack):
                np.testing.assert_array_equal(ow, nw)
                np.testing.assert_array_equal(ob, nb)

    def test_old_heads_preserved_bit_exact(self, tiny_params):
        before = [[(w.copy(), b.copy()) for w, b in s] for s in tiny_params.head_nets]
        grown = expand_for_ue_count(tiny_params, 3, substream(0, "expand-init"))
        for old_stack, new_stack in zip(before, grown.head_nets):
            for (ow, ob), (nw, nb) in zip(old_stack, new_stack):
                np.testing.assert_array_equal(ow, nw)
                np.testing.assert_array_equal(ob, nb)

    def test_expansion_shapes_and_count(self, tiny_shape):
        params = init_params(tiny_shape, 2, 3, substream(1, "init"))
        grown = expand_for_ue_count(params, 3, substream(1, "expand-init"))
        assert grown.num_ues == 3
        assert grown.ue_caps == (3, 3, 3)
        assert param_count(grown) == analytic_param_count(tiny_shape, 3, (3, 3, 3))

    def test_expand_twice_equals_once_in_shape(self, tiny_shape):
        params = init_params(tiny_shape, 2, 3, substream(1, "init"))
        twice = expand_for_ue_count(
            expand_for_ue_count(params, 3, substream(1, "a")), 4, substream(1, "b"))
        once = expand_for_ue_count(params, 4, substream(1, "c"))
        for s_twice, s_once in zip(twice.stacks(), once.stacks()):
            for (wt, bt), (wo, bo) in zip(s_twice, s_once):
                assert wt.shape == wo.shape and bt.shape == bo.shape

    def test_expansion_requires_growth(self, tiny_params):
        with pytest.raises(ValueError):
            expand_for_ue_count(tiny_params, 2, substream(0, "expand-init"))
        with pytest.raises(ValueError):
            expand_for_ue_count(tiny_params, 1, substream(0, "expand-init"))

    def test_old_state_rejected_after_expansion(self, tiny_params):
        grown = expand_for_ue_count(tiny_params, 3, substream(0, "expand-init"))
        with pytest.raises(UeCountMismatch):
            pipeline_forward(grown, EnvState((1, 2), 0))
        q, _ = pipeline_forward(grown, EnvState((1, 2, 0), 0))
        assert q.shape == (3, NUM_ACTIONS)

    def test_shrink(self, tiny_shape):
        params = init_params(tiny_shape, 3, 3, substream(2, "init"))
        small = shrink_for_ue_count(params, 2, substream(2, "expand-init"))
        assert small.num_ues == 2
        for old_stack, new_stack in zip(params.ue_nets[:2], small.ue_nets):
            for (ow, _), (nw, _) in zip(old_stack, new_stack):
                np.testing.assert_array_equal(ow, nw)
        q, _ = pipeline_forward(small, EnvState((1, 0), 0))
        assert q.shape == (2, NUM_ACTIONS)

    def test_shrink_validation(self, tiny_params):
        with pytest.raises(ValueError):
            shrink_for_ue_count(tiny_params, 2, substream(0, "x"))


class TestPersistence:
    def test_round_trip_bit_exact(self, tiny_params, tmp_path):
        path = tmp_path / "params.npz"
        save_params(tiny_params, path)
        loaded = load_params(path)
        assert loaded.num_ues == tiny_params.num_ues
        assert loaded.ue_caps == tiny_params.ue_caps
        assert loaded.shape == tiny_params.shape
        for a, b in zip(tiny_params.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_forward_identical_after_reload(self, tiny_params, tmp_path):
        path = tmp_path / "params.npz"
        save_params(tiny_params, path)
        loaded = load_params(path)
        state = EnvState((2, 1), 3)
        q1, _ = pipeline_forward(tiny_params, state)
        q2, _ = pipeline_forward(loaded, state)
        np.testing.assert_array_equal(q1, q2)


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_forward_oracle_property(seed):
    rng = substream(seed, "init")
    num_ues = int(rng.integers(1, 4))
    cap = int(rng.integers(1, 5))
    shape = NetworkShape(ue_hidden=(5,), bs_hidden=(5,), head_hidden=(4,))
    params = init_params(shape, num_ues, cap, rng)
    counts = [int(rng.integers(0, cap + 1)) for _ in range(num_ues)]
    obs = int(rng.integers(0, num_ues + 2))
    q, _ = pipeline_forward(params, EnvState(tuple(counts), obs))
    np.testing.assert_allclose(q, oracle_forward(params, counts, obs), rtol=1e-12, atol=1e-12)
