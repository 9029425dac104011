import math

import numpy as np
import pytest

from lvxattn.kernels import (AttentionState, blockwise_attention,
                             blockwise_attention_backward, dense_attention,
                             dense_attention_backward, empty_state, merge_states,
                             project, project_backward)
from lvxattn.tensorio import seeded_random_tensor
from lvxattn.verify import max_norm_error


def naive_attention_rowloop(Q, K, V, scale):
    """Independent two-pass softmax oracle: plain Python loops and math.exp,
    no shared code with the library path."""
    h, s_q, d = Q.shape
    s_kv = K.shape[1]
    O = np.zeros((h, s_q, d))
    L = np.zeros((h, s_q))
    for a in range(h):
        for i in range(s_q):
            scores = []
            for j in range(s_kv):
                acc = 0.0
                for k in range(d):
                    acc += float(Q[a, i, k]) * float(K[a, j, k])
                scores.append(acc * scale)
            m = max(scores)
            weights = [math.exp(s - m) for s in scores]
            total = sum(weights)
            for k in range(d):
                O[a, i, k] = sum(weights[j] * float(V[a, j, k])
                                 for j in range(s_kv)) / total
            L[a, i] = m + math.log(total)
    return O, L


def rand_qkv(h, s_q, s_kv, d, seed=0):
    return (seeded_random_tensor(seed, (h, s_q, d)),
            seeded_random_tensor(seed, (h, s_kv, d), stream=1),
            seeded_random_tensor(seed, (h, s_kv, d), stream=2))


class TestDenseAttention:
    def test_uniform_softmax_with_zero_queries(self):
        V = seeded_random_tensor(3, (1, 3, 4))
        Q = np.zeros((1, 2, 4))
        K = seeded_random_tensor(4, (1, 3, 4))
        st = dense_attention(Q, K, V, scale=1.0)
        expected = V.mean(axis=1)
        for i in range(2):
            np.testing.assert_allclose(st.O[0, i], expected[0], rtol=1e-15)

    def test_single_kv_row(self):
        Q, K, V = rand_qkv(2, 4, 1, 3, seed=5)
        st = dense_attention(Q, K, V, scale=1.0)
        for a in range(2):
            for i in range(4):
                np.testing.assert_array_equal(st.O[a, i], V[a, 0])
                assert st.L[a, i] == pytest.approx(float(Q[a, i] @ K[a, 0]), rel=1e-15)

    def test_matches_independent_rowloop_oracle(self):
        Q, K, V = rand_qkv(2, 4, 6, 3, seed=7)
        scale = 1.0 / math.sqrt(3)
        st = dense_attention(Q, K, V, scale)
        O_ref, L_ref = naive_attention_rowloop(Q, K, V, scale)
        assert max_norm_error(st.O, O_ref) <= 1e-14
        assert max_norm_error(st.L, L_ref) <= 1e-14

    def test_shape_mismatch_rejected(self):
        Q, K, V = rand_qkv(2, 4, 6, 3)
        with pytest.raises(ValueError, match="head counts"):
            dense_attention(Q[:1], K, V)
        with pytest.raises(ValueError, match="rows"):
            dense_attention(Q, K, V[:, :5])
        with pytest.raises(ValueError, match="cols"):
            dense_attention(Q, K[:, :, :2], V)


class TestBlockwiseAttention:
    def test_single_block_equals_dense(self):
        Q, K, V = rand_qkv(2, 5, 9, 4, seed=11)
        dense = dense_attention(Q, K, V)
        block = blockwise_attention(Q, K, V, tile_rows=3)
        assert max_norm_error(block.O, dense.O) <= 1e-12
        assert max_norm_error(block.L, dense.L) <= 1e-12

    def test_split_blocks_merge_to_dense(self):
        Q, K, V = rand_qkv(1, 4, 6, 3, seed=12)
        dense = dense_attention(Q, K, V)
        state = empty_state(1, 4, 3)
        for j in range(0, 6, 2):
            state = merge_states(state,
                                 blockwise_attention(Q, K[:, j:j + 2], V[:, j:j + 2]))
        assert max_norm_error(state.O, dense.O) <= 1e-12
        assert max_norm_error(state.L, dense.L) <= 1e-12

    def test_oversized_tile_acts_as_one_tile(self):
        Q, K, V = rand_qkv(1, 3, 5, 2, seed=13)
        a = blockwise_attention(Q, K, V, tile_rows=5)
        b = blockwise_attention(Q, K, V, tile_rows=1000)
        assert np.array_equal(a.O, b.O) and np.array_equal(a.L, b.L)

    def test_empty_kv_block_returns_empty_state(self):
        Q = seeded_random_tensor(1, (2, 3, 4))
        st = blockwise_attention(Q, np.zeros((2, 0, 4)), np.zeros((2, 0, 4)))
        assert np.all(st.O == 0.0)
        assert np.all(np.isneginf(st.L))


class TestMergeStates:
    def test_empty_is_exact_identity(self):
        Q, K, V = rand_qkv(2, 3, 4, 3, seed=14)
        st = blockwise_attention(Q, K, V)
        merged = merge_states(empty_state(2, 3, 3), st)
        assert np.array_equal(merged.O, st.O)
        assert np.array_equal(merged.L, st.L)
        merged = merge_states(st, empty_state(2, 3, 3))
        assert np.array_equal(merged.O, st.O)
        assert np.array_equal(merged.L, st.L)

    def test_commutative(self):
        Q, K, V = rand_qkv(1, 3, 8, 2, seed=15)
        a = blockwise_attention(Q, K[:, :5], V[:, :5])
        b = blockwise_attention(Q, K[:, 5:], V[:, 5:])
        ab, ba = merge_states(a, b), merge_states(b, a)
        assert max_norm_error(ab.O, ba.O) <= 1e-15
        assert max_norm_error(ab.L, ba.L) <= 1e-15

    def test_merge_order_independence_vs_dense(self):
        Q, K, V = rand_qkv(1, 4, 9, 3, seed=16)
        dense = dense_attention(Q, K, V)
        parts = [blockwise_attention(Q, K[:, j:j + 3], V[:, j:j + 3])
                 for j in range(0, 9, 3)]
        left = merge_states(merge_states(parts[0], parts[1]), parts[2])
        right = merge_states(parts[0], merge_states(parts[1], parts[2]))
        for st in (left, right):
            assert max_norm_error(st.O, dense.O) <= 1e-12
            assert max_norm_error(st.L, dense.L) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            merge_states(empty_state(1, 2, 3), empty_state(1, 3, 3))


class TestDenseBackward:
    def test_zero_do_gives_zero_gradients(self):
        Q, K, V = rand_qkv(2, 3, 5, 2, seed=17)
        st = dense_attention(Q, K, V)
        gb = dense_attention_backward(Q, K, V, st.O, st.L, np.zeros_like(Q))
        assert np.all(gb.dQ == 0) and np.all(gb.dK == 0) and np.all(gb.dV == 0)

    def test_single_kv_row_gradients(self):
        Q, K, V = rand_qkv(1, 4, 1, 3, seed=18)
        dO = seeded_random_tensor(19, (1, 4, 3))
        st = dense_attention(Q, K, V, scale=1.0)
        gb = dense_attention_backward(Q, K, V, st.O, st.L, dO, scale=1.0)
        np.testing.assert_allclose(gb.dV[0, 0], dO[0].sum(axis=0), rtol=1e-14)
        # saturated softmax: score gradient vanishes
        assert np.max(np.abs(gb.dQ)) <= 1e-14
        assert np.max(np.abs(gb.dK)) <= 1e-14

    def test_blockwise_contributions_sum_to_dense(self):
        Q, K, V = rand_qkv(2, 4, 6, 3, seed=20)
        dO = seeded_random_tensor(21, (2, 4, 3))
        st = dense_attention(Q, K, V)
        gb = dense_attention_backward(Q, K, V, st.O, st.L, dO)
        D = np.sum(dO * st.O, axis=2)
        dq = np.zeros_like(Q)
        dks, dvs = [], []
        for j in range(0, 6, 3):
            dq_c, dk_c, dv_c = blockwise_attention_backward(
                Q, K[:, j:j + 3], V[:, j:j + 3], st.L, D, dO)
            dq += dq_c
            dks.append(dk_c)
            dvs.append(dv_c)
        assert max_norm_error(dq, gb.dQ) <= 1e-12
        assert max_norm_error(np.concatenate(dks, axis=1), gb.dK) <= 1e-12
        assert max_norm_error(np.concatenate(dvs, axis=1), gb.dV) <= 1e-12

    def test_one_block_covering_everything_equals_dense(self):
        Q, K, V = rand_qkv(1, 3, 4, 2, seed=22)
        dO = seeded_random_tensor(23, (1, 3, 2))
        st = dense_attention(Q, K, V)
        gb = dense_attention_backward(Q, K, V, st.O, st.L, dO)
        D = np.sum(dO * st.O, axis=2)
        dq, dk, dv = blockwise_attention_backward(Q, K, V, st.L, D, dO)
        assert np.array_equal(dq, gb.dQ)
        assert np.array_equal(dk, gb.dK)
        assert np.array_equal(dv, gb.dV)

    def test_finite_difference(self):
        # central differences on loss = <dO, O>, step 1e-6
        h, s_q, s_kv, d = 1, 3, 5, 2
        Q, K, V = rand_qkv(h, s_q, s_kv, d, seed=24)
        dO = seeded_random_tensor(25, (h, s_q, d))
        st = dense_attention(Q, K, V)
        gb = dense_attention_backward(Q, K, V, st.O, st.L, dO)

        def loss():
            return float(np.sum(dO * dense_attention(Q, K, V).O))

        step = 1e-6
        for prim, grad in ((Q, gb.dQ), (K, gb.dK), (V, gb.dV)):
            fd = np.zeros_like(prim)
            for idx in np.ndindex(prim.shape):
                orig = prim[idx]
                prim[idx] = orig + step
                up = loss()
                prim[idx] = orig - step
                down = loss()
                prim[idx] = orig
                fd[idx] = (up - down) / (2 * step)
            assert max_norm_error(grad, fd) <= 1e-5


class TestProjection:
    def test_identity_weight_is_reshape(self):
        x = seeded_random_tensor(26, (5, 6))
        W = np.eye(6)
        out = project(x, W, heads=2)
        assert out.shape == (2, 5, 3)
        np.testing.assert_array_equal(out[0], x[:, :3])
        np.testing.assert_array_equal(out[1], x[:, 3:])

    def test_zero_grad_out(self):
        x = seeded_random_tensor(27, (4, 3))
        W = seeded_random_tensor(28, (3, 6))
        dX, dW = project_backward(x, W, np.zeros((2, 4, 3)))
        assert np.all(dX == 0) and np.all(dW == 0)

    def test_finite_difference(self):
        x = seeded_random_tensor(29, (3, 4))
        W = seeded_random_tensor(30, (4, 4))
        g = seeded_random_tensor(31, (2, 3, 2))
        dX, dW = project_backward(x, W, g)

        def loss():
            return float(np.sum(g * project(x, W, 2)))

        step = 1e-6
        for prim, grad in ((x, dX), (W, dW)):
            fd = np.zeros_like(prim)
            for idx in np.ndindex(prim.shape):
                orig = prim[idx]
                prim[idx] = orig + step
                up = loss()
                prim[idx] = orig - step
                down = loss()
                prim[idx] = orig
                fd[idx] = (up - down) / (2 * step)
            assert max_norm_error(grad, fd) <= 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dims"):
            project(np.ones((3, 4)), np.ones((5, 6)), 2)
        with pytest.raises(ValueError, match="divisible"):
            project(np.ones((3, 4)), np.ones((4, 5)), 2)


class TestF32Path:
    def test_f32_tracks_f64_oracle(self):
        Q, K, V = rand_qkv(2, 6, 11, 4, seed=32)
        Q32, K32, V32 = (t.astype(np.float32) for t in (Q, K, V))
        oracle = dense_attention(Q32.astype(np.float64), K32.astype(np.float64),
                                 V32.astype(np.float64))
        st = blockwise_attention(Q32, K32, V32, tile_rows=4)
        assert st.O.dtype == np.float32
        assert max_norm_error(st.O, oracle.O) <= 1e-4
        assert max_norm_error(st.L, oracle.L) <= 1e-4


def test_attention_state_invariants():
    with pytest.raises(ValueError):
        AttentionState(O=np.zeros((1, 2, 3)), L=np.zeros((1, 3)))
    st = empty_state(2, 4, 3)
    assert np.all(st.O[np.isneginf(st.L)] == 0.0)
