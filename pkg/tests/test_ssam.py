"""Causal spatiotemporal attention: bias table, mask structure, causality."""

import numpy as np
import pytest

import spikereid.tensor as tt
from spikereid.ssam import (AttentionStage, compute_bias_matrix, compute_staw,
                            project_qkv, relative_index)
from spikereid.tensor import Tensor


class TestRelativeIndex:
    def test_center(self):
        assert relative_index(0, 0, 3, 3) == (2, 2)

    def test_corners(self):
        h, w = 4, 5
        assert relative_index(-(h - 1), -(w - 1), h, w) == (0, 0)
        assert relative_index(h - 1, w - 1, h, w) == (2 * h - 2, 2 * w - 2)

    def test_round_trip_all_displacements(self):
        h, w = 5, 4
        seen = set()
        for dh in range(-(h - 1), h):
            for dw in range(-(w - 1), w):
                r, c = relative_index(dh, dw, h, w)
                assert 0 <= r < 2 * h - 1 and 0 <= c < 2 * w - 1
                assert (r, c) not in seen
                seen.add((r, c))
        assert len(seen) == (2 * h - 1) * (2 * w - 1)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            relative_index(3, 0, 3, 3)


class TestBiasMatrix:
    def test_constant_table(self):
        h, w = 3, 2
        table = Tensor(np.full((2 * h - 1, 2 * w - 1), 0.7))
        b = compute_bias_matrix(table, h, w)
        assert np.allclose(b.data, 0.7)

    def test_diagonal_is_center(self, rng):
        h, w = 4, 3
        table = Tensor(rng.normal(size=(2 * h - 1, 2 * w - 1)))
        b = compute_bias_matrix(table, h, w)
        center = table.data[h - 1, w - 1]
        assert np.allclose(np.diag(b.data), center)

    def test_equal_displacement_equal_bias(self, rng):
        h, w = 4, 3
        n = h * w
        table = Tensor(rng.normal(size=(2 * h - 1, 2 * w - 1)))
        b = compute_bias_matrix(table, h, w).data
        # shift both tokens one row down: same displacement, same bias
        for i in range(n - w):
            for j in range(n - w):
                assert b[i, j] == b[i + w, j + w]

    def test_translation_invariance_exhaustive(self, rng):
        # every token pair: bias depends only on the displacement
        for h, w in [(2, 2), (3, 4), (6, 5), (6, 6)]:
            table = Tensor(rng.normal(size=(2 * h - 1, 2 * w - 1)))
            b = compute_bias_matrix(table, h, w).data
            n = h * w
            by_disp = {}
            for i in range(n):
                for j in range(n):
                    d = (i // w - j // w, i % w - j % w)
                    if d in by_disp:
                        assert b[i, j] == by_disp[d]
                    else:
                        by_disp[d] = b[i, j]

    def test_gradient_flows_to_table(self, f64, rng):
        h, w = 3, 3
        table = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        b = compute_bias_matrix(table, h, w)
        tt.sum_(b).backward()
        # each displacement cell receives one gradient unit per token pair
        assert table.grad.sum() == h * w * h * w

    def test_wrong_table_shape(self):
        with pytest.raises(ValueError):
            compute_bias_matrix(Tensor(np.zeros((3, 3))), 3, 3)


def make_stage(rng, channels=8, height=3, width=2, **kw):
    return AttentionStage(channels, height, width,
                          rng=np.random.default_rng(7), **kw)


class TestProjectQKV:
    def test_zero_input_never_fires(self, rng):
        stage = make_stage(rng)
        x = Tensor(np.zeros((4, 8, 6), dtype=np.float32))
        q, k, v = project_qkv(x, stage, time_steps=4)
        assert not q.data.any() and not k.data.any() and not v.data.any()

    def test_outputs_binary(self, rng):
        stage = make_stage(rng)
        x = Tensor(np.random.default_rng(0).poisson(1.0, size=(4, 8, 6)).astype(np.float32))
        q, k, v = project_qkv(x, stage, time_steps=4)
        for s in (q, k, v):
            assert set(np.unique(s.data)) <= {0.0, 1.0}

    def test_swapping_qk_weights_leaves_v_alone(self, rng):
        stage = make_stage(rng)
        x = Tensor(np.random.default_rng(1).poisson(1.0, size=(4, 8, 6)).astype(np.float32))
        q0, k0, v0 = project_qkv(x, stage, time_steps=4)
        stage.wq.data, stage.wk.data = stage.wk.data.copy(), stage.wq.data.copy()
        q1, k1, v1 = project_qkv(x, stage, time_steps=4)
        assert np.array_equal(v0.data, v1.data)
        assert np.array_equal(q1.data, k0.data) and np.array_equal(k1.data, q0.data)


class TestComputeSTAW:
    def test_future_block_zero(self, rng):
        n, c = 6, 8
        q, k = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        b = rng.normal(size=(n, n))
        block = compute_staw(q, k, b, t_prime=3, t=1, variant="staw")
        assert not block.any()

    def test_diagonal_block_is_bias_for_zero_qk(self, rng):
        n, c = 6, 8
        b = rng.normal(size=(n, n))
        block = compute_staw(np.zeros((n, c)), np.zeros((n, c)), b, 2, 2, "staw")
        assert np.array_equal(block, b)

    def test_past_block_scaled_product(self, rng):
        n, c = 4, 16
        q, k = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        block = compute_staw(q, k, np.zeros((n, n)), 0, 3, "staw")
        assert np.allclose(block, q @ k.T / 4.0, atol=1e-12)

    def test_zaw_always_zero(self, rng):
        n, c = 5, 8
        q, k = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        block = compute_staw(q, k, rng.normal(size=(n, n)), 2, 2, "zaw")
        assert not block.any()

    def test_faw_keeps_future(self, rng):
        n, c = 5, 8
        q, k = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        block = compute_staw(q, k, np.zeros((n, n)), 3, 1, "faw")
        assert np.allclose(block, q @ k.T / np.sqrt(c), atol=1e-12)

    def test_unknown_variant(self, rng):
        with pytest.raises(ValueError):
            compute_staw(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0, 0, "bogus")


class TestStageForward:
    def spikes(self, t, b, c, h, w, seed=0, rate=0.45):
        return (np.random.default_rng(seed).random((t * b, c, h, w)) < rate).astype(np.float32)

    def test_shape_preserved(self, rng):
        stage = make_stage(rng)
        x = self.spikes(4, 2, 8, 3, 2)
        out = stage(Tensor(x), time_steps=4)
        assert out.data.shape == x.shape

    def test_single_step_runs(self, rng):
        stage = make_stage(rng)
        x = self.spikes(1, 2, 8, 3, 2)
        out = stage(Tensor(x), time_steps=1)
        assert out.data.shape == x.shape

    def test_zaw_independent_of_qk(self, rng):
        stage = make_stage(rng, variant="zaw")
        x = self.spikes(4, 2, 8, 3, 2, seed=3)
        out0 = stage(Tensor(x), time_steps=4).data
        stage.wq.data = stage.wq.data * 0 + 5.0
        stage.wk.data = stage.wk.data * 0 - 5.0
        stage.bias_table.data = stage.bias_table.data + 3.0
        out1 = stage(Tensor(x), time_steps=4).data
        assert np.array_equal(out0, out1)

    def test_residual_off_gives_spikes_only(self, rng):
        stage = make_stage(rng, residual=False)
        x = self.spikes(3, 2, 8, 3, 2, seed=4)
        out = stage(Tensor(x), time_steps=3).data
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_residual_adds_input(self, rng):
        x = self.spikes(3, 2, 8, 3, 2, seed=5)
        s_on = make_stage(rng, residual=True)
        s_off = make_stage(rng, residual=False)
        on = s_on(Tensor(x), time_steps=3).data
        off = s_off(Tensor(x), time_steps=3).data
        assert np.array_equal(on, off + x)

    def test_causality_perturbation(self, rng):
        # changing the input at step t0 leaves outputs before t0 bit-identical
        stage = make_stage(rng)
        t, b = 6, 2
        x = self.spikes(t, b, 8, 3, 2, seed=6)
        base = stage(Tensor(x), time_steps=t).data
        for t0 in (2, 4, 5):
            pert = x.copy().reshape(t, b, 8, 3, 2)
            pert[t0:] = self.spikes(t - t0, b, 8, 3, 2, seed=100 + t0).reshape(t - t0, b, 8, 3, 2)
            out = stage(Tensor(pert.reshape(t * b, 8, 3, 2)), time_steps=t).data
            assert np.array_equal(base.reshape(t, b, 8, 3, 2)[:t0],
                                  out.reshape(t, b, 8, 3, 2)[:t0])

    def test_faw_keeps_future_blocks(self, rng):
        # the full-attention ablation computes weights for every step pair
        stage = make_stage(rng, variant="faw")
        stage.wq.data = stage.wq.data * 6.0  # drive the LIF hard enough to fire
        stage.wk.data = stage.wk.data * 6.0
        t = 4
        x = self.spikes(t, 1, 8, 3, 2, seed=8)
        blocks = stage.staw_blocks(Tensor(x), time_steps=t)
        future = [(tp, tc) for tp in range(t) for tc in range(t) if tp > tc]
        assert any(blocks[tp, tc].any() for tp, tc in future)

    def test_block_upper_triangular_structure(self, rng):
        stage = make_stage(rng)
        t = 5
        x = self.spikes(t, 1, 8, 3, 2, seed=9)
        blocks = stage.staw_blocks(Tensor(x), time_steps=t)
        n = stage.n_tokens
        assert blocks.shape == (t, t, n, n)
        for tp in range(t):
            for tc in range(t):
                if tp > tc:
                    assert not blocks[tp, tc].any()

    def test_softmax_rows_normalized_32bit(self, rng):
        stage = make_stage(rng)
        t = 4
        x = self.spikes(t, 2, 8, 3, 2, seed=10)
        tokens, b = stage._to_tokens(Tensor(x), t)
        q, k, _ = project_qkv(tokens, stage, t)
        q = stage._to_attention(q, t, b)
        k = stage._to_attention(k, t, b)
        bias = compute_bias_matrix(stage.bias_table, stage.height, stage.width)
        for tc in range(t):
            logits = tt.einsum("pbic,bjc->pbij", q[0:tc + 1], k[tc]) * (1 / np.sqrt(8))
            sm = tt.softmax_lastdim(logits).data
            assert np.abs(sm.sum(axis=-1) - 1.0).max() < 1e-6

    def test_zaw_uniform_mixing_of_values(self, rng):
        # softmax of a zero block is uniform over tokens
        stage = make_stage(rng, variant="zaw", residual=False)
        t, b, c = 3, 1, 8
        x = self.spikes(t, b, c, 3, 2, seed=11)
        out = stage(Tensor(x), time_steps=t)
        tokens, bb = stage._to_tokens(Tensor(x), t)
        _, _, v = project_qkv(tokens, stage, t)
        v5 = stage._to_attention(v, t, bb).data
        from spikereid.spiking import lif_sequence_forward
        n = stage.n_tokens
        fused = np.stack([(tc + 1) * np.tile(v5[tc, 0].mean(axis=0, keepdims=True), (n, 1))
                          for tc in range(t)])
        expect = lif_sequence_forward(fused.reshape(t, -1), stage.lif_out.params).reshape(t, n, c)
        got = out.data.reshape(t, b, c, n)[:, 0].transpose(0, 2, 1)
        assert np.array_equal(got, expect)

    def test_invalid_config(self, rng):
        with pytest.raises(ValueError):
            make_stage(rng, variant="nope")
        with pytest.raises(ValueError):
            make_stage(rng, value_mode="sideways")


class TestValueModes:
    def test_literal_uses_current_step_values(self, rng):
        # zero out V at step t: literal-mode output at t sees only zeros
        stage = make_stage(rng, value_mode="literal", residual=False, variant="staw")
        t, b, c = 4, 1, 8
        x = (np.random.default_rng(12).random((t * b, c, 3, 2)) < 0.5).astype(np.float32)
        stage.wv.data = np.zeros_like(stage.wv.data)  # V spikes all zero
        out = stage(Tensor(x), time_steps=t).data
        assert not out.any()

    def test_standard_causal_mixes_past_values(self, rng):
        # with a silent step t0 (no input), literal mode's pre-spike attention
        # sum at t0 is exactly zero (its V_t0 is all zero) while
        # standard-causal still relays earlier steps' values
        t, c = 4, 8
        t0 = 2
        x = (np.random.default_rng(13).random((t, c, 3, 2)) < 0.8).astype(np.float32)
        x[t0] = 0.0
        lit = make_stage(rng, value_mode="literal", residual=False)
        std = make_stage(rng, value_mode="standard-causal", residual=False)
        for s in (lit, std):
            s.wv.data = s.wv.data * 6.0  # make the value path actually spike
        cap_lit, cap_std = {}, {}
        lit(Tensor(x), time_steps=t, capture=cap_lit)
        std(Tensor(x), time_steps=t, capture=cap_std)
        assert not cap_lit["fused"][t0].any()
        assert cap_std["fused"][t0].any()
