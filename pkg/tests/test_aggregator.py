"""Aggregator tests: stacking, positional tagging, attention pooling, mean."""

import numpy as np
import pytest

from nactpred import autodiff as ad
from nactpred.autodiff import Tensor
from nactpred.aggregator import (
    AttentionRecord,
    build_aggregator,
    add_slice_positional,
    attention_pool,
    encode_volume,
    iter_aggregator_parameters,
    mean_pool,
    stack_cls,
)
from nactpred.encoder import EncoderConfig, build_encoder, encode_slice

TINY = EncoderConfig(image_size=16, patch_size=8, embed_dim=8, n_blocks=1,
                     n_heads=2, lora_rank=2)
D = TINY.embed_dim
HEADS = 2


def tiny_parts(seed=0, max_slices=6, n_layers=1):
    rng = np.random.default_rng(seed)
    return build_encoder(TINY, rng), build_aggregator(D, max_slices, n_layers, rng)


class TestAttentionRecord:
    def test_valid_record_accepted(self):
        rec = AttentionRecord([0.25, 0.25, 0.5])
        assert rec.weights.sum() == pytest.approx(1.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            AttentionRecord([0.6, 0.6, -0.2])

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            AttentionRecord([0.3, 0.3])

    def test_matrix_rejected(self):
        with pytest.raises(ValueError):
            AttentionRecord(np.full((2, 2), 0.25))


class TestStackAndPositional:
    def test_single_slice_stack(self):
        enc, _ = tiny_parts()
        with ad.no_grad():
            s = encode_slice(np.zeros((16, 16)), enc, TINY)
            out = stack_cls([s])
        assert out.shape == (1, D)
        np.testing.assert_array_equal(out.data, s.cls.data)

    def test_reversed_input_reverses_rows(self):
        enc, _ = tiny_parts()
        rng = np.random.default_rng(1)
        with ad.no_grad():
            slices = [encode_slice(rng.random((16, 16)), enc, TINY)
                      for _ in range(4)]
            fwd = stack_cls(slices).data
            rev = stack_cls(slices[::-1]).data
        np.testing.assert_array_equal(rev, fwd[::-1])

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            stack_cls([])

    def test_zero_table_is_identity(self):
        seq = Tensor(np.random.default_rng(2).standard_normal((3, D)))
        table = Tensor(np.zeros((6, D)))
        np.testing.assert_array_equal(add_slice_positional(seq, table).data, seq.data)

    def test_zero_sequence_yields_table_prefix(self):
        table = Tensor(np.random.default_rng(3).standard_normal((6, D)))
        out = add_slice_positional(Tensor(np.zeros((4, D))), table)
        np.testing.assert_array_equal(out.data, table.data[:4])

    def test_overlong_volume_rejected(self):
        table = Tensor(np.zeros((2, D)))
        with pytest.raises(ValueError):
            add_slice_positional(Tensor(np.zeros((3, D))), table)


class TestAttentionPool:
    def test_identical_rows_get_uniform_weights(self):
        _, agg = tiny_parts()
        row = np.random.default_rng(4).standard_normal(D)
        seq = Tensor(np.tile(row, (5, 1)))
        with ad.no_grad():
            _, rec = attention_pool(seq, agg.layers[0], HEADS)
        np.testing.assert_allclose(rec.weights, 0.2, atol=1e-12)

    def test_weights_sum_to_one_on_random_inputs(self):
        _, agg = tiny_parts()
        for seed in range(10):
            seq = Tensor(np.random.default_rng(seed).standard_normal((7, D)) * 3.0)
            with ad.no_grad():
                _, rec = attention_pool(seq, agg.layers[0], HEADS)
            assert abs(rec.weights.sum() - 1.0) < 1e-9
            assert rec.weights.min() >= 0.0

    def test_permutation_equivariance(self):
        _, agg = tiny_parts()
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, D))
        perm = rng.permutation(6)
        with ad.no_grad():
            out, rec = attention_pool(Tensor(x), agg.layers[0], HEADS)
            pout, prec = attention_pool(Tensor(x[perm]), agg.layers[0], HEADS)
        np.testing.assert_allclose(pout.data, out.data[perm], atol=1e-12)
        np.testing.assert_allclose(prec.weights, rec.weights[perm], atol=1e-12)


class TestMeanPool:
    def test_single_row_passthrough(self):
        x = np.random.default_rng(6).standard_normal((1, D))
        np.testing.assert_allclose(mean_pool(Tensor(x)).data, x, atol=1e-15)

    def test_two_row_average(self):
        out = mean_pool(Tensor([[1.0, 1.0], [3.0, 3.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 2.0]])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, D))
        a = mean_pool(Tensor(x)).data
        b = mean_pool(Tensor(x[rng.permutation(5)])).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestEncodeVolume:
    def test_deterministic_with_expected_width(self):
        enc, agg = tiny_parts()
        vox = np.random.default_rng(8).random((16, 16, 4))
        with ad.no_grad():
            a, rec_a = encode_volume(vox, enc, TINY, agg, HEADS)
            b, rec_b = encode_volume(vox, enc, TINY, agg, HEADS)
        assert a.shape == (1, D)
        assert np.array_equal(a.data, b.data)
        np.testing.assert_array_equal(rec_a.weights, rec_b.weights)

    def test_zero_positional_table_gives_permutation_invariance(self):
        enc, agg = tiny_parts()
        assert not agg.slice_pos.data.any()
        rng = np.random.default_rng(9)
        vox = rng.random((16, 16, 5))
        perm = rng.permutation(5)
        with ad.no_grad():
            base, _ = encode_volume(vox, enc, TINY, agg, HEADS)
            mixed, _ = encode_volume(vox[:, :, perm], enc, TINY, agg, HEADS)
        np.testing.assert_allclose(mixed.data, base.data, atol=1e-9)

    def test_trained_positional_table_breaks_invariance(self):
        enc, agg = tiny_parts()
        agg.slice_pos.assign_(np.random.default_rng(10).standard_normal((6, D)))
        vox = np.random.default_rng(11).random((16, 16, 5))
        with ad.no_grad():
            base, _ = encode_volume(vox, enc, TINY, agg, HEADS)
            mixed, _ = encode_volume(vox[:, :, ::-1], enc, TINY, agg, HEADS)
        assert np.abs(mixed.data - base.data).max() > 1e-6

    def test_batched_matches_reference_path(self):
        enc, agg = tiny_parts()
        agg.slice_pos.assign_(np.random.default_rng(12).standard_normal((6, D)) * 0.1)
        vox = np.random.default_rng(13).random((16, 16, 4))
        with ad.no_grad():
            fast, rec_f = encode_volume(vox, enc, TINY, agg, HEADS, batched=True)
            slow, rec_s = encode_volume(vox, enc, TINY, agg, HEADS, batched=False)
        np.testing.assert_allclose(fast.data, slow.data, atol=1e-9)
        np.testing.assert_allclose(rec_f.weights, rec_s.weights, atol=1e-9)

    def test_positional_gradient_matches_finite_differences(self):
        enc, agg = tiny_parts()
        vox = np.random.default_rng(14).random((16, 16, 3))

        def f():
            emb, _ = encode_volume(vox, enc, TINY, agg, HEADS)
            return ad.tensor_sum(emb * emb)

        assert ad.finite_diff_check(f, [agg.slice_pos]) < 1e-4

    def test_flat_input_rejected(self):
        enc, agg = tiny_parts()
        with pytest.raises(ad.ShapeError):
            encode_volume(np.zeros((16, 16)), enc, TINY, agg, HEADS)

    def test_parameter_iteration_order(self):
        _, agg = tiny_parts(n_layers=2)
        names = [n for n, _ in iter_aggregator_parameters(agg)]
        assert names[0] == "slice_pos"
        assert names[1] == "pool0.norm.gain"
        assert "pool1.attn.out.bias" == names[-1]
