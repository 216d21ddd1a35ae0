"""Layer shapes, invariants, and gradient checks."""

import numpy as np
import pytest

import crosstalk.autodiff as ad
from crosstalk.autodiff import Tensor
from crosstalk.errors import ContractError, ShapeError
from crosstalk.layers import (ConformerBlock, ConvModule, ConvSubsampler,
                              Decoder, FeedForward, LayerNorm, Linear,
                              MultiHeadAttention, RelPosBias)


def test_linear_shapes_and_grad():
    rng = np.random.default_rng(0)
    lin = Linear(rng, 5, 3)
    x = Tensor(rng.normal(size=(7, 5)), requires_grad=True)
    assert lin(x).shape == (7, 3)
    ps = [x] + list(lin.params().values())
    assert ad.grad_check(lambda *p: ad.sum_(ad.sigmoid(lin(p[0]))), ps) < 1e-6


def test_layer_norm_normalizes_rows():
    rng = np.random.default_rng(1)
    ln = LayerNorm(6)
    y = ln(Tensor(rng.normal(size=(4, 6)) * 10.0 + 3.0)).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=1), 1.0, atol=1e-3)


def test_rel_pos_bias_shift_invariance():
    bias = RelPosBias(heads=2, max_dist=4)
    rng = np.random.default_rng(2)
    bias.table.data[:] = rng.normal(size=bias.table.shape)
    m = bias.matrix(0, 6, 6).data
    # entries depend only on the clamped offset j - i
    for i in range(5):
        for j in range(5):
            assert m[i, j] == m[i + 1, j + 1]
    # clamping: offsets past max_dist share the edge value
    wide = bias.matrix(1, 1, 12).data[0]
    assert wide[9] == wide[10] == wide[11]


def test_rel_pos_all_heads_matches_per_head():
    bias = RelPosBias(heads=3, max_dist=5)
    rng = np.random.default_rng(3)
    bias.table.data[:] = rng.normal(size=bias.table.shape)
    stacked = bias.all_heads(7, 9).data
    assert stacked.shape == (3, 7, 9)
    for h in range(3):
        assert np.array_equal(stacked[h], bias.matrix(h, 7, 9).data)


def test_attention_rows_sum_to_one_and_mask_blocks():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(rng, d=8, heads=2, max_dist=4)
    x = Tensor(rng.normal(size=(6, 8)))
    sink = []
    mask = np.tril(np.ones((6, 6), dtype=bool))
    mha(x, x, mask=mask, sink=sink)
    assert len(sink) == 2
    for attn in sink:
        assert attn.shape == (6, 6)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(attn[np.triu_indices(6, k=1)] == 0.0)


def test_attention_rejects_bad_mask():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(rng, d=8, heads=2)
    x = Tensor(rng.normal(size=(4, 8)))
    with pytest.raises(ShapeError):
        mha(x, x, mask=np.ones((3, 4), dtype=bool))
    dead_row = np.ones((4, 4), dtype=bool)
    dead_row[2, :] = False
    with pytest.raises(ContractError):
        mha(x, x, mask=dead_row)


def test_attention_head_count_must_divide_width():
    with pytest.raises(ShapeError):
        MultiHeadAttention(np.random.default_rng(0), d=10, heads=3)


def test_attention_grad_through_bias_and_mask():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        mha = MultiHeadAttention(rng, d=8, heads=2, max_dist=3)
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        mask = np.tril(np.ones((5, 5), dtype=bool))
        ps = [x] + list(mha.params().values())
        err = ad.grad_check(
            lambda *p: ad.sum_(ad.sigmoid(mha(p[0], p[0], mask=mask))), ps)
        assert err < 1e-6


def test_feed_forward_and_conv_module_grads():
    rng = np.random.default_rng(6)
    ffm = FeedForward(rng, 6, 12)
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    ps = [x] + list(ffm.params().values())
    assert ad.grad_check(lambda *p: ad.sum_(ad.sigmoid(ffm(p[0]))), ps) < 1e-6

    conv = ConvModule(rng, 6, kernel=3)
    ps = [x] + list(conv.params().values())
    assert ad.grad_check(lambda *p: ad.sum_(ad.sigmoid(conv(p[0]))), ps) < 1e-6
    with pytest.raises(ShapeError):
        ConvModule(rng, 6, kernel=4)


def test_conv_module_preserves_length():
    rng = np.random.default_rng(7)
    conv = ConvModule(rng, 4, kernel=7)
    x = Tensor(rng.normal(size=(9, 4)))
    assert conv(x).shape == (9, 4)


def test_conformer_block_shape_and_grad():
    rng = np.random.default_rng(8)
    blk = ConformerBlock(rng, d=8, heads=2, ff=16, kernel=3, max_dist=4)
    x = Tensor(rng.normal(size=(7, 8)), requires_grad=True)
    assert blk(x).shape == (7, 8)
    ps = [x] + list(blk.params().values())
    assert ad.grad_check(lambda *p: ad.sum_(ad.sigmoid(blk(p[0]))), ps) < 1e-6


def test_subsampler_length_contract():
    rng = np.random.default_rng(9)
    sub = ConvSubsampler(rng, feat_dim=5, d=8)
    for t in range(ConvSubsampler.MIN_FRAMES, 40):
        x = Tensor(rng.normal(size=(t, 5)))
        assert sub(x).shape == (ConvSubsampler.output_length(t), 8)
    with pytest.raises(ShapeError):
        sub(Tensor(rng.normal(size=(ConvSubsampler.MIN_FRAMES - 1, 5))))


def test_subsampler_grad():
    rng = np.random.default_rng(10)
    sub = ConvSubsampler(rng, feat_dim=3, d=6)
    x = Tensor(rng.normal(size=(11, 3)), requires_grad=True)
    ps = [x] + list(sub.params().values())
    assert ad.grad_check(lambda *p: ad.sum_(ad.sigmoid(sub(p[0]))), ps) < 1e-6


def test_decoder_is_causal():
    # changing targets[t] must not change logits at positions < t
    rng = np.random.default_rng(11)
    dec = Decoder(rng, vocab=9, d=8, heads=2, ff=16, n_blocks=2, max_dist=4)
    memory = Tensor(rng.normal(size=(6, 8)))
    base = dec([2, 4, 5, 6], memory).data
    poked = dec([2, 4, 5, 8], memory).data
    assert np.array_equal(base[:3], poked[:3])
    assert not np.array_equal(base[3], poked[3])


def test_decoder_rejects_empty_inputs():
    rng = np.random.default_rng(12)
    dec = Decoder(rng, vocab=9, d=8, heads=2, ff=16, n_blocks=1, max_dist=4)
    memory = Tensor(rng.normal(size=(6, 8)))
    with pytest.raises(ContractError):
        dec([], memory)
    with pytest.raises(ContractError):
        dec([2], Tensor(np.zeros((0, 8))))


def test_decoder_grad():
    rng = np.random.default_rng(13)
    dec = Decoder(rng, vocab=7, d=8, heads=2, ff=16, n_blocks=1, max_dist=4)
    memory = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    ps = [memory] + list(dec.params().values())
    err = ad.grad_check(
        lambda *p: ad.sum_(ad.sigmoid(dec([2, 4, 5], p[0]))), ps)
    assert err < 1e-6
