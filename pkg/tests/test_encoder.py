import numpy as np
import pytest

from adafuse.encoder import (
    AttentionRecord,
    ModalityEncoder,
    pad_sequences,
    split_records,
    temporal_attention,
)
from adafuse.tensorcore import Context, DiffGraph, grad_check, ops

EVAL = Context("eval")


def make_encoder(d=5, seed=0, positional=True):
    return ModalityEncoder("enc", d, np.random.default_rng(seed), positional=positional)


def batch(seed=0, lengths=(4, 2, 5), d=5):
    rng = np.random.default_rng(seed)
    return pad_sequences([rng.normal(size=(T, d)) for T in lengths])


def test_zero_input_layer_gives_zero_embedding_before_norm():
    enc = make_encoder()
    enc.inp.weight.data[:] = 0
    enc.inp.bias.data[:] = 0
    x, _ = batch()
    np.testing.assert_array_equal(ops.relu(enc.inp(x)).data, 0.0)


def test_single_timestep_shapes():
    enc = make_encoder()
    x, mask = pad_sequences([np.ones((1, 5))])
    h = enc.embed_inputs(x, mask, EVAL)
    assert h.shape == (1, 1, 16)
    latent, h_trans, attn = enc(x, mask, EVAL)
    assert latent.shape == (1, 16)
    assert attn.shape == (1, 4, 1, 1)
    np.testing.assert_array_equal(attn, 1.0)


def test_relu_zeroes_negative_inputs():
    enc = ModalityEncoder("enc", 16, np.random.default_rng(0))
    enc.inp.weight.data[:] = np.eye(16)
    enc.inp.bias.data[:] = 0
    x = -np.abs(np.random.default_rng(1).normal(size=(1, 3, 16)))
    np.testing.assert_array_equal(ops.relu(enc.inp(x)).data, 0.0)


def test_wrong_feature_dim_rejected():
    with pytest.raises(ValueError):
        make_encoder(d=5).embed_inputs(np.ones((1, 2, 4)), np.ones((1, 2), bool), EVAL)


def test_masked_positions_get_no_attention_and_rows_sum_to_one():
    enc = make_encoder()
    x, mask = batch()
    _, _, attn = enc(x, mask, EVAL)
    for b in range(x.shape[0]):
        np.testing.assert_array_equal(attn[b][..., ~mask[b]], 0.0)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_all_masked_sequence_is_error():
    enc = make_encoder()
    x = np.ones((1, 3, 5))
    with pytest.raises(ValueError):
        enc.transformer_encode(ops.reshape(np.ones((1, 3, 16)), (1, 3, 16)), np.zeros((1, 3), bool))
    with pytest.raises(ValueError):
        enc.max_pool_latent(np.ones((1, 3, 16)), np.zeros((1, 3), bool))
    del x


def test_permutation_equivariance_without_positions():
    enc = make_encoder(positional=False)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 6, 5))
    mask = np.ones((1, 6), bool)
    perm = rng.permutation(6)
    h = enc.transformer_encode(enc.embed_inputs(x, mask, EVAL), mask)[0].data
    hp = enc.transformer_encode(enc.embed_inputs(x[:, perm], mask, EVAL), mask)[0].data
    np.testing.assert_allclose(hp, h[:, perm], atol=1e-12)


def test_positions_break_equivariance():
    enc = make_encoder(positional=True)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 6, 5))
    mask = np.ones((1, 6), bool)
    perm = np.array([1, 0, 2, 3, 4, 5])
    h = enc.transformer_encode(enc.embed_inputs(x, mask, EVAL), mask)[0].data
    hp = enc.transformer_encode(enc.embed_inputs(x[:, perm], mask, EVAL), mask)[0].data
    assert not np.allclose(hp, h[:, perm])


def test_max_pool_examples():
    # [d x T] layout in the example; the encoder works on [T x d]
    h = np.array([[1.0, 5.0, 3.0], [2.0, 0.0, 4.0]]).T[None]
    np.testing.assert_array_equal(ModalityEncoder.max_pool_latent(h, np.ones((1, 3), bool)).data,
                                  [[5.0, 4.0]])
    np.testing.assert_array_equal(
        ModalityEncoder.max_pool_latent(h[:, :1], np.ones((1, 1), bool)).data, [[1.0, 2.0]])
    hidden = np.array([[True, False, True]])
    np.testing.assert_array_equal(ModalityEncoder.max_pool_latent(h, hidden).data, [[3.0, 4.0]])


def test_temporal_attention_examples():
    uniform = AttentionRecord(np.full((4, 4, 4), 0.25))
    np.testing.assert_allclose(temporal_attention(uniform), [0.25] * 4)
    row = np.array([[[0.1, 0.6, 0.3]]])
    np.testing.assert_array_equal(temporal_attention(AttentionRecord(row)), row[0, 0])
    two = AttentionRecord(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    np.testing.assert_array_equal(temporal_attention(two), [0.5, 0.5])


def test_temporal_attention_from_encoder_sums_to_one():
    enc = make_encoder()
    x, mask = batch(lengths=(7, 3))
    _, _, attn = enc(x, mask, EVAL)
    for rec, n in zip(split_records(attn, mask), (7, 3)):
        a = temporal_attention(rec)
        assert a.shape == (n,)
        assert np.all(a >= 0)
        assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_padding_then_masking_matches_unpadded():
    rng = np.random.default_rng(8)
    enc = make_encoder()
    enc.bn.running_mean[:] = rng.normal(size=16)
    enc.bn.running_var[:] = rng.uniform(0.5, 2, 16)
    seq = rng.normal(size=(4, 5))
    alone = enc(seq[None], np.ones((1, 4), bool), EVAL)[0].data
    x, mask = pad_sequences([seq, rng.normal(size=(9, 5))])
    x[0, 4:] = 1e3  # garbage in the padding must not matter
    padded = enc(x, mask, EVAL)[0].data
    np.testing.assert_allclose(padded[0], alone[0], atol=1e-10)


def test_encoder_gradient_check():
    enc = make_encoder(d=3, seed=1)
    rng = np.random.default_rng(2)
    enc.bn.running_mean[:] = rng.normal(size=16) * 0.1
    enc.bn.running_var[:] = rng.uniform(0.5, 2, 16)
    x, mask = batch(seed=3, lengths=(3, 2), d=3)
    proj = rng.normal(size=(2, 16)) * 0.1

    def build(inp, ctx):
        latent, _, _ = enc(inp["x"].data, mask, ctx)
        return {"loss": ops.sum(ops.mul(latent, proj))}

    report = grad_check(DiffGraph(build, enc.parameters()), {"x": x}, "loss", eps=1e-3, tol=1e-4)
    assert report.passed, report
