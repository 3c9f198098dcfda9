import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifc_lab import tensor as T
from ifc_lab.complexity import layer_macs
from ifc_lab.layers import Module
from ifc_lab.tensor import ContractError, Tensor
from ifc_lab.transformer import (AttentionConfig, DecoderLayer, EncoderLayer, MultiHeadAttention,
                                 sinusoidal_1d, sinusoidal_2d)


def make_attn(C=8, h=2, seed=0):
    return MultiHeadAttention(AttentionConfig(C, h, max(C, 16), 0.0), np.random.default_rng(seed))


def test_config_invariants():
    with pytest.raises(ContractError):
        AttentionConfig(10, 4)
    with pytest.raises(ContractError):
        AttentionConfig(64, 4, ffn_dim=32)


def test_single_key_ignores_query():
    attn = make_attn()
    attn.keep_weights = True
    rng = np.random.default_rng(1)
    k = Tensor(rng.normal(size=(1, 8)))
    out1 = attn(Tensor(rng.normal(size=(3, 8))), k, k).data
    assert np.all(attn.last_weights == 1.0)
    out2 = attn(Tensor(rng.normal(size=(3, 8))), k, k).data
    expected = attn.out_proj(attn.v_proj(k)).data
    np.testing.assert_allclose(out1, np.broadcast_to(expected, out1.shape), atol=1e-12)
    np.testing.assert_allclose(out2, out1, atol=1e-12)


def test_identical_keys_give_uniform_weights():
    attn = make_attn()
    attn.keep_weights = True
    k = Tensor(np.tile(np.random.default_rng(2).normal(size=(1, 8)), (5, 1)))
    attn(Tensor(np.random.default_rng(3).normal(size=(4, 8))), k, k)
    np.testing.assert_allclose(attn.last_weights, 0.2, atol=1e-15)


def test_hand_computed_two_token_attention():
    attn = MultiHeadAttention(AttentionConfig(2, 1, 2, 0.0), np.random.default_rng(0))
    for lin in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
        lin.weight.data[:] = np.eye(2)
        if lin.bias is not None:
            lin.bias.data[:] = 0.0
    q = Tensor([[1.0, 0.0]])
    k = Tensor([[1.0, 0.0], [0.0, 1.0]])
    v = Tensor([[2.0, 0.0], [0.0, 4.0]])
    out = attn(q, k, v).data
    s = np.array([1.0, 0.0]) / np.sqrt(2.0)
    w = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(out[0], w[0] * v.data[0] + w[1] * v.data[1], atol=1e-14)


def test_key_projection_has_no_bias():
    # a per-query constant added to all logits cancels in the softmax
    assert make_attn().k_proj.bias is None


def test_zero_keys_rejected():
    attn = make_attn()
    with pytest.raises(ContractError):
        attn(Tensor(np.ones((2, 8))), Tensor(np.ones((0, 8))), Tensor(np.ones((0, 8))))


@given(st.integers(1, 4), st.integers(1, 7), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_attention_rows_sum_to_one(nq, nk, seed):
    attn = make_attn(seed=seed % 97)
    attn.keep_weights = True
    rng = np.random.default_rng(seed)
    kv = Tensor(rng.normal(size=(nk, 8)) * 3)
    attn(Tensor(rng.normal(size=(nq, 8)) * 3), kv, kv)
    np.testing.assert_allclose(attn.last_weights.sum(-1), 1.0, atol=1e-9)


def test_encoder_layer_shape_and_determinism():
    cfg = AttentionConfig(256, 8, 512, 0.0)
    layer = EncoderLayer(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(248, 256)))
    pos = sinusoidal_1d(248, 256)
    with T.no_grad():
        a, b = layer(x, pos).data, layer(x, pos).data
    assert a.shape == (248, 256)
    assert np.array_equal(a, b)


def test_encoder_layer_ledger_matches_analytic_count():
    C, N, F = 32, 37, 64
    layer = EncoderLayer(AttentionConfig(C, 4, F, 0.0), np.random.default_rng(0))
    T.flop_reset()
    with T.no_grad():
        layer(Tensor(np.random.default_rng(1).normal(size=(N, C))))
    measured = T.flop_snapshot()["matmul"]
    analytic = sum(layer_macs(N, C, F))
    assert abs(measured - analytic) / analytic < 0.01


def test_encoder_layer_permutation_equivariance():
    layer = EncoderLayer(AttentionConfig(8, 2, 16, 0.0), np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(6, 8))
    perm = np.random.default_rng(6).permutation(6)
    with T.no_grad():
        a = layer(Tensor(x)).data
        b = layer(Tensor(x[perm])).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_dropout_only_in_training():
    layer = EncoderLayer(AttentionConfig(8, 2, 16, 0.5), np.random.default_rng(0), np.random.default_rng(1))
    x = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
    Module.eval(layer)
    assert np.array_equal(layer(x).data, layer(x).data)
    Module.train(layer)
    assert not np.array_equal(layer(x).data, layer(x).data)


def test_decoder_layer_shapes_and_single_key_closed_form():
    cfg = AttentionConfig(16, 4, 32, 0.0)
    layer = DecoderLayer(cfg, np.random.default_rng(0))
    layer.cross_attn.keep_weights = True
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=(20, 16)))
    mem = Tensor(rng.normal(size=(30, 16)))
    out = layer(q, mem)
    assert out.shape == (20, 16)
    np.testing.assert_allclose(layer.cross_attn.last_weights.sum(-1), 1.0, atol=1e-12)
    single = Tensor(rng.normal(size=(1, 16)))
    layer(q, single)
    assert np.all(layer.cross_attn.last_weights == 1.0)
    c1 = layer.cross_attn(Tensor(rng.normal(size=(3, 16))), single, single).data
    c2 = layer.cross_attn(Tensor(rng.normal(size=(3, 16))), single, single).data
    np.testing.assert_allclose(c1, c2, atol=1e-12)
    with pytest.raises(ContractError):
        layer(q, Tensor(np.zeros((0, 16))))


def test_sinusoid_tables():
    t1 = sinusoidal_1d(10, 8).table
    np.testing.assert_array_equal(t1[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.all(np.abs(t1) <= 1)
    assert np.all(np.linalg.norm(t1, axis=1) <= np.sqrt(8) + 1e-12)
    t2 = sinusoidal_2d(4, 6, 16).table
    assert t2.shape == (24, 16)
    assert np.all(np.linalg.norm(t2, axis=1) <= 4.0 + 1e-12)
    with pytest.raises(ContractError):
        sinusoidal_2d(2, 2, 6)
    with pytest.raises(ContractError):
        sinusoidal_1d(2, 3)


@pytest.mark.parametrize("n", [2, 16, 64])
def test_sinusoid_rows_distinct(n):
    for table in (sinusoidal_1d(n, 64).table, sinusoidal_2d(n if n <= 16 else 8, n, 64).table):
        rounded = {tuple(np.round(r, 12)) for r in table}
        assert len(rounded) == len(table)
