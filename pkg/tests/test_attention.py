import math

import numpy as np
import pytest

from d2sdk import attention as attn
from d2sdk import autodiff as ad
from d2sdk.autodiff import Tensor
from d2sdk.errors import ConfigError, DimensionError


def identity_mha(d, h=1):
    eye = lambda: Tensor(np.eye(d), requires_grad=True)  # noqa: E731
    zero = lambda: Tensor(np.zeros(d), requires_grad=True)  # noqa: E731
    return attn.MhaParams(eye(), eye(), eye(), eye(), zero(), zero(), zero(), zero(), h)


def randomize(params_obj, rng, scale=0.5):
    """Perturb every tensor of a parameter dataclass (biases and LN included)."""
    for t in params_obj.tensors().values():
        t.data[...] += rng.normal(scale=scale, size=t.shape)
    return params_obj


# --- sdp_attention --------------------------------------------------------------

def test_single_key_returns_value():
    out = attn.sdp_attention(Tensor([[0.3, -2.0]]), Tensor([[1.0, 4.0]]), Tensor([[7.0, -1.0, 2.5]]))
    np.testing.assert_array_equal(out.data, [[7.0, -1.0, 2.5]])


def test_uniform_scores_average_values():
    out = attn.sdp_attention(Tensor([[0.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], rtol=1e-15)


def test_peaked_scores_against_arbitrary_precision():
    v = np.array([[2.0, -1.0], [-3.0, 5.0]])
    out, w = attn.sdp_attention(Tensor([[10.0, 0.0]]), Tensor(np.eye(2)), Tensor(v), return_weights=True)
    # frozen from mpmath: softmax([10/sqrt(2), 0])
    expected_w = np.array([0.99915139503728881316, 0.0008486049627111868372])
    np.testing.assert_allclose(w.data[0], expected_w, rtol=1e-13)
    np.testing.assert_allclose(out.data[0], expected_w @ v, rtol=1e-13)


def test_sdp_dimension_errors():
    with pytest.raises(DimensionError):
        attn.sdp_attention(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    with pytest.raises(DimensionError):
        attn.sdp_attention(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))


# --- mha ------------------------------------------------------------------------

def test_identity_projections_reduce_to_sdp():
    rng = np.random.default_rng(0)
    q, kv = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 4)))
    out = attn.mha(q, kv, kv, identity_mha(4))
    np.testing.assert_allclose(out.data, attn.sdp_attention(q, kv, kv).data, atol=1e-14)


def test_single_key_mha_ignores_query():
    rng = np.random.default_rng(1)
    p = randomize(attn.init_mha(rng, 4, 2), rng)
    key = Tensor(rng.normal(size=(1, 4)))
    expected = (key.data @ p.w_v.data + p.b_v.data) @ p.w_o.data + p.b_o.data
    for _ in range(3):
        out = attn.mha(Tensor(rng.normal(size=(1, 4))), key, key, p)
        np.testing.assert_allclose(out.data, expected, atol=1e-13)


def test_two_heads_match_blocked_reference():
    rng = np.random.default_rng(2)
    d, h = 6, 2
    p = randomize(attn.init_mha(rng, d, h), rng)
    q, kv = Tensor(rng.normal(size=(2, d))), Tensor(rng.normal(size=(5, d)))
    out = attn.mha(q, kv, kv, p).data

    qp = q.data @ p.w_q.data + p.b_q.data
    kp = kv.data @ p.w_k.data + p.b_k.data
    vp = kv.data @ p.w_v.data + p.b_v.data
    dh = d // h
    heads = [
        attn.sdp_attention(Tensor(qp[:, j * dh:(j + 1) * dh]), Tensor(kp[:, j * dh:(j + 1) * dh]),
                           Tensor(vp[:, j * dh:(j + 1) * dh])).data
        for j in range(h)
    ]
    ref = np.concatenate(heads, axis=1) @ p.w_o.data + p.b_o.data
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        attn.init_mha(np.random.default_rng(0), 6, 4)
    p = identity_mha(6, 4)
    with pytest.raises(ConfigError):
        attn.mha(Tensor(np.ones((1, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), p)


def test_mha_without_biases():
    rng = np.random.default_rng(3)
    p = attn.init_mha(rng, 4, 2, bias=False)
    assert set(p.tensors()) == {"w_q", "w_k", "w_v", "w_o"}
    x = Tensor(rng.normal(size=(3, 4)))
    assert attn.mha(x, x, x, p).shape == (3, 4)


def test_attention_weights_row_stochastic():
    rng = np.random.default_rng(4)
    p = randomize(attn.init_mha(rng, 8, 4), rng)
    w = attn.attention_weights(Tensor(rng.normal(size=(5, 2, 8))), Tensor(rng.normal(size=(5, 3, 8))), p)
    assert w.shape == (5, 4, 2, 3)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_mha_gradient_check():
    rng = np.random.default_rng(5)
    p = randomize(attn.init_mha(rng, 4, 2), rng)
    q = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    kv = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)))
    rep = ad.gradient_check(lambda q, kv, *_: ad.sum(ad.mul(attn.mha(q, kv, kv, p), w)),
                            [q, kv] + list(p.tensors().values()), tol=1e-4)
    assert rep.passed, rep


# --- layers -----------------------------------------------------------------------

@pytest.fixture
def enc_layer():
    rng = np.random.default_rng(6)
    return randomize(attn.init_encoder_layer(rng, 8, 2, 16), rng, 0.2)


@pytest.fixture
def dec_layer():
    rng = np.random.default_rng(7)
    return randomize(attn.init_decoder_layer(rng, 8, 2, 16), rng, 0.2)


def test_encoder_single_token(enc_layer):
    x = Tensor(np.random.default_rng(0).normal(size=(1, 8)))
    out = attn.encoder_layer(x, enc_layer)
    assert out.shape == (1, 8)
    assert np.all(np.isfinite(out.data))


def test_encoder_permutation_equivariance(enc_layer):
    x = np.random.default_rng(1).normal(size=(3, 8))
    perm = [2, 0, 1]
    a = attn.encoder_layer(Tensor(x), enc_layer).data
    b = attn.encoder_layer(Tensor(x[perm]), enc_layer).data
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


def test_encoder_gradient_check(enc_layer):
    x = Tensor(np.random.default_rng(2).normal(size=(3, 8)), requires_grad=True)
    w = Tensor(np.random.default_rng(3).normal(size=(3, 8)))
    rep = ad.gradient_check(lambda x, *_: ad.sum(ad.mul(attn.encoder_layer(x, enc_layer), w)),
                            [x] + list(enc_layer.tensors().values()), tol=1e-4)
    assert rep.passed, rep


def test_identical_memory_rows_fix_cross_attention_output(dec_layer):
    rng = np.random.default_rng(4)
    m = rng.normal(size=(1, 8))
    memory = Tensor(np.repeat(m, 3, axis=0))
    p = dec_layer.cross_attn
    expected = (m @ p.w_v.data + p.b_v.data) @ p.w_o.data + p.b_o.data
    for _ in range(3):
        out = attn.mha(Tensor(rng.normal(size=(1, 8))), memory, memory, p)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_decoder_memory_permutation_invariance(dec_layer):
    rng = np.random.default_rng(5)
    q, mem = rng.normal(size=(1, 8)), rng.normal(size=(4, 8))
    a = attn.decoder_layer(Tensor(q), Tensor(mem), dec_layer).data
    b = attn.decoder_layer(Tensor(q), Tensor(mem[[3, 1, 0, 2]]), dec_layer).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_decoder_gradient_check(dec_layer):
    rng = np.random.default_rng(6)
    q = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    mem = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 8)))
    rep = ad.gradient_check(lambda q, mem, *_: ad.sum(ad.mul(attn.decoder_layer(q, mem, dec_layer), w)),
                            [q, mem] + list(dec_layer.tensors().values()), tol=1e-4)
    assert rep.passed, rep


def test_decoder_without_self_attention_skips_block(dec_layer):
    rng = np.random.default_rng(7)
    q, mem = Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(3, 8)))
    x = attn._post_ln(q, attn.mha(q, mem, mem, dec_layer.cross_attn), dec_layer.ln2)
    expected = attn._post_ln(x, attn.mlp(x, dec_layer.mlp), dec_layer.ln3)
    out = attn.decoder_layer(q, mem, dec_layer, self_attn=False)
    np.testing.assert_array_equal(out.data, expected.data)


def test_convex_hull_of_one_dimensional_values():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        v = rng.normal(size=(n, 1))
        out = attn.sdp_attention(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(n, 2))), Tensor(v)).data
        assert np.all(out >= v.min() - 1e-12) and np.all(out <= v.max() + 1e-12)


def test_degenerate_cross_attention_block_is_ln_of_convex_combination():
    rng = np.random.default_rng(9)
    d = 4
    p = attn.init_decoder_layer(rng, d, 1, 8)
    p.cross_attn = identity_mha(d)
    for t in p.mlp.tensors().values():
        t.data[...] = 0.0
    q, mem = rng.normal(size=(1, d)), rng.normal(size=(3, d))
    x = attn.mha(Tensor(q), Tensor(q), Tensor(q), p.self_attn).data + q
    x = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    s = x @ mem.T / math.sqrt(d)
    w = np.exp(s - s.max())
    w /= w.sum()
    y = x + w @ mem
    y = (y - y.mean()) / np.sqrt(y.var() + 1e-5)
    y = (y - y.mean()) / np.sqrt(y.var() + 1e-5)  # zero MLP: third block re-normalizes
    out = attn.decoder_layer(Tensor(q), Tensor(mem), p).data
    np.testing.assert_allclose(out, y, atol=1e-9)


# --- stacks -----------------------------------------------------------------------

def test_empty_stacks_are_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
    assert attn.encoder_stack(x, []) is x
    q = Tensor(np.ones((1, 8)))
    assert attn.decoder_stack(q, x, [], L=0) is q


def test_stack_of_two_equals_manual_composition():
    rng = np.random.default_rng(1)
    enc = [attn.init_encoder_layer(rng, 8, 2, 16) for _ in range(2)]
    dec = [attn.init_decoder_layer(rng, 8, 2, 16) for _ in range(2)]
    x, q = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(1, 8)))
    mem = attn.encoder_stack(x, enc)
    np.testing.assert_array_equal(mem.data, attn.encoder_layer(attn.encoder_layer(x, enc[0]), enc[1]).data)
    out = attn.decoder_stack(q, mem, dec)
    manual = attn.decoder_layer(attn.decoder_layer(q, mem, dec[0]), mem, dec[1])
    np.testing.assert_array_equal(out.data, manual.data)


@pytest.mark.parametrize("L", [2, 3, 4, 5])
def test_depth_sweep_runs_on_three_tokens(L):
    rng = np.random.default_rng(L)
    enc = [attn.init_encoder_layer(rng, 8, 2, 16) for _ in range(L)]
    dec = [attn.init_decoder_layer(rng, 8, 2, 16) for _ in range(L)]
    mem = attn.encoder_stack(Tensor(rng.normal(size=(4, 3, 8))), enc, L)
    out = attn.decoder_stack(Tensor(rng.normal(size=(4, 1, 8))), mem, dec, L)
    assert mem.shape == (4, 3, 8) and out.shape == (4, 1, 8)


def test_stack_depth_out_of_range():
    with pytest.raises(ConfigError):
        attn.encoder_stack(Tensor(np.ones((2, 4))), [], L=1)


def test_batched_and_unbatched_agree(enc_layer):
    x = np.random.default_rng(2).normal(size=(2, 3, 8))
    batched = attn.encoder_layer(Tensor(x), enc_layer).data
    for b in range(2):
        np.testing.assert_allclose(batched[b], attn.encoder_layer(Tensor(x[b]), enc_layer).data, atol=1e-13)
