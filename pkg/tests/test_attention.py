import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xstitch.attention import (
    MultiHeadParams, cross_attention_block, cross_block_backward, cross_block_forward,
    init_block, multi_head_attention, rel_index, scaled_dot_attention, self_attention_block,
    self_block_backward, self_block_forward,
)
from xstitch.tensor import ConfigError, ParamStore, Rng, grad_check, softmax_rows


def random_mhp(d, h, seed):
    r = np.random.default_rng(seed)
    w = lambda: r.normal(scale=0.5, size=(d, d))  # noqa: E731
    b = lambda: r.normal(scale=0.1, size=d)  # noqa: E731
    return MultiHeadParams(h, w(), w(), w(), w(), b(), np.zeros(d), b(), b())


def per_head_oracle(p, xq, xkv, rel=None):
    """Loops heads with explicit W_Q^n, W_K^n, W_V^n slices and the output filter W_o."""
    d = p.d_model
    dh = d // p.h
    heads = []
    for n in range(p.h):
        sl = slice(n * dh, (n + 1) * dh)
        q = xq @ p.w_q[:, sl] + p.b_q[sl]
        k = xkv @ p.w_k[:, sl] + p.b_k[sl]
        v = xkv @ p.w_v[:, sl] + p.b_v[sl]
        if rel is None:
            heads.append(scaled_dot_attention(q, k, v)[0])
        else:
            k_max = (rel.shape[0] - 1) // 2
            s = np.zeros((len(q), len(k)))
            for i in range(len(q)):
                for j in range(len(k)):
                    a = rel[min(max(j - i, -k_max), k_max) + k_max]
                    s[i, j] = q[i] @ (k[j] + a) / math.sqrt(dh)
            heads.append(softmax_rows(s) @ v)
    return np.concatenate(heads, axis=-1) @ p.w_o + p.b_o


# ---------------------------------------------------------------- scaled dot attention


def test_single_key():
    q = np.array([[0.3, -2.0], [5.0, 1.0]])
    v0 = np.array([[7.0, -1.0, 2.0]])
    out, w = scaled_dot_attention(q, np.array([[1.0, 1.0]]), v0)
    assert w.tolist() == [[1.0], [1.0]]
    np.testing.assert_array_equal(out, np.repeat(v0, 2, axis=0))


def test_hand_softmax_case():
    out, w = scaled_dot_attention(np.array([[1.0, 0.0]]), np.eye(2), np.eye(2))
    e = math.exp(1 / math.sqrt(2))
    np.testing.assert_allclose(w, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    np.testing.assert_allclose(out, [[0.6698, 0.3302]], atol=1e-3)


def test_mask_hides_second_key():
    v = np.array([[1.5, -2.0], [100.0, 100.0]])
    out, w = scaled_dot_attention(np.array([[1.0, 0.0]]), np.eye(2), v,
                                  np.array([[True, False]]))
    assert w.tolist() == [[1.0, 0.0]]
    np.testing.assert_array_equal(out, v[:1])


def test_fully_masked_row_rejected():
    with pytest.raises(ValueError):
        scaled_dot_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)),
                             np.array([[True, False], [False, False]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_attention_is_convex_combination(tq, tk, d, seed):
    r = np.random.default_rng(seed)
    q, k, v = r.normal(size=(tq, d)) * 3, r.normal(size=(tk, d)) * 3, r.normal(size=(tk, 3))
    mask = r.random((tq, tk)) < 0.6
    mask[:, 0] = True
    out, w = scaled_dot_attention(q, k, v, mask)
    assert np.all(np.abs(w.sum(axis=-1) - 1) <= 1e-9)
    assert np.all(w[~mask] < 1e-9)
    for i in range(tq):
        vis = v[mask[i]]
        assert np.all(out[i] >= vis.min(axis=0) - 1e-12)
        assert np.all(out[i] <= vis.max(axis=0) + 1e-12)


# ---------------------------------------------------------------- multi-head


def test_single_head_identity_reduces_to_sdpa():
    d = 4
    eye, z = np.eye(d), np.zeros(d)
    p = MultiHeadParams(1, eye, eye, eye, eye, z, z, z, z)
    r = np.random.default_rng(5)
    xq, xkv = r.normal(size=(3, d)), r.normal(size=(5, d))
    np.testing.assert_allclose(multi_head_attention(p, xq, xkv),
                               scaled_dot_attention(xq, xkv, xkv)[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_multi_head_matches_per_head_oracle(seed):
    p = random_mhp(8, 4, seed)
    r = np.random.default_rng(100 + seed)
    xq, xkv = r.normal(size=(3, 8)), r.normal(size=(6, 8))
    np.testing.assert_allclose(multi_head_attention(p, xq, xkv), per_head_oracle(p, xq, xkv),
                               rtol=0, atol=1e-12)


def test_multi_head_with_relative_table_matches_oracle():
    p = random_mhp(8, 2, 11)
    r = np.random.default_rng(12)
    x = r.normal(size=(7, 8))
    rel = r.normal(size=(2 * 2 + 1, 4))
    np.testing.assert_allclose(multi_head_attention(p, x, x, rel=rel), per_head_oracle(p, x, x, rel),
                               rtol=0, atol=1e-12)


def test_relative_table_rejected_for_cross_attention():
    p = random_mhp(4, 2, 0)
    with pytest.raises(ConfigError):
        multi_head_attention(p, np.ones((2, 4)), np.ones((3, 4)), rel=np.zeros((3, 2)))


def test_heads_must_divide_width():
    p = random_mhp(6, 4, 0)
    with pytest.raises(ConfigError):
        multi_head_attention(p, np.ones((2, 6)), np.ones((2, 6)))


def test_key_permutation_invariance():
    p = random_mhp(8, 2, 3)
    r = np.random.default_rng(4)
    xq, xkv = r.normal(size=(3, 8)), r.normal(size=(6, 8))
    perm = r.permutation(6)
    np.testing.assert_allclose(multi_head_attention(p, xq, xkv),
                               multi_head_attention(p, xq, xkv[perm]), rtol=0, atol=1e-12)


def test_rel_index_clipped_in_range():
    idx = rel_index(20, 20, 8)
    assert idx.min() == 0 and idx.max() == 16
    assert idx[0, 0] == 8 and idx[0, 19] == 16 and idx[19, 0] == 0


# ---------------------------------------------------------------- blocks


def make_block(d=8, h=2, seed=0, k_max=None, noisy=True):
    ps = ParamStore()
    init_block(ps, "b", d, h, Rng(seed), k_max=k_max)
    if noisy:
        r = np.random.default_rng(seed)
        for _, p in ps.items():
            p.value += r.normal(scale=0.3, size=p.value.shape)
    return ps


def zero_output_projections(ps, prefix="b"):
    for n in (".attn.wo", ".attn.bo", ".ffn.w2", ".ffn.b2"):
        ps[prefix + n][...] = 0.0


def test_self_block_zeroed_projections_is_identity():
    ps = make_block(k_max=3)
    zero_output_projections(ps)
    x = np.random.default_rng(1).normal(size=(5, 8))
    np.testing.assert_array_equal(self_attention_block(ps, "b", x, 2, rel=True), x)


@pytest.mark.parametrize("T", [1, 5, 17])
def test_self_block_shape(T):
    ps = make_block()
    assert self_attention_block(ps, "b", np.ones((T, 8)), 2).shape == (T, 8)


def test_self_block_gradients():
    ps = make_block(k_max=2)
    r = np.random.default_rng(2)
    x = r.normal(size=(2, 6, 8))
    mask = np.ones((2, 6), dtype=bool)
    mask[1, 4:] = False

    def loss(p):
        return float(self_block_forward(p, "b", x, mask, 2, rel=True)[0].mean())

    def lg(p):
        p.zero_grad()
        out, cache = self_block_forward(p, "b", x, mask, 2, rel=True)
        self_block_backward(p, "b", cache, np.full(out.shape, 1.0 / out.size))
        return float(out.mean())

    rep = grad_check(lg, loss, ps)
    assert rep.passed, rep.lines()


def test_self_block_input_gradient():
    ps = make_block()
    x = np.random.default_rng(3).normal(size=(1, 4, 8))
    mask = np.ones((1, 4), dtype=bool)
    w = np.random.default_rng(4).normal(size=(1, 4, 8))
    out, cache = self_block_forward(ps, "b", x, mask, 2)
    dx = self_block_backward(ps, "b", cache, w)
    h = 1e-6
    for idx in [(0, 0, 0), (0, 2, 5), (0, 3, 7)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = ((self_block_forward(ps, "b", xp, mask, 2)[0] * w).sum()
              - (self_block_forward(ps, "b", xm, mask, 2)[0] * w).sum()) / (2 * h)
        assert abs(fd - dx[idx]) < 1e-6


def test_cross_block_single_key_same_value_for_all_queries():
    ps = make_block()
    r = np.random.default_rng(5)
    q, kv = r.normal(size=(4, 8)), r.normal(size=(1, 8))
    a = kv @ ps["b.attn.wv"] + ps["b.attn.bv"]
    expected_att = a @ ps["b.attn.wo"] + ps["b.attn.bo"]
    _, cache = cross_block_forward(ps, "b", q[None], kv[None], np.ones((1, 1), bool), 2)
    att_out = cache[1]
    # recompute the attention sublayer directly from its cache
    ctx = att_out[6][0]
    np.testing.assert_allclose(ctx @ ps["b.attn.wo"] + ps["b.attn.bo"],
                               np.repeat(expected_att, 4, axis=0), atol=1e-12)


def test_cross_block_key_order_invariance():
    ps = make_block()
    r = np.random.default_rng(6)
    q, kv = r.normal(size=(3, 8)), r.normal(size=(7, 8))
    perm = r.permutation(7)
    np.testing.assert_allclose(cross_attention_block(ps, "b", q, kv, 2),
                               cross_attention_block(ps, "b", q, kv[perm], 2), rtol=0, atol=1e-12)


def test_cross_block_matches_oracle():
    ps = make_block(d=4, h=2, seed=7)
    r = np.random.default_rng(8)
    q, kv = r.normal(size=(3, 4)), r.normal(size=(5, 4))
    p = MultiHeadParams.from_store(ps, "b", 2)

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    y = q + per_head_oracle(p, ln(q, ps["b.ln1.g"], ps["b.ln1.b"]), kv)
    z = ln(y, ps["b.ln2.g"], ps["b.ln2.b"])
    expected = y + gelu(z @ ps["b.ffn.w1"] + ps["b.ffn.b1"]) @ ps["b.ffn.w2"] + ps["b.ffn.b2"]
    np.testing.assert_allclose(cross_attention_block(ps, "b", q, kv, 2), expected, atol=1e-12)


def test_cross_block_gradients():
    ps = make_block(seed=9)
    r = np.random.default_rng(10)
    q, kv = r.normal(size=(2, 3, 8)), r.normal(size=(2, 5, 8))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)

    def loss(p):
        return float(cross_block_forward(p, "b", q, kv, mask, 2)[0].mean())

    def lg(p):
        p.zero_grad()
        out, cache = cross_block_forward(p, "b", q, kv, mask, 2)
        cross_block_backward(p, "b", cache, np.full(out.shape, 1.0 / out.size))
        return float(out.mean())

    rep = grad_check(lg, loss, ps)
    assert rep.passed, rep.lines()
