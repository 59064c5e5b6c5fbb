"""Scaled dot-product and multi-head attention, pre-LN self/cross blocks.

Batched tensors are laid out ``(B, T, d)``; key masks are boolean ``(B, T_k)``
with True marking real positions.  A block's parameters live in a
:class:`ParamStore` under a dotted prefix::

    <prefix>.ln1.g  <prefix>.ln1.b
    <prefix>.attn.wq .bq .wk .wv .bv .wo .bo   (no key bias)
    <prefix>.rel                      (optional, (2*k_max+1, d_head))
    <prefix>.ln2.g  <prefix>.ln2.b
    <prefix>.ffn.w1 .b1 .w2 .b2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE, MASK_FILL, ConfigError, DimensionError, ParamStore, Rng,
    gelu, gelu_backward, layer_norm_backward, layer_norm_forward,
    linear_backward, softmax_backward, softmax_rows,
)

INIT_STD = 0.02
FFN_RATIO = 4
DEFAULT_K_MAX = 8


@dataclass(frozen=True)
class MultiHeadParams:
    """Unbatched view of one attention layer's projections."""
    h: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def from_store(cls, ps: ParamStore, prefix: str, h: int) -> "MultiHeadParams":
        a = prefix + ".attn"
        return cls(h, ps[a + ".wq"], ps[a + ".wk"], ps[a + ".wv"], ps[a + ".wo"],
                   ps[a + ".bq"], np.zeros_like(ps[a + ".bq"]), ps[a + ".bv"], ps[a + ".bo"])


def check_heads(d_model: int, h: int) -> int:
    if h < 1 or d_model % h != 0:
        raise ConfigError(f"d_model={d_model} is not divisible by h={h}")
    return d_model // h


def rel_index(t_q: int, t_k: int, k_max: int) -> np.ndarray:
    """Offset-table row for each (query i, key j): clip(j - i, -k_max, k_max) + k_max."""
    off = np.arange(t_k)[None, :] - np.arange(t_q)[:, None]
    return np.clip(off, -k_max, k_max) + k_max


def _rel_onehot(t_q: int, t_k: int, k_max: int) -> np.ndarray:
    idx = rel_index(t_q, t_k, k_max)
    oh = np.zeros((t_q, t_k, 2 * k_max + 1), dtype=DTYPE)
    oh[np.arange(t_q)[:, None], np.arange(t_k)[None, :], idx] = 1.0
    return oh


# ---------------------------------------------------------------- init


def init_attention(ps: ParamStore, prefix: str, d_model: int, rng: Rng) -> None:
    a = prefix + ".attn"
    for w in ("q", "k", "v", "o"):
        ps.add(f"{a}.w{w}", rng.normal_array((d_model, d_model), INIT_STD))
        # a key bias only shifts each score row by a constant, so it is omitted
        if w != "k":
            ps.add(f"{a}.b{w}", np.zeros(d_model))


def init_block(ps: ParamStore, prefix: str, d_model: int, h: int, rng: Rng,
               k_max: int | None = None) -> None:
    d_head = check_heads(d_model, h)
    d_ff = FFN_RATIO * d_model
    ps.add(prefix + ".ln1.g", np.ones(d_model))
    ps.add(prefix + ".ln1.b", np.zeros(d_model))
    init_attention(ps, prefix, d_model, rng)
    if k_max is not None:
        ps.add(prefix + ".rel", rng.normal_array((2 * k_max + 1, d_head), INIT_STD))
    ps.add(prefix + ".ln2.g", np.ones(d_model))
    ps.add(prefix + ".ln2.b", np.zeros(d_model))
    ps.add(prefix + ".ffn.w1", rng.normal_array((d_model, d_ff), INIT_STD))
    ps.add(prefix + ".ffn.b1", np.zeros(d_ff))
    ps.add(prefix + ".ffn.w2", rng.normal_array((d_ff, d_model), INIT_STD))
    ps.add(prefix + ".ffn.b2", np.zeros(d_model))


# ---------------------------------------------------------------- single sequence


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Attention for one sequence: q (T_q, d), k (T_k, d), v (T_k, d_v).

    ``mask`` is a boolean (T_q, T_k) matrix of visible keys.  Returns
    ``(out, weights)``.
    """
    q = np.asarray(q, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"{k.shape[0]} keys but {v.shape[0]} values")
    scores = (q @ k.T) / np.sqrt(q.shape[-1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise DimensionError(f"mask shape {mask.shape} != scores shape {scores.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask hides every key for at least one query")
        scores = np.where(mask, scores, MASK_FILL)
    w = softmax_rows(scores)
    return w @ v, w


# ---------------------------------------------------------------- batched multi-head


def mha_forward(ps: ParamStore, prefix: str, xq: np.ndarray, xkv: np.ndarray,
                key_mask: np.ndarray, h: int, rel: bool = False, gate: np.ndarray | None = None):
    """Batched multi-head attention.

    ``gate`` (B,) optionally scales each sample's whole sublayer output; a zero
    gate is how a sample with no keys of the other modality opts out.
    """
    a = prefix + ".attn"
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    if xkv.shape[2] != d:
        raise DimensionError(f"query stream width {d} != key stream width {xkv.shape[2]}")
    dh = check_heads(d, h)
    scale = 1.0 / np.sqrt(dh)

    def split(x, T):
        return x.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

    q = split(xq @ ps[a + ".wq"] + ps[a + ".bq"], Tq)
    k = split(xkv @ ps[a + ".wk"], Tk)
    v = split(xkv @ ps[a + ".wv"] + ps[a + ".bv"], Tk)
    scores = q @ k.transpose(0, 1, 3, 2)
    onehot = None
    if rel:
        emb = ps[prefix + ".rel"]
        k_max = (emb.shape[0] - 1) // 2
        onehot = _rel_onehot(Tq, Tk, k_max)
        qr = q @ emb.T                                    # (B,h,Tq,R)
        scores = scores + (qr[:, :, :, None, :] @ onehot.transpose(0, 2, 1))[:, :, :, 0, :]
    scores = scores * scale
    visible = key_mask[:, None, None, :]
    scores = np.where(visible, scores, MASK_FILL)
    w = softmax_rows(scores)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    out = ctx @ ps[a + ".wo"] + ps[a + ".bo"]
    if gate is not None:
        out = out * gate[:, None, None]
    cache = (xq, xkv, q, k, v, w, ctx, visible, onehot, gate, h, scale)
    return out, cache


def mha_backward(ps: ParamStore, prefix: str, cache, dout: np.ndarray):
    """Accumulates parameter grads into ``ps``; returns (dxq, dxkv)."""
    a = prefix + ".attn"
    xq, xkv, q, k, v, w, ctx, visible, onehot, gate, h, scale = cache
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // h
    if gate is not None:
        dout = dout * gate[:, None, None]
    dctx, dwo, dbo = linear_backward(ctx, ps[a + ".wo"], dout)
    ps.accumulate(a + ".wo", dwo)
    ps.accumulate(a + ".bo", dbo)
    dctx = dctx.reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
    dw = dctx @ v.transpose(0, 1, 3, 2)
    dv = w.transpose(0, 1, 3, 2) @ dctx
    ds = softmax_backward(w, dw)
    ds = np.where(visible, ds, 0.0) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    if onehot is not None:
        emb = ps[prefix + ".rel"]
        dqr = (ds[:, :, :, None, :] @ onehot)[:, :, :, 0, :]   # (B,h,Tq,R)
        dq = dq + dqr @ emb
        ps.accumulate(prefix + ".rel",
                      dqr.reshape(-1, dqr.shape[-1]).T @ q.reshape(-1, dh))

    def merge(x, T):
        return x.transpose(0, 2, 1, 3).reshape(B, T, d)

    dxq, dwq, dbq = linear_backward(xq, ps[a + ".wq"], merge(dq, Tq))
    dxk, dwk, _ = linear_backward(xkv, ps[a + ".wk"], merge(dk, Tk))
    dxv, dwv, dbv = linear_backward(xkv, ps[a + ".wv"], merge(dv, Tk))
    ps.accumulate(a + ".wq", dwq)
    ps.accumulate(a + ".bq", dbq)
    ps.accumulate(a + ".wk", dwk)
    ps.accumulate(a + ".wv", dwv)
    ps.accumulate(a + ".bv", dbv)
    return dxq, dxk + dxv


def attention_weights(cache) -> np.ndarray:
    """Per-head weights (B, h, T_q, T_k) from an ``mha_forward`` cache."""
    return cache[5]


def multi_head_attention(p: MultiHeadParams, q_src: np.ndarray, kv_src: np.ndarray,
                         mask: np.ndarray | None = None, rel: np.ndarray | None = None,
                         self_attention: bool | None = None) -> np.ndarray:
    """Unbatched multi-head attention over (T, d_model) inputs.

    ``mask`` is (T_q, T_k) boolean; ``rel`` an offset table of shape
    (2*k_max+1, d_model/h) and only valid for self-attention.
    """
    check_heads(p.d_model, p.h)
    q_src = np.asarray(q_src, dtype=DTYPE)
    kv_src = np.asarray(kv_src, dtype=DTYPE)
    if self_attention is None:
        self_attention = q_src is kv_src
    if rel is not None and not self_attention:
        raise ConfigError("relative position table is only valid for self-attention")
    ps = ParamStore()
    for nm in ("wq", "wk", "wv", "wo", "bq", "bv", "bo"):
        ps.add("m.attn." + nm, getattr(p, nm[0] + "_" + nm[1]))
    # b_k is a per-row score constant and cancels in the softmax
    if rel is not None:
        ps.add("m.rel", rel)
    Tq, Tk = q_src.shape[0], kv_src.shape[0]
    if mask is None:
        mask = np.ones((Tq, Tk), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (Tq, Tk):
        raise DimensionError(f"mask shape {mask.shape} != ({Tq}, {Tk})")
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask hides every key for at least one query")
    # per-query masks go through the batched kernel one query row at a time
    # only when they differ between rows
    if (mask == mask[:1]).all():
        out, _ = mha_forward(ps, "m", q_src[None], kv_src[None], mask[:1], p.h, rel=rel is not None)
        return out[0]
    rows = []
    for i in range(Tq):
        o, _ = mha_forward(ps, "m", q_src[None], kv_src[None], mask[i:i + 1], p.h,
                           rel=rel is not None)
        rows.append(o[0, i])
    return np.stack(rows)


# ---------------------------------------------------------------- blocks


def _ffn_forward(ps, prefix, x):
    f = prefix + ".ffn"
    z, ln_cache = layer_norm_forward(x, ps[prefix + ".ln2.g"], ps[prefix + ".ln2.b"])
    h1 = z @ ps[f + ".w1"] + ps[f + ".b1"]
    g = gelu(h1)
    out = g @ ps[f + ".w2"] + ps[f + ".b2"]
    return out, (z, ln_cache, h1, g)


def _ffn_backward(ps, prefix, cache, dout):
    f = prefix + ".ffn"
    z, ln_cache, h1, g = cache
    dg, dw2, db2 = linear_backward(g, ps[f + ".w2"], dout)
    dh1 = gelu_backward(h1, dg)
    dz, dw1, db1 = linear_backward(z, ps[f + ".w1"], dh1)
    ps.accumulate(f + ".w2", dw2)
    ps.accumulate(f + ".b2", db2)
    ps.accumulate(f + ".w1", dw1)
    ps.accumulate(f + ".b1", db1)
    dx, dgam, dbet = layer_norm_backward(ln_cache, dz)
    ps.accumulate(prefix + ".ln2.g", dgam)
    ps.accumulate(prefix + ".ln2.b", dbet)
    return dx


def self_block_forward(ps: ParamStore, prefix: str, x: np.ndarray, mask: np.ndarray, h: int,
                       rel: bool = False):
    """y = x + MHA(LN1(x)); out = y + FFN(LN2(y))."""
    a, ln1 = layer_norm_forward(x, ps[prefix + ".ln1.g"], ps[prefix + ".ln1.b"])
    att, att_cache = mha_forward(ps, prefix, a, a, mask, h, rel=rel)
    y = x + att
    f, ffn_cache = _ffn_forward(ps, prefix, y)
    return y + f, (ln1, att_cache, ffn_cache)


def self_block_backward(ps: ParamStore, prefix: str, cache, dout: np.ndarray) -> np.ndarray:
    ln1, att_cache, ffn_cache = cache
    dy = dout + _ffn_backward(ps, prefix, ffn_cache, dout)
    dq, dkv = mha_backward(ps, prefix, att_cache, dy)
    da = dq + dkv
    dx, dg, db = layer_norm_backward(ln1, da)
    ps.accumulate(prefix + ".ln1.g", dg)
    ps.accumulate(prefix + ".ln1.b", db)
    return dy + dx


def cross_block_forward(ps: ParamStore, prefix: str, q_stream: np.ndarray, kv_stream: np.ndarray,
                        key_mask: np.ndarray, h: int, gate: np.ndarray | None = None):
    """y = q + MHA(LN1(q), kv); out = y + FFN(LN2(y)).  No positional bias."""
    a, ln1 = layer_norm_forward(q_stream, ps[prefix + ".ln1.g"], ps[prefix + ".ln1.b"])
    att, att_cache = mha_forward(ps, prefix, a, kv_stream, key_mask, h, gate=gate)
    y = q_stream + att
    f, ffn_cache = _ffn_forward(ps, prefix, y)
    return y + f, (ln1, att_cache, ffn_cache)


def cross_block_backward(ps: ParamStore, prefix: str, cache, dout: np.ndarray):
    """Returns (d_q_stream, d_kv_stream)."""
    ln1, att_cache, ffn_cache = cache
    dy = dout + _ffn_backward(ps, prefix, ffn_cache, dout)
    da, dkv = mha_backward(ps, prefix, att_cache, dy)
    dx, dg, db = layer_norm_backward(ln1, da)
    ps.accumulate(prefix + ".ln1.g", dg)
    ps.accumulate(prefix + ".ln1.b", db)
    return dy + dx, dkv


def self_attention_block(ps: ParamStore, prefix: str, x: np.ndarray, h: int,
                         mask: np.ndarray | None = None, rel: bool = False) -> np.ndarray:
    """Unbatched convenience wrapper: x is (T, d_model), mask (T,) of real positions."""
    x = np.asarray(x, dtype=DTYPE)
    if mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    out, _ = self_block_forward(ps, prefix, x[None], np.asarray(mask, bool)[None], h, rel=rel)
    return out[0]


def cross_attention_block(ps: ParamStore, prefix: str, q_stream: np.ndarray,
                          kv_stream: np.ndarray, h: int,
                          key_mask: np.ndarray | None = None) -> np.ndarray:
    q_stream = np.asarray(q_stream, dtype=DTYPE)
    kv_stream = np.asarray(kv_stream, dtype=DTYPE)
    if key_mask is None:
        key_mask = np.ones(kv_stream.shape[0], dtype=bool)
    out, _ = cross_block_forward(ps, prefix, q_stream[None], kv_stream[None],
                                 np.asarray(key_mask, bool)[None], h)
    return out[0]
