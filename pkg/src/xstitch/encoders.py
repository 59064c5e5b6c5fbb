"""Speech-frame and text-token encoders.

The speech encoder is a two-layer strided convolution frontend (kernel 3,
stride 2, padding 1, GELU) followed by pre-LN self-attention blocks.  The text
encoder is an embedding lookup followed by pre-LN blocks with relative
position offsets.  Both end with a layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    DEFAULT_K_MAX, INIT_STD, init_block, self_block_backward, self_block_forward,
)
from .optim import Adam
from .tensor import (
    DTYPE, ConfigError, DimensionError, ParamStore, Rng, gelu, gelu_backward,
    layer_norm_backward, layer_norm_forward, linear_backward, softmax_rows,
)

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[EOU]")
PAD, UNK, CLS, EOU = range(4)
MIN_FRAMES = 4


class InputTooShort(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass
class EncoderOutput:
    seq: np.ndarray        # (T, d) or (B, T, d)
    pad_mask: np.ndarray   # (T,) or (B, T); True = real position

    def __post_init__(self):
        if not np.asarray(self.pad_mask).any(axis=-1).all():
            raise ValueError("encoder output needs at least one real position")


def speech_length(t_in: int) -> int:
    """Frame count after the 4x downsampling frontend."""
    return math.ceil(math.ceil(t_in / 2) / 2)


# ---------------------------------------------------------------- init


def init_speech(ps: ParamStore, d_in: int, d_model: int, heads: int, layers: int, rng: Rng,
                prefix: str = "speech") -> None:
    if layers < 1:
        raise ConfigError("speech encoder needs at least one block")
    ps.add(prefix + ".conv1.w", rng.normal_array((3 * d_in, d_model), INIT_STD))
    ps.add(prefix + ".conv1.b", np.zeros(d_model))
    ps.add(prefix + ".conv2.w", rng.normal_array((3 * d_model, d_model), INIT_STD))
    ps.add(prefix + ".conv2.b", np.zeros(d_model))
    for i in range(layers):
        init_block(ps, f"{prefix}.block{i}", d_model, heads, rng)
    ps.add(prefix + ".final_ln.g", np.ones(d_model))
    ps.add(prefix + ".final_ln.b", np.zeros(d_model))


def init_text(ps: ParamStore, vocab_size: int, d_model: int, heads: int, layers: int, rng: Rng,
              k_max: int = DEFAULT_K_MAX, prefix: str = "text") -> None:
    if layers < 1:
        raise ConfigError("text encoder needs at least one block")
    ps.add(prefix + ".emb", rng.normal_array((vocab_size, d_model), INIT_STD))
    for i in range(layers):
        init_block(ps, f"{prefix}.block{i}", d_model, heads, rng, k_max=k_max)
    ps.add(prefix + ".final_ln.g", np.ones(d_model))
    ps.add(prefix + ".final_ln.b", np.zeros(d_model))


def count_blocks(ps: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.block{n}.ln1.g" in ps:
        n += 1
    return n


# ---------------------------------------------------------------- conv frontend


def _conv_forward(x, w, b):
    """Kernel 3, stride 2, zero padding 1 along axis 1 of (B, T, c)."""
    B, T, c = x.shape
    t_out = math.ceil(T / 2)
    xp = np.zeros((B, 2 * t_out + 1, c), dtype=DTYPE)
    xp[:, 1:T + 1] = x
    cols = np.concatenate([xp[:, 0:2 * t_out:2], xp[:, 1:2 * t_out + 1:2],
                           xp[:, 2:2 * t_out + 1:2]], axis=-1)
    pre = cols @ w + b
    return gelu(pre), (cols, pre, T)


def _conv_backward(w, cache, dy):
    cols, pre, T = cache
    dpre = gelu_backward(pre, dy)
    dcols, dw, db = linear_backward(cols, w, dpre)
    B, t_out, c3 = dcols.shape
    c = c3 // 3
    dxp = np.zeros((B, 2 * t_out + 1, c), dtype=DTYPE)
    dxp[:, 0:2 * t_out:2] += dcols[..., :c]
    dxp[:, 1:2 * t_out + 1:2] += dcols[..., c:2 * c]
    dxp[:, 2:2 * t_out + 1:2] += dcols[..., 2 * c:]
    return dxp[:, 1:T + 1], dw, db


def _length_mask(lengths, T) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


# ---------------------------------------------------------------- speech


def speech_forward(ps: ParamStore, frames: np.ndarray, lengths, heads: int, prefix: str = "speech",
                   layers: int | None = None):
    """Batched speech encoder.

    ``frames`` is (B, T_in, d_in) with zeros past each sample's length.
    Returns ``(seq, mask, cache)``; ``cache["taps"]`` holds each block's output.
    """
    frames = np.asarray(frames, dtype=DTYPE)
    B, T_in, d_in = frames.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < MIN_FRAMES:
        raise InputTooShort(f"speech input needs at least {MIN_FRAMES} frames, got {lengths.min()}")
    w1 = ps[prefix + ".conv1.w"]
    if w1.shape[0] != 3 * d_in:
        raise DimensionError(f"frames have {d_in} channels, encoder expects {w1.shape[0] // 3}")
    len1 = (lengths + 1) // 2
    len2 = (len1 + 1) // 2
    c1, cc1 = _conv_forward(frames, w1, ps[prefix + ".conv1.b"])
    m1 = _length_mask(len1, c1.shape[1])[..., None]
    c1m = c1 * m1
    x, cc2 = _conv_forward(c1m, ps[prefix + ".conv2.w"], ps[prefix + ".conv2.b"])
    mask = _length_mask(len2, x.shape[1])
    n = count_blocks(ps, prefix) if layers is None else layers
    block_caches, taps = [], []
    for i in range(n):
        x, bc = self_block_forward(ps, f"{prefix}.block{i}", x, mask, heads)
        block_caches.append(bc)
        taps.append(x)
    out, ln = layer_norm_forward(x, ps[prefix + ".final_ln.g"], ps[prefix + ".final_ln.b"])
    cache = {"cc1": cc1, "m1": m1, "cc2": cc2, "blocks": block_caches, "ln": ln,
             "taps": taps, "prefix": prefix}
    return out, mask, cache


def speech_backward(ps: ParamStore, cache, dout: np.ndarray) -> None:
    prefix = cache["prefix"]
    dx, dg, db = layer_norm_backward(cache["ln"], dout)
    ps.accumulate(prefix + ".final_ln.g", dg)
    ps.accumulate(prefix + ".final_ln.b", db)
    for i in reversed(range(len(cache["blocks"]))):
        dx = self_block_backward(ps, f"{prefix}.block{i}", cache["blocks"][i], dx)
    dc1, dw, db = _conv_backward(ps[prefix + ".conv2.w"], cache["cc2"], dx)
    ps.accumulate(prefix + ".conv2.w", dw)
    ps.accumulate(prefix + ".conv2.b", db)
    dc1 = dc1 * cache["m1"]
    _, dw, db = _conv_backward(ps[prefix + ".conv1.w"], cache["cc1"], dc1)
    ps.accumulate(prefix + ".conv1.w", dw)
    ps.accumulate(prefix + ".conv1.b", db)


def encode_speech(frames: np.ndarray, ps: ParamStore, heads: int,
                  prefix: str = "speech") -> EncoderOutput:
    frames = np.asarray(frames, dtype=DTYPE)
    if frames.ndim != 2:
        raise DimensionError(f"expected (T_in, d_in) frames, got shape {frames.shape}")
    if frames.shape[0] < MIN_FRAMES:
        raise InputTooShort(f"speech input needs at least {MIN_FRAMES} frames, got {frames.shape[0]}")
    seq, mask, _ = speech_forward(ps, frames[None], [frames.shape[0]], heads, prefix)
    return EncoderOutput(seq[0], mask[0])


# ---------------------------------------------------------------- text


def text_forward(ps: ParamStore, ids: np.ndarray, mask: np.ndarray, heads: int,
                 prefix: str = "text", layers: int | None = None):
    """Batched text encoder over (B, T) token ids with (B, T) real-position mask."""
    ids = np.asarray(ids, dtype=np.int64)
    emb = ps[prefix + ".emb"]
    if ids.size and (ids.max() >= emb.shape[0] or ids.min() < 0):
        raise VocabularyError(f"token id out of range for vocabulary of {emb.shape[0]}")
    x = emb[ids]
    n = count_blocks(ps, prefix) if layers is None else layers
    block_caches, taps = [], []
    for i in range(n):
        x, bc = self_block_forward(ps, f"{prefix}.block{i}", x, mask, heads, rel=True)
        block_caches.append(bc)
        taps.append(x)
    out, ln = layer_norm_forward(x, ps[prefix + ".final_ln.g"], ps[prefix + ".final_ln.b"])
    cache = {"ids": ids, "blocks": block_caches, "ln": ln, "taps": taps, "prefix": prefix}
    return out, np.asarray(mask, dtype=bool), cache


def text_backward(ps: ParamStore, cache, dout: np.ndarray) -> None:
    prefix = cache["prefix"]
    dx, dg, db = layer_norm_backward(cache["ln"], dout)
    ps.accumulate(prefix + ".final_ln.g", dg)
    ps.accumulate(prefix + ".final_ln.b", db)
    for i in reversed(range(len(cache["blocks"]))):
        dx = self_block_backward(ps, f"{prefix}.block{i}", cache["blocks"][i], dx)
    demb = np.zeros_like(ps[prefix + ".emb"])
    np.add.at(demb, cache["ids"].reshape(-1), dx.reshape(-1, dx.shape[-1]))
    ps.accumulate(prefix + ".emb", demb)


def encode_text(tokens, ps: ParamStore, heads: int, prefix: str = "text",
                mask=None) -> EncoderOutput:
    """Encode one token-id sequence; the caller puts [CLS] at position 0."""
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if mask is None:
        mask = np.ones(ids.size, dtype=bool)
    seq, m, _ = text_forward(ps, ids[None], np.asarray(mask, bool)[None], heads, prefix)
    return EncoderOutput(seq[0], m[0])


# ---------------------------------------------------------------- truncation


def truncate_layers(blocks: list, keep: int) -> list:
    """First ``keep`` entries of a block list."""
    if not 1 <= keep <= len(blocks):
        raise ConfigError(f"keep={keep} outside [1, {len(blocks)}]")
    return list(blocks[:keep])


def truncate_encoder(ps: ParamStore, prefix: str, keep: int) -> ParamStore:
    """Copy of ``ps`` with blocks ``keep..`` of encoder ``prefix`` removed."""
    n = count_blocks(ps, prefix)
    kept = truncate_layers(list(range(n)), keep)
    drop = {f"{prefix}.block{i}." for i in range(n) if i not in kept}
    out = ParamStore()
    for name, p in ps.items():
        if any(name.startswith(d) for d in drop):
            continue
        out.add(name, p.value.copy(), p.trainable)
    return out


# ---------------------------------------------------------------- pretext


def _pad_frames(batch):
    T = max(f.shape[0] for f in batch)
    out = np.zeros((len(batch), T, batch[0].shape[1]), dtype=DTYPE)
    for i, f in enumerate(batch):
        out[i, :f.shape[0]] = f
    return out, np.array([f.shape[0] for f in batch])


def pretrain_masked_frames(ps: ParamStore, corpus: list, heads: int, kind: str = "speech",
                           steps: int = 500, lr: float = 1e-3, mask_prob: float = 0.15,
                           batch_size: int = 8, seed: int = 0, history: list | None = None
                           ) -> ParamStore:
    """Masked reconstruction pretext for one encoder.

    ``kind="speech"``: corpus of (T_in, d_in) frame arrays; masked frames are
    zeroed and a linear head regresses each output position's 4 input frames
    (squared error on masked frames).  ``kind="text"``: corpus of token-id
    lists; masked tokens become [UNK] and a linear head predicts the original
    id (cross-entropy on masked tokens).  Returns a new store with updated
    encoder params; the reconstruction head is discarded.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    prefix = kind
    work = ParamStore()
    for name, p in ps.items():
        if name.startswith(prefix + "."):
            work.add(name, p.value.copy())
    d_model = work[prefix + ".final_ln.g"].shape[0]
    rng = Rng(seed)
    if kind == "speech":
        d_in = work[prefix + ".conv1.w"].shape[0] // 3
        work.add("recon.w", rng.normal_array((d_model, 4 * d_in), INIT_STD))
        work.add("recon.b", np.zeros(4 * d_in))
    elif kind == "text":
        V = work[prefix + ".emb"].shape[0]
        work.add("recon.w", rng.normal_array((d_model, V), INIT_STD))
        work.add("recon.b", np.zeros(V))
    else:
        raise ConfigError(f"unknown encoder kind {kind!r}")
    opt = Adam(lr=lr)
    for step in range(steps):
        batch = [corpus[rng.randint(len(corpus))] for _ in range(batch_size)]
        work.zero_grad()
        if kind == "speech":
            loss = _speech_pretext_step(work, batch, heads, mask_prob, rng)
        else:
            loss = _text_pretext_step(work, batch, heads, mask_prob, rng)
        if history is not None:
            history.append(loss)
        opt.step(work)
    out = ps.copy()
    for name in out.names(prefix + "."):
        out[name][...] = work[name]
    return out


def _speech_pretext_step(ps, batch, heads, mask_prob, rng, backward=True):
    frames, lengths = _pad_frames(batch)
    B, T, d_in = frames.shape
    hide = np.zeros((B, T), dtype=bool)
    for b in range(B):
        for t in range(lengths[b]):
            hide[b, t] = rng.random() < mask_prob
        if not hide[b, :lengths[b]].any():
            hide[b, rng.randint(int(lengths[b]))] = True
    inp = np.where(hide[..., None], 0.0, frames)
    seq, mask, cache = speech_forward(ps, inp, lengths, heads)
    T2 = seq.shape[1]
    pred = seq @ ps["recon.w"] + ps["recon.b"]               # (B, T2, 4*d_in)
    tgt = np.zeros((B, 4 * T2, d_in), dtype=DTYPE)
    tgt[:, :T] = frames
    w = np.zeros((B, 4 * T2), dtype=DTYPE)
    w[:, :T] = hide
    tgt = tgt.reshape(B, T2, 4 * d_in)
    w = np.repeat(w.reshape(B, T2, 4), d_in, axis=-1)
    count = max(w.sum(), 1.0)
    diff = (pred - tgt) * w
    loss = float((diff * diff).sum() / count)
    if backward:
        dpred = 2.0 * diff / count
        dseq, dw_, db_ = linear_backward(seq, ps["recon.w"], dpred)
        ps.accumulate("recon.w", dw_)
        ps.accumulate("recon.b", db_)
        speech_backward(ps, cache, dseq)
    return loss


def _text_pretext_step(ps, batch, heads, mask_prob, rng, backward=True):
    T = max(len(s) for s in batch)
    B = len(batch)
    ids = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    hide = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(batch):
        ids[b, :len(s)] = s
        mask[b, :len(s)] = True
        for t in range(len(s)):
            hide[b, t] = s[t] >= len(SPECIALS) and rng.random() < mask_prob
    inp = np.where(hide, UNK, ids)
    seq, _, cache = text_forward(ps, inp, mask, heads)
    logits = seq @ ps["recon.w"] + ps["recon.b"]
    if not hide.any():
        return 0.0
    p = softmax_rows(logits[hide])
    gold = ids[hide]
    n = gold.size
    loss = float(-np.log(p[np.arange(n), gold]).sum() / n)
    if backward:
        dl = p.copy()
        dl[np.arange(n), gold] -= 1.0
        dlogits = np.zeros_like(logits)
        dlogits[hide] = dl / n
        dseq, dw_, db_ = linear_backward(seq, ps["recon.w"], dlogits)
        ps.accumulate("recon.w", dw_)
        ps.accumulate("recon.b", db_)
        text_backward(ps, cache, dseq)
    return loss
