"""Two-way cross-modal attention between speech and text streams.

Each direction first runs a self-attention block over its own (query)
stream, then a cross-attention block whose keys/values are the *original*
output of the other encoder.  The two directions do not feed each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    attention_weights, cross_block_backward, cross_block_forward, init_block,
    self_block_backward, self_block_forward,
)
from .encoders import EncoderOutput
from .tensor import DTYPE, DimensionError, ParamStore, Rng

TEXT_SELF = "xs.text_self"
SPEECH_SELF = "xs.speech_self"
TEXT_FROM_SPEECH = "xs.text_from_speech"
SPEECH_FROM_TEXT = "xs.speech_from_text"
BLOCKS = (TEXT_SELF, SPEECH_SELF, TEXT_FROM_SPEECH, SPEECH_FROM_TEXT)


@dataclass
class CrossStitchOutput:
    text_fused: EncoderOutput
    speech_fused: EncoderOutput


def init_cross_stitch(ps: ParamStore, d_model: int, heads: int, rng: Rng) -> None:
    for prefix in BLOCKS:
        init_block(ps, prefix, d_model, heads, rng)


def cross_stitch_forward(ps: ParamStore, ks, ms, kt, mt, heads: int, speech_gate=None,
                         text_gate=None, speech_side: bool = True):
    """Batched fusion.

    ``speech_gate``/``text_gate`` (B,) switch the cross-attention sublayer off
    for samples missing that modality.  With ``speech_side=False`` only the
    text-side stream is computed.
    """
    if ks.shape[-1] != kt.shape[-1]:
        raise DimensionError(f"speech width {ks.shape[-1]} != text width {kt.shape[-1]}")
    ts, c_ts = self_block_forward(ps, TEXT_SELF, kt, mt, heads)
    tf, c_tf = cross_block_forward(ps, TEXT_FROM_SPEECH, ts, ks, ms, heads, gate=speech_gate)
    cache = {"ts": c_ts, "tf": c_tf, "ss": None, "sf": None}
    sf = None
    if speech_side:
        ss, c_ss = self_block_forward(ps, SPEECH_SELF, ks, ms, heads)
        sf, c_sf = cross_block_forward(ps, SPEECH_FROM_TEXT, ss, kt, mt, heads, gate=text_gate)
        cache["ss"], cache["sf"] = c_ss, c_sf
    return tf, sf, cache


def cross_stitch_backward(ps: ParamStore, cache, d_tf, d_sf=None):
    """Returns (d_ks, d_kt)."""
    dts, dks = cross_block_backward(ps, TEXT_FROM_SPEECH, cache["tf"], d_tf)
    dkt = self_block_backward(ps, TEXT_SELF, cache["ts"], dts)
    if cache["sf"] is not None and d_sf is not None:
        dss, dkt2 = cross_block_backward(ps, SPEECH_FROM_TEXT, cache["sf"], d_sf)
        dks = dks + self_block_backward(ps, SPEECH_SELF, cache["ss"], dss)
        dkt = dkt + dkt2
    return dks, dkt


def _batched(enc: EncoderOutput):
    seq = np.asarray(enc.seq, dtype=DTYPE)
    mask = np.asarray(enc.pad_mask, dtype=bool)
    if seq.ndim == 2:
        return seq[None], mask[None], True
    return seq, mask, False


def cross_stitch(k_s: EncoderOutput, k_t: EncoderOutput, ps: ParamStore,
                 heads: int) -> CrossStitchOutput:
    ks, ms, single = _batched(k_s)
    kt, mt, _ = _batched(k_t)
    tf, sf, _ = cross_stitch_forward(ps, ks, ms, kt, mt, heads)
    if single:
        tf, sf, ms, mt = tf[0], sf[0], ms[0], mt[0]
    return CrossStitchOutput(EncoderOutput(tf, mt), EncoderOutput(sf, ms))


def attention_map(k_s: EncoderOutput, k_t: EncoderOutput, ps: ParamStore, heads: int,
                  direction: str = "text->speech") -> np.ndarray:
    """Head-averaged cross-attention weights.

    ``text->speech``: rows are text positions, columns speech frames.
    ``speech->text``: the reverse.
    """
    ks, ms, single = _batched(k_s)
    kt, mt, _ = _batched(k_t)
    _, _, cache = cross_stitch_forward(ps, ks, ms, kt, mt, heads)
    if direction == "text->speech":
        w = attention_weights(cache["tf"][1])
    elif direction == "speech->text":
        w = attention_weights(cache["sf"][1])
    else:
        raise ValueError(f"unknown direction {direction!r}")
    avg = w.mean(axis=1)
    return avg[0] if single else avg
