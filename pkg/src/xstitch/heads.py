"""Output heads: token tagging, pooling, shallow fusion and cross-entropy."""

from __future__ import annotations

import numpy as np

from .attention import INIT_STD
from .tensor import DTYPE, ConfigError, DimensionError, ParamStore, Rng, linear_backward

FUSION_MODES = ("xse", "se-te", "se", "te")
IGNORE = -1


def init_linear(ps: ParamStore, prefix: str, d_in: int, d_out: int, rng: Rng) -> None:
    ps.add(prefix + ".w", rng.normal_array((d_in, d_out), INIT_STD))
    ps.add(prefix + ".b", np.zeros(d_out))


def fused_width(fusion: str, d_model: int) -> int:
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}")
    return 2 * d_model if fusion in ("xse", "se-te") else d_model


# ---------------------------------------------------------------- tagging


def tag_logits(seq: np.ndarray, ps: ParamStore, prefix: str = "tag") -> np.ndarray:
    w = ps[prefix + ".w"]
    if seq.shape[-1] != w.shape[0]:
        raise ConfigError(f"tag head expects width {w.shape[0]}, got {seq.shape[-1]}")
    return seq @ w + ps[prefix + ".b"]


def linear_head_backward(ps: ParamStore, prefix: str, x: np.ndarray, dlogits: np.ndarray):
    dx, dw, db = linear_backward(x, ps[prefix + ".w"], dlogits)
    ps.accumulate(prefix + ".w", dw)
    ps.accumulate(prefix + ".b", db)
    return dx


# ---------------------------------------------------------------- pooling


def pool(seq: np.ndarray, mask: np.ndarray, mode: str) -> np.ndarray:
    """Pool (T, d) or (B, T, d) over real positions: ``cls`` takes row 0, ``max`` the max."""
    out, _ = pool_forward(seq, mask, mode)
    return out


def pool_forward(seq, mask, mode):
    seq = np.asarray(seq, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    single = seq.ndim == 2
    if single:
        seq, mask = seq[None], mask[None]
    if not mask.any(axis=-1).all():
        raise ValueError("cannot pool a sequence with no real positions")
    if mode == "cls":
        if not mask[:, 0].all():
            raise ValueError("cls pooling needs position 0 to be real")
        out, idx = seq[:, 0], None
    elif mode == "max":
        masked = np.where(mask[..., None], seq, -np.inf)
        idx = masked.argmax(axis=1)                                  # (B, d)
        out = np.take_along_axis(seq, idx[:, None, :], axis=1)[:, 0]
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    cache = (seq.shape, mode, idx)
    return (out[0] if single else out), cache


def pool_backward(cache, dout: np.ndarray) -> np.ndarray:
    shape, mode, idx = cache
    dseq = np.zeros(shape, dtype=DTYPE)
    if mode == "cls":
        dseq[:, 0] = dout
    else:
        B, _, d = shape
        dseq[np.arange(B)[:, None], idx, np.arange(d)[None, :]] = dout
    return dseq


# ---------------------------------------------------------------- shallow fusion


def fuse_shallow(pooled_s: np.ndarray | None, pooled_t: np.ndarray | None,
                 return_path: bool = False):
    """[speech ; text], or the available vector duplicated into both halves."""
    if pooled_s is None and pooled_t is None:
        raise ValueError("fusion needs at least one pooled modality")
    if pooled_s is None:
        out, path = np.concatenate([pooled_t, pooled_t]), "text-only"
    elif pooled_t is None:
        out, path = np.concatenate([pooled_s, pooled_s]), "speech-only"
    else:
        if pooled_s.shape != pooled_t.shape:
            raise DimensionError(f"pooled widths differ: {pooled_s.shape} vs {pooled_t.shape}")
        out, path = np.concatenate([pooled_s, pooled_t]), "concat"
    return (out, path) if return_path else out


def fuse_forward(ps_vec: np.ndarray, pt_vec: np.ndarray, has_s: np.ndarray, has_t: np.ndarray):
    """Batched :func:`fuse_shallow` over (B, d) inputs with presence flags."""
    has_s = np.asarray(has_s, dtype=bool)
    has_t = np.asarray(has_t, dtype=bool)
    if not (has_s | has_t).all():
        raise ValueError("fusion needs at least one pooled modality per sample")
    left = np.where(has_s[:, None], ps_vec, pt_vec)
    right = np.where(has_t[:, None], pt_vec, ps_vec)
    return np.concatenate([left, right], axis=-1), (has_s, has_t)


def fuse_backward(cache, dout: np.ndarray):
    """Returns (d_pooled_s, d_pooled_t)."""
    has_s, has_t = cache
    d = dout.shape[-1] // 2
    dl, dr = dout[:, :d], dout[:, d:]
    ds = np.where(has_s[:, None], dl, 0.0) + np.where(has_t[:, None], 0.0, dr)
    dt = np.where(has_t[:, None], dr, 0.0) + np.where(has_s[:, None], 0.0, dl)
    return ds, dt


def classify_utterance(fused: np.ndarray, ps: ParamStore, multi: bool = False):
    """Logits from a fused vector; ``multi`` also returns the second (entity) head."""
    w = ps["utt.w"]
    if fused.shape[-1] != w.shape[0]:
        raise ConfigError(f"utterance head expects width {w.shape[0]}, got {fused.shape[-1]}")
    logits = fused @ w + ps["utt.b"]
    if not multi:
        return logits
    return logits, fused @ ps["utt2.w"] + ps["utt2.b"]


# ---------------------------------------------------------------- loss


def cross_entropy(logits: np.ndarray, labels, ignore_mask=None) -> float:
    return cross_entropy_grad(logits, labels, ignore_mask)[0]


def cross_entropy_grad(logits: np.ndarray, labels, ignore_mask=None):
    """Mean negative log-softmax over non-ignored rows and its gradient.

    ``logits`` is (..., C); ``labels`` matches the leading shape.  Rows are
    ignored where ``ignore_mask`` is True or the label equals ``IGNORE``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    C = logits.shape[-1]
    flat = logits.reshape(-1, C)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.size != flat.shape[0]:
        raise DimensionError(f"{flat.shape[0]} logit rows but {lab.size} labels")
    keep = lab != IGNORE
    if ignore_mask is not None:
        keep &= ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross-entropy over zero non-ignored rows")
    if (lab[keep] < 0).any() or (lab[keep] >= C).any():
        raise ValueError(f"label outside [0, {C})")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = float(-logp[rows, lab[rows]].sum() / n)
    grad = np.exp(logp)
    grad[rows, lab[rows]] -= 1.0
    grad[~keep] = 0.0
    grad /= n
    return loss, grad.reshape(logits.shape)
