"""Full model: encoders, optional cross-stitch fusion and a task head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import DEFAULT_K_MAX
from .crossstitch import cross_stitch_backward, cross_stitch_forward, init_cross_stitch
from .data import Batch, Vocab
from .encoders import (
    init_speech, init_text, speech_backward, speech_forward, text_backward, text_forward,
)
from .heads import (
    FUSION_MODES, classify_utterance, cross_entropy_grad, fuse_backward, fuse_forward, fused_width, init_linear,
    linear_head_backward, pool_backward, pool_forward,
)
from .tensor import DTYPE, ConfigError, ParamStore, Rng

KINDS = ("tag", "cls", "multi")


class _ZeroRng:
    def normal_array(self, shape, std=1.0):
        return np.zeros(shape, dtype=DTYPE)


@dataclass
class ModelConfig:
    kind: str = "tag"           # tag | cls | multi
    n_out: int = 8
    n_out2: int = 0
    fusion: str = "xse"         # xse | se-te | se | te
    d_model: int = 64
    heads: int = 8
    speech_layers: int = 4
    text_layers: int = 4
    d_in: int = 8
    k_max: int = DEFAULT_K_MAX
    vocab_size: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.kind == "tag" and self.fusion not in ("xse", "te"):
            raise ConfigError(f"tagging needs the text stream; fusion {self.fusion!r} not supported")
        if self.kind == "multi" and self.n_out2 < 2:
            raise ConfigError("multi-headed classifier needs n_out2 >= 2")
        if self.n_out < 2:
            raise ConfigError("need at least two output classes")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for k in ("d_model", "heads", "speech_layers", "text_layers", "d_in", "k_max", "vocab_size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")

    @property
    def uses_speech(self) -> bool:
        return self.fusion in ("xse", "se-te", "se")

    @property
    def uses_text(self) -> bool:
        return self.fusion in ("xse", "se-te", "te")

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, ps: ParamStore | None = None, seed: int = 0):
        cfg.validate()
        if cfg.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.ps = ps if ps is not None else self.init_params(cfg, seed)

    @staticmethod
    def init_params(cfg: ModelConfig, seed: int, rng=None) -> ParamStore:
        rng = Rng(seed) if rng is None else rng
        ps = ParamStore()
        if cfg.uses_speech:
            init_speech(ps, cfg.d_in, cfg.d_model, cfg.heads, cfg.speech_layers, rng)
        if cfg.uses_text:
            init_text(ps, cfg.vocab_size, cfg.d_model, cfg.heads, cfg.text_layers, rng, cfg.k_max)
        if cfg.fusion == "xse":
            init_cross_stitch(ps, cfg.d_model, cfg.heads, rng)
        if cfg.kind == "tag":
            init_linear(ps, "tag", cfg.d_model, cfg.n_out, rng)
        else:
            width = fused_width(cfg.fusion, cfg.d_model)
            init_linear(ps, "utt", width, cfg.n_out, rng)
            if cfg.kind == "multi":
                init_linear(ps, "utt2", width, cfg.n_out2, rng)
        return ps

    @staticmethod
    def skeleton(cfg: ModelConfig) -> ParamStore:
        """Zero-valued store with the right names and shapes (no RNG draws)."""
        return Model.init_params(cfg, 0, rng=_ZeroRng())

    @property
    def speech_trainable(self) -> bool:
        names = self.ps.names("speech.")
        return bool(names) and self.ps.param(names[0]).trainable

    # ------------------------------------------------------------ forward

    def forward(self, batch: Batch, need_speech_side: bool | None = None):
        cfg, ps = self.cfg, self.ps
        c: dict = {}
        ks = ms = kt = mt = None
        if cfg.uses_speech:
            ks, ms, c["speech"] = speech_forward(ps, batch.frames, batch.frame_lengths, cfg.heads)
        if cfg.uses_text:
            kt, mt, c["text"] = text_forward(ps, batch.ids, batch.tok_mask, cfg.heads)
        s_gate = batch.has_speech.astype(DTYPE)
        t_gate = batch.has_text.astype(DTYPE)
        if cfg.fusion == "xse":
            speech_side = cfg.kind != "tag" if need_speech_side is None else need_speech_side
            tf, sf, c["xs"] = cross_stitch_forward(ps, ks, ms, kt, mt, cfg.heads, s_gate, t_gate,
                                                   speech_side=speech_side)
            text_seq, speech_seq = tf, sf
        else:
            text_seq, speech_seq = kt, ks
        c["text_seq"], c["speech_seq"] = text_seq, speech_seq
        out: dict = {"cache": c}
        if cfg.kind == "tag":
            logits = text_seq @ ps["tag.w"] + ps["tag.b"]
            out["logits"] = logits
            return out
        d = cfg.d_model
        zeros = np.zeros((len(batch), d), dtype=DTYPE)
        pt = psv = None
        if text_seq is not None:
            pt, c["pool_t"] = pool_forward(text_seq, mt, "cls")
        if speech_seq is not None:
            psv, c["pool_s"] = pool_forward(speech_seq, ms, "max")
        if cfg.fusion in ("xse", "se-te"):
            fused, c["fuse"] = fuse_forward(psv, pt, batch.has_speech, batch.has_text)
        elif cfg.fusion == "se":
            c["present"] = batch.has_speech
            fused = np.where(batch.has_speech[:, None], psv, zeros)
        else:
            c["present"] = batch.has_text
            fused = np.where(batch.has_text[:, None], pt, zeros)
        c["fused"] = fused
        if cfg.kind == "multi":
            out["logits"], out["logits2"] = classify_utterance(fused, ps, multi=True)
        else:
            out["logits"] = classify_utterance(fused, ps)
        return out

    def loss_from(self, out: dict, batch: Batch):
        """Loss and d(loss)/d(logits) for each head."""
        cfg = self.cfg
        if cfg.kind == "tag":
            loss, dl = cross_entropy_grad(out["logits"], batch.tags)
            return loss, {"logits": dl}
        loss, dl = cross_entropy_grad(out["logits"], batch.labels)
        grads = {"logits": dl}
        if cfg.kind == "multi":
            loss2, dl2 = cross_entropy_grad(out["logits2"], batch.labels2)
            loss += loss2
            grads["logits2"] = dl2
        return loss, grads

    def loss(self, batch: Batch) -> float:
        return self.loss_from(self.forward(batch, need_speech_side=None), batch)[0]

    def loss_and_grad(self, batch: Batch) -> float:
        """Populates ``self.ps`` grads (accumulating) and returns the batch loss."""
        out = self.forward(batch)
        loss, dlog = self.loss_from(out, batch)
        self.backward(out, dlog)
        return loss

    # ------------------------------------------------------------ backward

    def backward(self, out: dict, dlog: dict) -> None:
        cfg, ps = self.cfg, self.ps
        c = out["cache"]
        d_text = d_speech = None
        if cfg.kind == "tag":
            d_text = linear_head_backward(ps, "tag", c["text_seq"], dlog["logits"])
        else:
            dfused = linear_head_backward(ps, "utt", c["fused"], dlog["logits"])
            if cfg.kind == "multi":
                dfused = dfused + linear_head_backward(ps, "utt2", c["fused"], dlog["logits2"])
            dps = dpt = None
            if cfg.fusion in ("xse", "se-te"):
                dps, dpt = fuse_backward(c["fuse"], dfused)
            elif cfg.fusion == "se":
                dps = np.where(c["present"][:, None], dfused, 0.0)
            else:
                dpt = np.where(c["present"][:, None], dfused, 0.0)
            if dpt is not None:
                d_text = pool_backward(c["pool_t"], dpt)
            if dps is not None:
                d_speech = pool_backward(c["pool_s"], dps)
        if cfg.fusion == "xse":
            dks, dkt = cross_stitch_backward(ps, c["xs"], d_text, d_speech)
        else:
            dks, dkt = d_speech, d_text
        if dkt is not None:
            text_backward(ps, c["text"], dkt)
        if dks is not None and self.speech_trainable:
            speech_backward(ps, c["speech"], dks)

    # ------------------------------------------------------------ inference

    def predict(self, batch: Batch):
        """Tag ids per utterance (tag), class ids (cls) or (intent, entity) pairs (multi)."""
        out = self.forward(batch)
        if self.cfg.kind == "tag":
            best = out["logits"].argmax(axis=-1)
            return [best[i, 1:1 + len(u.tokens)].tolist() for i, u in enumerate(batch.utts)]
        pred = out["logits"].argmax(axis=-1).tolist()
        if self.cfg.kind == "multi":
            return list(zip(pred, out["logits2"].argmax(axis=-1).tolist()))
        return pred
