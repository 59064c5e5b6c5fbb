"""Fine-tuning loop, evaluation and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Batch, Utterance, Vocab, batch_pad, tag_names, task_kind
from .metrics import (
    accuracy, corpus_turn_prf, joint_accuracy, per_tag_f1, token_error_rate,
)
from .model import Model, ModelConfig
from .optim import Adam
from .tensor import ParamStore, Rng

log = logging.getLogger(__name__)

MAGIC = b"XSTITCH1"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 2
    freeze_steps: int = 2000
    patience: int = 3
    max_epochs: int = 20
    max_steps: int = 0          # 0 = no cap
    eval_batch_size: int = 1     # 1 = each utterance alone, so results never depend on batch mates
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError(f"invalid training config {self}")
        if self.freeze_steps < 0 or self.max_steps < 0:
            raise ValueError("freeze_steps and max_steps must be non-negative")


# ---------------------------------------------------------------- evaluation


def batches(utts: list[Utterance], vocab: Vocab, size: int, d_in: int):
    for i in range(0, len(utts), size):
        yield batch_pad(utts[i:i + size], vocab, d_in)


def predict_all(model: Model, utts: list[Utterance], batch_size: int = 1) -> list:
    out: list = []
    for b in batches(utts, model.vocab, batch_size, model.cfg.d_in):
        out.extend(model.predict(b))
    return out


def evaluate(model: Model, utts: list[Utterance], task: str, batch_size: int = 1) -> dict:
    """Task metrics as a JSON-ready dict; ``val_metric`` is the early-stopping score."""
    preds = predict_all(model, utts, batch_size)
    kind = task_kind(task)
    res: dict = {"task": task, "n": len(utts)}
    if kind == "tag":
        flat_p = [t for p in preds for t in p]
        flat_g = [t for u in utts for t in u.tags]
        rep = per_tag_f1(flat_p, flat_g, tag_names(task))
        res["tags"] = rep.to_dict()
        res["macro_f1"] = 100.0 * rep.macro_f1
        res["token_accuracy"] = accuracy(flat_p, flat_g)
        res["val_metric"] = res["macro_f1"]
        if task == "punct":
            amb_p = [p[i] for p, u in zip(preds, utts) for i in u.meta.get("ambiguous", [])]
            amb_g = [u.tags[i] for u in utts for i in u.meta.get("ambiguous", [])]
            res["ambiguous_accuracy"] = accuracy(amb_p, amb_g) if amb_g else None
            res["ambiguous_count"] = len(amb_g)
        else:
            res["token_error_rate"] = token_error_rate(flat_p, flat_g)
            res["turns"] = corpus_turn_prf(preds, [u.tags for u in utts]).to_dict()
            neu_p = [p[i] for p, u in zip(preds, utts) for i in u.meta.get("neutral", [])]
            neu_g = [u.tags[i] for u in utts for i in u.meta.get("neutral", [])]
            res["neutral_accuracy"] = accuracy(neu_p, neu_g) if neu_g else None
    elif kind == "cls":
        gold = [u.label for u in utts]
        res["accuracy"] = accuracy(preds, gold)
        full = [i for i, u in enumerate(utts) if u.has_speech and u.has_text]
        if full and len(full) < len(utts):
            res["accuracy_full_modality"] = accuracy([preds[i] for i in full], [gold[i] for i in full])
        res["val_metric"] = res["accuracy"]
    else:
        gold = [(u.label, u.label2) for u in utts]
        res["intent_accuracy"] = accuracy([p[0] for p in preds], [g[0] for g in gold])
        res["entity_accuracy"] = accuracy([p[1] for p in preds], [g[1] for g in gold])
        res["joint_accuracy"] = joint_accuracy(preds, gold)
        res["val_metric"] = res["joint_accuracy"]
    return res


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    best_params: dict
    best_metric: float
    best_step: int
    best_epoch: int
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    steps: int = 0


def adam_step(params: ParamStore, state: Adam) -> None:
    state.step(params)


def train(model: Model, train_set: list[Utterance], val_set: list[Utterance], cfg: TrainConfig,
          task: str, on_step: Callable[[int, Model], None] | None = None) -> TrainResult:
    """Minibatch Adam with a speech-encoder freeze and epoch-level early stopping.

    The model is left holding the best-validation parameters.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("training and validation splits must be nonempty")
    rng = Rng(cfg.seed)
    opt = Adam(lr=cfg.lr)
    ps = model.ps
    ps.zero_grad()
    step = 0
    best = -math.inf
    best_params = {n: v.copy() for n, v in ps.state().items()}
    best_step = best_epoch = 0
    bad = 0
    history: list = []
    step_losses: list = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(train_set))
        ep_loss = []
        for i in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            ps.set_trainable("speech.", step >= cfg.freeze_steps)
            b = batch_pad([train_set[j] for j in order[i:i + cfg.batch_size]], model.vocab,
                          model.cfg.d_in)
            loss = model.loss_and_grad(b)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
            opt.step(ps)
            step += 1
            ep_loss.append(loss)
            step_losses.append(loss)
            if on_step is not None:
                on_step(step, model)
        ps.set_trainable("speech.", step >= cfg.freeze_steps)
        res = evaluate(model, val_set, task, cfg.eval_batch_size)
        metric = res["val_metric"]
        history.append({"epoch": epoch, "step": step,
                        "train_loss": float(np.mean(ep_loss)) if ep_loss else None,
                        "val_metric": metric, "seconds": round(time.time() - t0, 3)})
        log.info("epoch %d step %d loss %.4f val %.3f", epoch, step,
                 history[-1]["train_loss"] or float("nan"), metric)
        if metric > best:
            best, best_step, best_epoch, bad = metric, step, epoch, 0
            best_params = {n: v.copy() for n, v in ps.state().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
        if cfg.max_steps and step >= cfg.max_steps:
            break
    ps.load_values(best_params)
    return TrainResult(best_params, best, best_step, best_epoch, history, step_losses, step)


# ---------------------------------------------------------------- checkpoints


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ParamStore, meta: dict, path) -> Path:
    """Magic, little-endian u64 header length, JSON header, raw <f8 payload."""
    path = Path(path)
    manifest = []
    offset = 0
    chunks = []
    for name, p in params.items():
        data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.value.shape), "byte_offset": offset})
        offset += len(data)
        chunks.append(data)
    header = _header_bytes({"meta": meta, "manifest": manifest, "payload_bytes": offset})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for c in chunks:
                f.write(c)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path, expected: ParamStore | None = None) -> tuple[ParamStore, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = raw[16 + hlen:]
    manifest = header["manifest"]
    expected_bytes = sum(8 * int(np.prod(m["shape"], dtype=np.int64)) for m in manifest)
    if len(payload) != expected_bytes or header.get("payload_bytes") != expected_bytes:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest describes {expected_bytes}")
    ps = ParamStore()
    pos = 0
    for m in manifest:
        n = int(np.prod(m["shape"], dtype=np.int64))
        if m["byte_offset"] != pos:
            raise CheckpointError(f"{path}: manifest offsets not contiguous at {m['name']}")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(m["shape"])
        ps.add(m["name"], arr.astype(np.float64))
        pos += 8 * n
    if expected is not None:
        check_compatible(ps, expected)
    return ps, header["meta"]


def check_compatible(loaded: ParamStore, expected: ParamStore) -> None:
    problems = []
    for name, p in expected.items():
        if name not in loaded:
            problems.append(f"missing {name}")
        elif loaded[name].shape != p.value.shape:
            problems.append(f"{name}: checkpoint {loaded[name].shape} vs model {p.value.shape}")
    for name in loaded:
        if name not in expected:
            problems.append(f"unexpected {name}")
    if problems:
        raise CheckpointError("checkpoint does not match model config: " + "; ".join(problems[:8]))


def model_meta(model: Model, task: str, extra: dict | None = None) -> dict:
    meta = {"model": model.cfg.to_dict(), "vocab": model.vocab.itos, "task": task}
    if extra:
        meta.update(extra)
    return meta


def save_model(model: Model, task: str, path, extra: dict | None = None) -> Path:
    return save_checkpoint(model.ps, model_meta(model, task, extra), path)


def load_model(path) -> tuple[Model, dict]:
    ps, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    vocab = Vocab(meta["vocab"])
    skeleton = Model.skeleton(cfg)
    check_compatible(ps, skeleton)
    return Model(cfg, vocab, ps), meta


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
