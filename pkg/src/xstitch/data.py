"""Dataset records, tag codecs, synthetic corpora, on-disk format and batching.

Synthetic frames have ``D_IN = 8`` channels at a nominal 10 ms step:

* channels 0-5: a fixed per-word signature plus noise, aligned to the word's span
* channel 6: prosody (terminal rise/fall, comma cue, arousal level)
* channel 7: speaker timbre (role, or an entity code for intent samples)
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import CLS, EOU, MIN_FRAMES, PAD, SPECIALS, UNK
from .heads import IGNORE
from .tensor import DTYPE, Rng

D_IN = 8
TASKS = ("punct", "roles", "sentiment", "intent")

CAPS = ("0", "Cp")
PUNCTS = ("0", "Cm", "Pr", "Qus")
PUNCT_CHAR = {"0": "", "Cm": ",", "Pr": ".", "Qus": "?"}
CHAR_PUNCT = {",": "Cm", ".": "Pr", "?": "Qus"}
RICH_TAGS = tuple(f"{c}:{p}" for p in PUNCTS for c in CAPS)
ROLE_TAGS = ("client", "agent")


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    tokens: list[str]
    frames: np.ndarray | None = None
    tags: list[int] | None = None
    label: int | None = None
    label2: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_speech(self) -> bool:
        return self.frames is not None

    @property
    def has_text(self) -> bool:
        return len(self.tokens) > 0

    def validate(self) -> None:
        if not (self.has_speech or self.has_text):
            raise DataError(f"{self.id}: utterance has neither speech nor text")
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise DataError(f"{self.id}: {len(self.tags)} tags for {len(self.tokens)} tokens")
        if self.frames is not None and (self.frames.ndim != 2 or self.frames.shape[0] < MIN_FRAMES):
            raise DataError(f"{self.id}: frames must be (T_in >= {MIN_FRAMES}, d_in)")


# ---------------------------------------------------------------- tag codecs


def rich_tag_id(cap: str, punct: str) -> int:
    return RICH_TAGS.index(f"{cap}:{punct}")


def encode_rich_text(rich: str) -> tuple[list[str], list[int]]:
    """Split a cased, punctuated sentence into lowercase tokens and rich tag ids."""
    tokens, tags = [], []
    for word in rich.split():
        punct = "0"
        if word[-1] in CHAR_PUNCT:
            punct = CHAR_PUNCT[word[-1]]
            word = word[:-1]
        bad = sorted({ch for ch in word if not (ch.isalnum() or ch in "'-")})
        if bad or not word:
            raise DataError(f"unsupported punctuation {''.join(bad) or rich!r} in {rich!r}")
        cap = "Cp" if word[0].isupper() else "0"
        tokens.append(word.lower())
        tags.append(rich_tag_id(cap, punct))
    return tokens, tags


def decode_tags(tokens: list[str], tags: list[int]) -> str:
    if len(tokens) != len(tags):
        raise DataError(f"{len(tokens)} tokens but {len(tags)} tags")
    words = []
    for tok, t in zip(tokens, tags):
        cap, punct = RICH_TAGS[t].split(":")
        w = tok[:1].upper() + tok[1:] if cap == "Cp" else tok
        words.append(w + PUNCT_CHAR[punct])
    return " ".join(words)


def concat_nbest(hypotheses: list[list[str]]) -> list[str]:
    """Join N-best hypotheses with [EOU] between them."""
    if not hypotheses:
        raise DataError("need at least one hypothesis")
    out: list[str] = []
    for i, h in enumerate(hypotheses):
        if i:
            out.append(SPECIALS[EOU])
        out.extend(h.split() if isinstance(h, str) else h)
    return out


# ---------------------------------------------------------------- vocabulary


class Vocab:
    def __init__(self, tokens: list[str]):
        if list(tokens[:len(SPECIALS)]) != list(SPECIALS):
            raise DataError("vocabulary must start with the special tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, utts, max_size: int | None = None) -> "Vocab":
        counts = Counter(t for u in utts for t in u.tokens if t not in SPECIALS)
        words = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[:max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    frames: np.ndarray        # (B, T_in, d_in)
    frame_lengths: np.ndarray  # (B,)
    has_speech: np.ndarray    # (B,) bool
    ids: np.ndarray           # (B, T) with [CLS] at 0
    tok_mask: np.ndarray      # (B, T) bool
    has_text: np.ndarray      # (B,) bool
    tags: np.ndarray          # (B, T), IGNORE at [CLS] and padding
    labels: np.ndarray        # (B,), IGNORE when absent
    labels2: np.ndarray       # (B,)
    utts: list

    def __len__(self) -> int:
        return len(self.utts)


def batch_pad(utts: list[Utterance], vocab: Vocab, d_in: int = D_IN) -> Batch:
    if not utts:
        raise DataError("cannot batch zero utterances")
    for u in utts:
        u.validate()
        if u.frames is not None and u.frames.shape[1] != d_in:
            raise DataError(f"{u.id}: frames have {u.frames.shape[1]} channels, expected {d_in}")
    B = len(utts)
    lengths = np.array([u.frames.shape[0] if u.has_speech else MIN_FRAMES for u in utts])
    frames = np.zeros((B, int(lengths.max()), d_in), dtype=DTYPE)
    for i, u in enumerate(utts):
        if u.has_speech:
            frames[i, :lengths[i]] = u.frames
    T = 1 + max(len(u.tokens) for u in utts)
    ids = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    tags = np.full((B, T), IGNORE, dtype=np.int64)
    for i, u in enumerate(utts):
        ids[i, 0] = CLS
        ids[i, 1:1 + len(u.tokens)] = vocab.ids(u.tokens)
        mask[i, :1 + len(u.tokens)] = True
        if u.tags is not None:
            tags[i, 1:1 + len(u.tags)] = u.tags
    labels = np.array([IGNORE if u.label is None else u.label for u in utts], dtype=np.int64)
    labels2 = np.array([IGNORE if u.label2 is None else u.label2 for u in utts], dtype=np.int64)
    return Batch(frames, lengths, np.array([u.has_speech for u in utts]), ids, mask,
                 np.array([u.has_text for u in utts]), tags, labels, labels2, list(utts))


# ---------------------------------------------------------------- disk format


def write_frames(path: Path, frames: np.ndarray) -> None:
    T, d = frames.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", T, d))
        f.write(np.ascontiguousarray(frames, dtype="<f8").tobytes())


def read_frames(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated frame header")
    T, d = struct.unpack("<ii", raw[:8])
    if len(raw) != 8 + 8 * T * d:
        raise DataError(f"{path}: expected {T}x{d} frames, payload has {len(raw) - 8} bytes")
    return np.frombuffer(raw[8:], dtype="<f8").reshape(T, d).astype(DTYPE)


def utterance_record(u: Utterance, frames_rel: str | None) -> dict:
    rec = {"id": u.id, "tokens": u.tokens, "tags": u.tags, "label": u.label,
           "label2": u.label2, "frames": frames_rel}
    if u.meta:
        rec["meta"] = u.meta
    return rec


def write_split(root: Path, name: str, utts: list[Utterance]) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    path = root / f"{name}.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            rel = None
            if u.has_speech:
                rel = f"frames/{u.id}.bin"
                write_frames(root / rel, u.frames)
            f.write(json.dumps(utterance_record(u, rel), sort_keys=True) + "\n")
    return path


def parse_record(rec: dict, base: Path) -> Utterance:
    frames = read_frames(Path(base) / rec["frames"]) if rec.get("frames") else None
    u = Utterance(id=str(rec["id"]), tokens=list(rec.get("tokens") or []), frames=frames,
                  tags=rec.get("tags"), label=rec.get("label"), label2=rec.get("label2"),
                  meta=rec.get("meta") or {})
    u.validate()
    return u


def read_jsonl(path: Path) -> list[Utterance]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(parse_record(json.loads(line), path.parent))
    return out


def read_split(root: Path, name: str) -> list[Utterance]:
    return read_jsonl(Path(root) / f"{name}.jsonl")


def write_dataset(root: Path, task: str, seed: int, splits) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, utts in zip(("train", "val", "test"), splits):
        write_split(root, name, utts)
    info = {"task": task, "seed": seed, "d_in": D_IN,
            "sizes": {k: len(v) for k, v in zip(("train", "val", "test"), splits)}}
    (root / "dataset.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")


def read_dataset_info(root: Path) -> dict:
    p = Path(root) / "dataset.json"
    return json.loads(p.read_text()) if p.exists() else {}


# ---------------------------------------------------------------- synthetic frames


def word_signature(word: str) -> np.ndarray:
    """Fixed 6-dim acoustic signature of a word, independent of any corpus seed."""
    r = Rng(zlib.crc32(word.encode("utf-8")))
    return np.array([r.normal() for _ in range(6)])


class _FrameBuilder:
    """Accumulates frames word by word."""

    def __init__(self, rng: Rng, noise: float = 0.1):
        self.rng = rng
        self.noise = noise
        self.rows: list[list[float]] = []
        self.spans: list[tuple[int, int]] = []

    def word(self, w: str, prosody=None, timbre: float = 0.0) -> tuple[int, int]:
        sig = word_signature(w)
        n = 3 + self.rng.randint(3)
        start = len(self.rows)
        for k in range(n):
            row = [sig[c] + self.noise * self.rng.normal() for c in range(6)]
            p = 0.0 if prosody is None else prosody(k, n)
            row.append(p + 0.05 * self.rng.normal())
            row.append(timbre + 0.1 * self.rng.normal())
            self.rows.append(row)
        self.spans.append((start, start + n))
        return start, start + n

    def array(self) -> np.ndarray:
        while len(self.rows) < MIN_FRAMES:
            self.rows.append([0.05 * self.rng.normal() for _ in range(D_IN)])
        return np.array(self.rows, dtype=DTYPE)


def _rise(k, n):
    return 0.4 + 0.8 * (k + 1) / n


def _fall(k, n):
    return -0.4 - 0.8 * (k + 1) / n


def _comma(k, n):
    return 0.3


# ---------------------------------------------------------------- punct


_NAMES = ["john", "mary", "anna", "peter", "paris", "london"]
_OBJECTS = ["the park", "the movie", "the dog", "the car", "the book", "the train",
            "the house", "the music", "the city", "the beach"]
_VERBS = ["like", "see", "want", "need", "remember", "know", "love", "find"]
_AMBIG_SUBJ = ["you", "we", "they"]
_INTERJ = ["well", "yes", "so", "oh", "no"]
_STATE_PREFIX = ["i think", "i know", "i guess", "it seems"]
_WH = ["where is", "what is", "when is", "why is", "how is"]
_AUX = ["do you", "can we", "did they", "will you", "should we"]


def _cap(w: str, first: bool) -> str:
    return "Cp" if first or w == "i" or w in _NAMES else "0"


def _punct_sentence(rng: Rng):
    """One sentence as (words, final mark, ambiguous flag, comma indices).

    Half of all sentences are bare declaratives whose mark is prosodic only.
    """
    family = min(rng.randint(6), 3)
    words: list[str] = []
    commas: list[int] = []
    if rng.random() < 0.3:
        words.append(rng.choice(_INTERJ))
        commas.append(0)
    elif rng.random() < 0.15:
        words.append(rng.choice(_NAMES))
        commas.append(0)
    obj = rng.choice(_OBJECTS).split()
    if family == 0:                                   # statement, lexical cue
        words += rng.choice(_STATE_PREFIX).split() + [rng.choice(_AMBIG_SUBJ), rng.choice(_VERBS)] + obj
        mark, ambiguous = "Pr", False
    elif family == 1:                                 # wh-question
        words += rng.choice(_WH).split() + obj
        mark, ambiguous = "Qus", False
    elif family == 2:                                 # aux question
        words += rng.choice(_AUX).split() + [rng.choice(_VERBS)] + obj
        mark, ambiguous = "Qus", False
    else:                                             # bare declarative: "." or "?" by prosody only
        words += [rng.choice(_AMBIG_SUBJ), rng.choice(_VERBS)] + obj
        mark, ambiguous = ("Qus" if rng.random() < 0.5 else "Pr"), True
    return words, mark, ambiguous, commas


def _gen_punct(rng: Rng, uid: str) -> Utterance:
    fb = _FrameBuilder(rng)
    timbre = 0.3 * rng.normal()
    tokens: list[str] = []
    tags: list[int] = []
    ambiguous_pos: list[int] = []
    n_sent = 1 if rng.random() < 0.7 else 2
    for _ in range(n_sent):
        words, mark, amb, commas = _punct_sentence(rng)
        for i, w in enumerate(words):
            last = i == len(words) - 1
            punct = mark if last else ("Cm" if i in commas else "0")
            prosody = (_rise if mark == "Qus" else _fall) if last else (_comma if punct == "Cm" else None)
            fb.word(w, prosody, timbre)
            if last and amb:
                ambiguous_pos.append(len(tokens))
            tokens.append(w)
            tags.append(rich_tag_id(_cap(w, i == 0), punct))
    return Utterance(uid, tokens, fb.array(), tags,
                     meta={"ambiguous": ambiguous_pos, "frame_spans": [list(sp) for sp in fb.spans]})


# ---------------------------------------------------------------- roles


_AGENT = ["how can i help you", "may i have your phone number", "is it pick up or delivery",
          "your total is twenty dollars", "thank you for calling", "what would you like to order",
          "can i get your address", "anything else for you today", "let me check that for you",
          "it will be ready in thirty minutes"]
_CLIENT = ["i want to order a pizza", "my number is five one nine", "it's a delivery",
           "i live on main street", "can i get extra cheese", "i don't know my number",
           "that's all thanks", "i would like two large pizzas", "do you have any specials",
           "my name is john"]
_NEUTRAL = ["okay", "yes", "um let's see", "uh huh", "sure", "right", "yeah okay", "hmm",
            "alright", "no"]


def _gen_roles(rng: Rng, uid: str) -> Utterance:
    fb = _FrameBuilder(rng)
    tokens: list[str] = []
    tags: list[int] = []
    segments = []
    for _ in range(3 + rng.randint(4)):
        role = rng.randint(2)
        neutral = rng.random() < 0.2
        phrase = rng.choice(_NEUTRAL if neutral else (_AGENT if role == 1 else _CLIENT))
        timbre = 1.0 if role == 1 else -1.0
        start = len(tokens)
        for w in phrase.split():
            fb.word(w, None, timbre)
            tokens.append(w)
            tags.append(role)
        segments.append((start, len(tokens) - 1, role, neutral))
    turns: list[list[int]] = []
    for s, e, r, _ in segments:
        if turns and turns[-1][2] == r:
            turns[-1][1] = e
        else:
            turns.append([s, e, r])
    neutral_pos = [i for s, e, _, n in segments if n for i in range(s, e + 1)]
    return Utterance(uid, tokens, fb.array(), tags,
                     meta={"turns": turns, "neutral": neutral_pos})


# ---------------------------------------------------------------- sentiment


_POLAR = {2: ["amazing", "wonderful", "fantastic"], 1: ["good", "nice", "fine"],
          -1: ["bad", "boring", "poor"], -2: ["terrible", "awful", "horrible"]}
_SENT_SUBJ = ["the movie", "the food", "the show", "the trip", "the game", "the service"]
_SENT_FRAME = ["was", "is", "looked", "felt"]
_FILLER = ["really", "quite", "today", "honestly", "overall"]


def _gen_sentiment(rng: Rng, uid: str) -> Utterance:
    polarity = rng.randint(5) - 2
    arousal = rng.randint(3) - 1
    words = rng.choice(_SENT_SUBJ).split() + [rng.choice(_SENT_FRAME)]
    if rng.random() < 0.5:
        words.append(rng.choice(_FILLER))
    words.append(rng.choice(_POLAR[polarity]) if polarity else rng.choice(["okay", "average", "normal"]))
    label = max(-3, min(3, polarity + arousal)) + 3
    text_only = rng.random() < 0.1
    frames = None
    if not text_only:
        fb = _FrameBuilder(rng)
        for w in words:
            fb.word(w, lambda k, n: float(arousal), 0.3 * rng.normal())
        frames = fb.array()
    return Utterance(uid, words, frames, None, label,
                     meta={"polarity": polarity, "arousal": arousal})


# ---------------------------------------------------------------- intent


INTENTS = {"check_balance": "what is my balance for", "pay_bill": "i want to pay the bill for",
           "order_food": "please order food for", "book_ride": "book me a ride for",
           "set_alarm": "set an alarm for"}
ENTITIES = ["today", "tomorrow", "monday", "friday", "tonight"]
_NOISE_WORDS = ["the", "a", "uh", "for", "to", "my", "an", "four", "too", "bill", "fall"]


def _noisy(words: list[str], rng: Rng, p: float) -> list[str]:
    return [rng.choice(_NOISE_WORDS) if rng.random() < p else w for w in words]


def _gen_intent(rng: Rng, uid: str) -> Utterance:
    intent = rng.randint(len(INTENTS))
    entity = rng.randint(len(ENTITIES))
    truth = list(INTENTS.values())[intent].split() + [ENTITIES[entity]]
    confusable = rng.random() < 0.15
    hyps = []
    for _ in range(2):
        h = _noisy(truth, rng, 0.15)
        if confusable:
            h[-1] = ENTITIES[(entity + 1 + rng.randint(len(ENTITIES) - 1)) % len(ENTITIES)]
        hyps.append(h)
    fb = _FrameBuilder(rng)
    code = (entity - 2) / 2.0 if confusable else 0.0
    for w in truth:
        fb.word(w, None, code)
    return Utterance(uid, concat_nbest(hyps), fb.array(), None, intent, entity,
                     meta={"confusable": confusable})


_GENERATORS = {"punct": _gen_punct, "roles": _gen_roles, "sentiment": _gen_sentiment,
               "intent": _gen_intent}


def task_kind(task: str) -> str:
    return {"punct": "tag", "roles": "tag", "sentiment": "cls", "intent": "multi"}[task]


def task_classes(task: str) -> tuple[int, int]:
    return {"punct": (len(RICH_TAGS), 0), "roles": (2, 0), "sentiment": (7, 0),
            "intent": (len(INTENTS), len(ENTITIES))}[task]


def tag_names(task: str) -> tuple[str, ...]:
    return RICH_TAGS if task == "punct" else ROLE_TAGS


def gen_corpus(task: str, n: int, seed: int):
    """Deterministic (train, val, test) synthetic splits, 80/10/10."""
    if task not in _GENERATORS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 30:
        raise DataError(f"need n >= 30 utterances, got {n}")
    rng = Rng(seed)
    gen = _GENERATORS[task]
    utts = [gen(rng, f"{task}-{i:06d}") for i in range(n)]
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return utts[:n_train], utts[n_train:n_train + n_val], utts[n_train + n_val:]
