"""Command-line entry point: gen-data, train, eval, predict, grad-check.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.

Config files are flat ``section.key = value`` lines; ``#`` starts a comment.
Sections: ``run`` (task, fusion, seed, data, out, n), ``model`` (d_model,
heads, speech_layers, text_layers, d_in, k_max, vocab_size) and ``train``
(lr, batch_size, freeze_steps, patience, max_epochs, max_steps,
eval_batch_size).  ``model.vocab_size`` caps the vocabulary (0 = no cap).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import attention_weights
from .data import (
    ENTITIES, INTENTS, ROLE_TAGS, TASKS, DataError, Utterance, Vocab, batch_pad, decode_tags,
    gen_corpus, read_dataset_info, read_jsonl, read_split, task_classes, task_kind, write_dataset,
)
from .encoders import CLS, EOU, SPECIALS
from .heads import FUSION_MODES
from .model import Model, ModelConfig
from .tensor import ConfigError, grad_check
from .training import (
    CheckpointError, TrainConfig, TrainingDiverged, evaluate, load_model, save_model, train,
    train_config_dict,
)

log = logging.getLogger("xstitch")

MODEL_KEYS = ("d_model", "heads", "speech_layers", "text_layers", "d_in", "k_max", "vocab_size")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
RUN_KEYS = ("task", "fusion", "seed", "data", "out", "n")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    task: str = "punct"
    fusion: str = "xse"
    seed: int = 0
    data: str = ""
    out: str = "runs/default"
    n: int = 0                 # generate an in-memory corpus when no data dir is given
    model: dict = field(default_factory=lambda: {"d_model": 64, "heads": 8, "speech_layers": 4,
                                                 "text_layers": 4, "d_in": 8, "k_max": 8,
                                                 "vocab_size": 0})
    train: dict = field(default_factory=lambda: {k: v for k, v in train_config_dict(TrainConfig()).items()
                                                 if k != "seed"})

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"run.task must be one of {TASKS}, got {self.task!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"run.fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if task_kind(self.task) == "tag" and self.fusion not in ("xse", "te"):
            raise ConfigError(f"tagging task {self.task!r} needs the text stream; use xse or te")
        if not self.data and self.n < 30:
            raise ConfigError("set run.data to a dataset dir or run.n >= 30 to generate one")
        if self.data and not Path(self.data).is_dir():
            raise ConfigError(f"run.data {self.data!r} is not a directory")
        self.train_config().validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("'\"")


def apply_setting(cfg: RunConfig, key: str, raw) -> None:
    section, _, name = key.strip().partition(".")
    value = _parse_value(raw) if isinstance(raw, str) else raw
    if section == "run" and name in RUN_KEYS:
        want = type(getattr(cfg, name))
        if want is int and not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {raw!r}")
        setattr(cfg, name, value if want is int else str(value))
    elif section == "model" and name in MODEL_KEYS:
        if not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {raw!r}")
        cfg.model[name] = value
    elif section == "train" and name in TRAIN_KEYS:
        want = type(cfg.train[name])
        if not isinstance(value, (int, float)) or (want is int and not isinstance(value, int)):
            raise ConfigError(f"{key} must be a {want.__name__}, got {raw!r}")
        cfg.train[name] = want(value)
    else:
        raise ConfigError(f"unknown config key {key!r}")


def load_config(path: str | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path!r} not found")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key, raw = line.split("=", 1)
            apply_setting(cfg, key, raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg


# ---------------------------------------------------------------- manifests


def blob_hash(data: bytes) -> str:
    """git-style blob id: sha1 over 'blob <len>\\0' + content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> tuple[dict, str]:
    files: dict[str, str] = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            items = [(str(q.relative_to(p)), q) for q in sorted(p.rglob("*")) if q.is_file()]
        else:
            items = [(p.name, p)]
        for key, q in items:
            if q.name.endswith("manifest.json"):
                continue
            files[key] = blob_hash(q.read_bytes())
    tree = "".join(f"{h} {k}\n" for k, h in sorted(files.items()))
    return files, hashlib.sha1(tree.encode()).hexdigest()


def write_manifest(path: Path, command: str, argv: list[str], config: dict, seed, inputs) -> None:
    files, digest = hash_inputs(inputs)
    manifest = {"command": command, "argv": argv, "config": config, "seed": seed,
                "inputs": files, "content_hash": digest}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    splits = gen_corpus(args.task, args.n, args.seed)
    out = Path(args.out)
    write_dataset(out, args.task, args.seed, splits)
    write_manifest(out / "manifest.json", "gen-data", argv,
                   {"task": args.task, "n": args.n}, args.seed, [out])
    print(f"wrote {sum(len(s) for s in splits)} utterances to {out}")
    return 0


def load_splits(cfg: RunConfig):
    if cfg.data:
        info = read_dataset_info(Path(cfg.data))
        if info and info.get("task") != cfg.task:
            raise ConfigError(f"dataset {cfg.data} holds task {info.get('task')!r}, config says {cfg.task!r}")
        return [read_split(Path(cfg.data), s) for s in ("train", "val", "test")]
    return list(gen_corpus(cfg.task, cfg.n, cfg.seed))


def build_model(cfg: RunConfig, train_set) -> Model:
    m = cfg.model
    vocab = Vocab.build(train_set, max_size=m["vocab_size"] or None)
    n1, n2 = task_classes(cfg.task)
    mc = ModelConfig(kind=task_kind(cfg.task), n_out=n1, n_out2=n2, fusion=cfg.fusion,
                     d_model=m["d_model"], heads=m["heads"], speech_layers=m["speech_layers"],
                     text_layers=m["text_layers"], d_in=m["d_in"], k_max=m["k_max"],
                     vocab_size=len(vocab))
    return Model(mc, vocab, seed=cfg.seed)


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config, args.set)
    if args.data is not None:
        cfg.data = args.data
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    tr, va, te = load_splits(cfg)
    model = build_model(cfg, tr)
    res = train(model, tr, va, cfg.train_config(), cfg.task)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.task, out / "model.ckpt",
               {"step": res.best_step, "epoch": res.best_epoch, "val_metric": res.best_metric,
                "run": cfg.to_dict()})
    (out / "history.json").write_text(_dump({"history": res.history, "best_metric": res.best_metric,
                                             "best_step": res.best_step, "steps": res.steps}) + "\n")
    metrics = {"val": evaluate(model, va, cfg.task), "test": evaluate(model, te, cfg.task)}
    (out / "metrics.json").write_text(_dump(metrics) + "\n")
    inputs = [p for p in (args.config, cfg.data) if p]
    write_manifest(out / "manifest.json", "train", argv, cfg.to_dict(), cfg.seed, inputs)
    print(f"best val {res.best_metric:.3f} at step {res.best_step}; outputs in {out}")
    return 0


def cmd_eval(args, argv) -> int:
    model, meta = load_model(args.ckpt)
    utts = read_split(Path(args.data), args.split)
    if not utts:
        raise DataError(f"split {args.split!r} in {args.data} is empty")
    metrics = evaluate(model, utts, meta["task"])
    text = _dump(metrics)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", argv,
                       {"split": args.split, "task": meta["task"]}, None, [args.ckpt, args.data])
    print(text)
    return 0


_WORD = re.compile(r"\[eou\]|[a-z0-9'\-]+")


def read_predict_input(path: Path) -> list[Utterance]:
    if not path.is_file():
        raise DataError(f"input file {path} not found")
    if path.suffix == ".jsonl":
        return read_jsonl(path)
    utts = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        words = [SPECIALS[EOU] if w == "[eou]" else w for w in _WORD.findall(line.lower())]
        if words:
            utts.append(Utterance(f"line-{i + 1}", words))
    if not utts:
        raise DataError(f"{path}: no input lines")
    return utts


def format_prediction(task: str, u: Utterance, pred) -> str:
    if task == "punct":
        return decode_tags(u.tokens, pred)
    if task == "roles":
        return " ".join(f"{w}|{ROLE_TAGS[t]}" for w, t in zip(u.tokens, pred))
    if task == "sentiment":
        return f"sentiment={pred - 3:+d}"
    return f"intent={list(INTENTS)[pred[0]]} entity={ENTITIES[pred[1]]}"


def cmd_predict(args, argv) -> int:
    model, meta = load_model(args.ckpt)
    task = meta["task"]
    if args.attn_out and model.cfg.fusion != "xse":
        raise ConfigError("--attn-out needs a cross-stitched (xse) model")
    utts = read_predict_input(Path(args.input))
    lines, maps = [], []
    for u in utts:
        batch = batch_pad([u], model.vocab, model.cfg.d_in)
        pred = model.predict(batch)[0]
        lines.append(f"{u.id}\t{format_prediction(task, u, pred)}")
        if args.attn_out and u.has_speech:
            cache = model.forward(batch)["cache"]["xs"]["tf"][1]
            w = attention_weights(cache)[0].mean(axis=0)
            for i, tok in enumerate([SPECIALS[CLS]] + u.tokens):
                maps.append({"id": u.id, "query": i, "token": tok, "weights": w[i].tolist()})
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    if args.attn_out:
        Path(args.attn_out).write_text("".join(json.dumps(m) + "\n" for m in maps))
    if args.out or args.attn_out:
        target = Path(args.out or args.attn_out)
        write_manifest(target.with_name(target.stem + ".manifest.json"), "predict", argv,
                       {"task": task}, None, [args.ckpt, args.input])
    return 0


def cmd_grad_check(args, argv) -> int:
    cfg = load_config(args.config, args.set)
    if cfg.n < 30 and not cfg.data:
        cfg.n = 30
    cfg.validate()
    tr = load_splits(cfg)[0]
    model = build_model(cfg, tr)
    # move off the symmetric init so no gradient is exactly degenerate
    r = np.random.default_rng(cfg.seed)
    for _, p in model.ps.items():
        p.value += r.normal(scale=0.1, size=p.value.shape)
    batch = batch_pad(tr[:2], model.vocab, model.cfg.d_in)
    rep = grad_check(lambda ps: model.loss_and_grad(batch), lambda ps: model.loss(batch),
                     model.ps, tol=args.tol, seed=cfg.seed)
    for line in rep.lines():
        print(line)
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status}: {len(rep.entries) - len(rep.failures())}/{len(rep.entries)} tensors within tol {args.tol:g}")
    if args.out:
        out = Path(args.out)
        out.write_text(_dump({"passed": rep.passed, "tol": args.tol,
                              "entries": [asdict(e) for e in rep.entries]}) + "\n")
        write_manifest(out.with_name(out.stem + ".manifest.json"), "grad-check", argv,
                       cfg.to_dict(), cfg.seed, [p for p in (args.config, cfg.data) if p])
    return 0 if rep.passed else 1


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xstitch", description="Cross-stitched speech/text encoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--task", required=True, choices=TASKS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fine-tune a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")

    r = sub.add_parser("predict", help="tag or classify new inputs")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help="JSON-lines records or plain text, one per line")
    r.add_argument("--out")
    r.add_argument("--attn-out")

    c = sub.add_parser("grad-check", help="finite-difference check of the configured model")
    c.add_argument("--config", required=True)
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "grad-check": cmd_grad_check}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"xstitch: usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:       # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"xstitch: usage error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, CheckpointError, TrainingDiverged, ValueError, OSError) as e:
        print(f"xstitch: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
