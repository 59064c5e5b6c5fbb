import json

import pytest

from xstitch.cli import RunConfig, apply_setting, blob_hash, load_config, main
from xstitch.tensor import ConfigError

TINY = """\
# tiny desk run
run.task = {task}
run.fusion = {fusion}
run.data = {data}
model.d_model = 16
model.heads = 2
model.speech_layers = 1
model.text_layers = 1
train.lr = 1e-3
train.batch_size = 8
train.freeze_steps = 3
train.max_epochs = 1
"""


@pytest.fixture(scope="module")
def punct_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--task", "punct", "--n", "40", "--seed", "3", "--out", str(data)]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(TINY.format(task="punct", fusion="xse", data=data))
    out = root / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return root, data, cfg, out


def test_gen_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--task", "roles", "--n", "30", "--seed", "9",
                     "--out", str(tmp_path / d)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 30
    for f in files:
        if f.name != "manifest.json":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["content_hash"] == mb["content_hash"] and ma["seed"] == 9


def test_train_outputs_and_manifest(punct_run):
    _, _, _, out = punct_run
    assert {p.name for p in out.iterdir()} >= {"model.ckpt", "history.json", "metrics.json",
                                               "manifest.json"}
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0
    assert man["config"]["model"]["d_model"] == 16
    assert "run.cfg" in man["inputs"] and "train.jsonl" in man["inputs"]
    assert len(man["content_hash"]) == 40


def test_eval_emits_per_tag_report(punct_run, tmp_path, capsys):
    _, data, _, out = punct_run
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "model.ckpt"), "--data", str(data),
                 "--out", str(tmp_path / "m.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics["tags"]) == {"per_tag", "macro_f1"}
    assert "macro_f1" in metrics and "ambiguous_accuracy" in metrics
    assert json.loads((tmp_path / "m.json").read_text()) == metrics
    assert (tmp_path / "m.manifest.json").exists()


def test_predict_rich_text_shape_and_attention(punct_run, tmp_path, capsys):
    _, data, _, out = punct_run
    inp = tmp_path / "in.txt"
    inp.write_text("thank you i understand do you\n")
    capsys.readouterr()
    assert main(["predict", "--ckpt", str(out / "model.ckpt"), "--input", str(inp)]) == 0
    line = capsys.readouterr().out.strip()
    ident, text = line.split("\t")
    assert ident == "line-1"
    assert text.lower().replace(",", "").replace(".", "").replace("?", "") == \
        "thank you i understand do you"
    attn = tmp_path / "attn.jsonl"
    assert main(["predict", "--ckpt", str(out / "model.ckpt"), "--input", str(data / "test.jsonl"),
                 "--attn-out", str(attn)]) == 0
    rows = [json.loads(line) for line in attn.read_text().splitlines()]
    assert rows and all(abs(sum(r["weights"]) - 1) < 1e-9 for r in rows)
    first = [r for r in rows if r["id"] == rows[0]["id"]]
    assert [r["query"] for r in first] == list(range(len(first)))
    assert first[0]["token"] == "[CLS]"


def test_grad_check_command(punct_run, capsys):
    _, _, cfg, _ = punct_run
    assert main(["grad-check", "--config", str(cfg)]) == 0
    assert "PASS" in capsys.readouterr().out
    # an impossible tolerance must fail with exit 1
    assert main(["grad-check", "--config", str(cfg), "--tol", "0"]) == 1


def test_exit_codes(punct_run, tmp_path, capsys):
    _, _, cfg, _ = punct_run
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2
    assert main(["train", "--config", str(cfg), "--bogus-flag"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert main(["train", "--config", str(cfg), "--set", "model.nope=1"]) == 1
    assert main(["train", "--config", str(cfg), "--set", "run.fusion=se"]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
    assert main(["gen-data", "--task", "punct", "--n", "5", "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "error" in err


def test_config_parsing_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("run.task = sentiment  # trailing comment\nrun.fusion = se-te\ntrain.lr = 0.01\n"
                 "model.d_model = 32\nrun.n = 100\n")
    cfg = load_config(str(p), ["train.lr=0.5", "run.seed=4"])
    assert (cfg.task, cfg.fusion, cfg.n, cfg.seed) == ("sentiment", "se-te", 100, 4)
    assert cfg.train["lr"] == 0.5 and cfg.model["d_model"] == 32
    assert cfg.train_config().seed == 4
    cfg.validate()
    with pytest.raises(ConfigError):
        apply_setting(RunConfig(), "model.d_model", "wide")
    with pytest.raises(ConfigError):
        apply_setting(RunConfig(), "train.batch_size", "2.5")
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        load_config(str(bad))


def test_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("task", ["punct", "roles", "sentiment", "intent"])
def test_shipped_presets_validate(task):
    from pathlib import Path
    path = Path(__file__).parent.parent / "configs" / f"{task}.cfg"
    cfg = load_config(str(path))
    cfg.validate()
    assert cfg.task == task and cfg.model["d_model"] == 64 and cfg.train["freeze_steps"] == 200
