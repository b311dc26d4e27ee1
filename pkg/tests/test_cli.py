import csv
import io
import json
from pathlib import Path

import pytest

from embkit.cli import main, verify_manifest
from embkit.data import write_jsonl
from embkit.errors import ManifestMismatch
from embkit.fixtures import separable
from embkit.model import TokenizerConfig, init_params, save_checkpoint

HERE = Path(__file__).parent
TASKS = [str(HERE / "data" / "tasks" / n) for n in ("tiny-en", "tiny-fr", "tiny-ja")]
GOLDEN_MODEL = str(HERE / "data" / "golden-model.ckpt")


@pytest.fixture
def corpus(tmp_path):
    docs = [{"id": f"{lang}{i}", "text": " ".join(f"{lang}w{i}_{j}" for j in range(110 + i)), "lang": lang}
            for lang in ("en", "fr") for i in range(6)]
    docs += [{"id": f"de{i}", "text": "kurz", "lang": "de"} for i in range(3)]
    path = tmp_path / "corpus.jsonl"
    write_jsonl(path, docs)
    return path


@pytest.fixture
def train_setup(tmp_path):
    fx = separable(seed=0, n_pairs=30)
    fx.write(tmp_path / "fx")
    cfg = tmp_path / "train.yaml"
    cfg.write_text(
        "model: {hash_buckets: 1024, d_embed: 16, d_out: 16, lora_rank: 2}\n"
        "trainer: {total_steps: 15, batch_size: 8, warmup_steps: 3, learning_rate: 0.01,\n"
        "          loss: {variant: in_batch}}\n")
    return tmp_path / "fx" / "train.jsonl", cfg


# generate

def test_generate_mock(corpus, tmp_path):
    out = tmp_path / "gen" / "syn.jsonl"
    rc = main(["generate", "--corpus", str(corpus), "--languages", "en,fr", "--per-lang", "4",
               "--out", str(out), "--mock"])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 8
    m = verify_manifest(out.with_name("syn.manifest.json"))
    assert m.command == "generate" and m.seed == 0


def test_generate_missing_corpus_flag(tmp_path, capsys):
    rc = main(["generate", "--languages", "en", "--per-lang", "1", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "usage:" in capsys.readouterr().err


def test_generate_partial(corpus, tmp_path, capsys):
    out = tmp_path / "syn.jsonl"
    rc = main(["generate", "--corpus", str(corpus), "--languages", "en,de", "--per-lang", "3",
               "--out", str(out), "--mock"])
    assert rc == 2
    stats = json.loads((tmp_path / "syn.stats.json").read_text())
    assert stats["de"]["accepted"] == 0 and stats["de"]["error"]
    assert stats["en"]["accepted"] == 3
    assert "de:" in capsys.readouterr().err


def test_generate_needs_client_config(corpus, tmp_path):
    rc = main(["generate", "--corpus", str(corpus), "--languages", "en", "--per-lang", "1",
               "--out", str(tmp_path / "x.jsonl")])
    assert rc == 1


def test_generate_mock_rejection(corpus, tmp_path):
    out = tmp_path / "syn.jsonl"
    rc = main(["generate", "--corpus", str(corpus), "--languages", "en,fr", "--per-lang", "3",
               "--out", str(out), "--mock", "--mock-reject", "fr"])
    assert rc == 0
    langs = [json.loads(line)["language"] for line in out.read_text().splitlines()]
    assert langs == ["en"] * 3


def test_unknown_flag():
    assert main(["train", "--bogus"]) == 1


# train / mine / eval

def test_train_writes_outputs(train_setup, tmp_path):
    pairs, cfg = train_setup
    out = tmp_path / "run"
    assert main(["train", "--pairs", str(pairs), "--config", str(cfg), "--out", str(out), "--seed", "2"]) == 0
    log = json.loads((out / "log.json").read_text())
    assert len(log["steps"]) == 15 and log["trainer"]["seed"] == 2
    m = verify_manifest(out / "manifest.json")
    assert str(out / "model.ckpt") in m.outputs


def test_train_zero_steps_keeps_checkpoint(train_setup, tmp_path):
    pairs, _ = train_setup
    init = tmp_path / "init.ckpt"
    save_checkpoint(init_params(TokenizerConfig(hash_buckets=512), 8, 8, lora_rank=2, seed=1), init)
    cfg = tmp_path / "zero.yaml"
    cfg.write_text("total_steps: 0\nwarmup_steps: 0\n")
    out = tmp_path / "run"
    assert main(["train", "--pairs", str(pairs), "--config", str(cfg), "--model", str(init),
                 "--out", str(out)]) == 0
    assert (out / "model.ckpt").read_bytes() == init.read_bytes()


def test_train_bad_config_is_fatal(train_setup, tmp_path, capsys):
    pairs, _ = train_setup
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("total_steps: 5\nwarmup_steps: 9\n")
    assert main(["train", "--pairs", str(pairs), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "warmup_steps" in capsys.readouterr().err


def test_manifest_detects_tampering(train_setup, tmp_path):
    pairs, cfg = train_setup
    out = tmp_path / "run"
    main(["train", "--pairs", str(pairs), "--config", str(cfg), "--out", str(out)])
    (out / "log.json").write_text("{}")
    with pytest.raises(ManifestMismatch):
        verify_manifest(out / "manifest.json")


def test_mine_hard_and_random(train_setup, tmp_path):
    pairs, cfg = train_setup
    run = tmp_path / "run"
    main(["train", "--pairs", str(pairs), "--config", str(cfg), "--out", str(run)])
    mined = tmp_path / "mined.jsonl"
    assert main(["mine", "--pairs", str(pairs), "--model", str(run / "model.ckpt"),
                 "--out", str(mined), "--k", "3", "--margin", "0.05"]) == 0
    rows = [json.loads(line) for line in mined.read_text().splitlines()]
    assert len(rows) == 30 and all(len(r["negs"]) == 3 for r in rows)
    assert list(rows[0]) == ["query", "pos", "negs", "task", "lang"]
    rand = tmp_path / "rand.jsonl"
    assert main(["mine", "--pairs", str(pairs), "--random", "--out", str(rand), "--k", "3"]) == 0
    assert main(["mine", "--pairs", str(pairs), "--out", str(rand)]) == 1
    assert main(["mine", "--pairs", str(pairs), "--random", "--out", str(rand), "--k", "30"]) == 1


def test_eval_matches_golden_table(tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval", "--model", GOLDEN_MODEL, "--task-dir", *TASKS, "--out", str(out)]) == 0
    golden = (HERE / "golden" / "eval_table.md").read_text()
    assert capsys.readouterr().out == golden
    assert (out / "metrics.md").read_text() == golden
    verify_manifest(out / "manifest.json")


def test_golden_model_is_current():
    import sys

    sys.path.insert(0, str(HERE / "data"))
    try:
        from make_golden_model import golden_model
    finally:
        sys.path.pop(0)
    from embkit.model import checkpoint_bytes

    assert checkpoint_bytes(golden_model()) == Path(GOLDEN_MODEL).read_bytes()


def test_eval_custom_groups(tmp_path, capsys):
    groups = tmp_path / "groups.yaml"
    groups.write_text("Eur.: [tiny-en, tiny-fr]\n")
    assert main(["eval", "--model", GOLDEN_MODEL, "--task-dir", *TASKS, "--groups", str(groups)]) == 0
    assert "| Mean (Eur.) | 87.67 |" in capsys.readouterr().out


def test_eval_missing_task(tmp_path):
    assert main(["eval", "--model", GOLDEN_MODEL, "--task-dir", str(tmp_path)]) == 1


# sweep / report

def _write_sweep(tmp_path, sizes):
    separable(seed=0, n_pairs=30).write(tmp_path)
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(
        "kind: scale_sweep\n"
        "model: {hash_buckets: 1024, d_embed: 16, d_out: 16, lora_rank: 2}\n"
        "trainer: {total_steps: 6, batch_size: 8, warmup_steps: 2, learning_rate: 0.01,\n"
        "          loss: {variant: in_batch}}\n"
        f"sources: {{train: train.jsonl}}\nsizes: {sizes}\nseeds: [0, 1, 2]\n"
        "eval_tasks: [tasks/separable-eval]\n")
    return cfg


def test_sweep_empty_sizes(tmp_path):
    assert main(["sweep", "--config", str(_write_sweep(tmp_path, [])), "--out", str(tmp_path / "o")]) == 1


def test_sweep_and_report(tmp_path, capsys):
    cfg = _write_sweep(tmp_path, [30])
    out = tmp_path / "runs"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    [run_dir] = list(out.iterdir())
    verify_manifest(run_dir / "manifest.json")
    capsys.readouterr()

    rep = tmp_path / "report"
    assert main(["report", str(run_dir), "--out", str(rep)]) == 0
    md = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO((rep / "report.csv").read_text())))
    assert len(rows) == 3 and len(md.strip().splitlines()) == 5
    for row in rows:
        metrics = json.loads((run_dir / "runs" / row["run"] / "metrics.json").read_text())
        assert float(row["all"]) == metrics["aggregates"]["all"]


def test_report_union_of_columns(tmp_path, capsys):
    for name, aggs in (("r1", {"a": 0.5}), ("r2", {"b": 0.25})):
        (tmp_path / name).mkdir()
        (tmp_path / name / "metrics.json").write_text(json.dumps(
            {"per_task": {}, "aggregates": aggs, "groups": {}}))
    assert main(["report", str(tmp_path / "r1"), str(tmp_path / "r2")]) == 0
    assert capsys.readouterr().out == (
        "| run | a | b |\n|:---|---:|---:|\n| r1 | 50.00 |  |\n| r2 |  | 25.00 |\n")


def test_report_no_runs(tmp_path):
    assert main(["report", str(tmp_path)]) == 1
