"""Command-line pipeline: generate -> mine -> train -> eval -> report.

Exit codes: 0 success, 1 fatal (including bad flags), 2 partial success.
Every command writes a ``manifest.json`` (or ``<stem>.manifest.json`` next to a
file output) recording input/output digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import datagen
from .data import read_documents, read_pairs, write_pairs
from .errors import EmbkitError, ManifestMismatch, NoRunsFound
from .evaluation import MetricReport, default_grouping, evaluate_tasks, load_task
from .experiments import ModelConfig, load_experiment_config, run_experiment
from .miner import build_index, mine_hard_negatives, pool_from_pairs, random_negatives
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainerConfig, train

log = logging.getLogger("embkit")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    command: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    seed: int | None = None

    @classmethod
    def build(cls, args: argparse.Namespace, inputs, outputs, started: float) -> "RunManifest":
        opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k != "func"}
        blob = json.dumps(opts, sort_keys=True, default=str).encode()
        return cls(
            config_hash=hashlib.sha256(blob).hexdigest(),
            command=args.command,
            inputs={str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
            outputs={str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
            wall_time=round(time.time() - started, 3),
            seed=getattr(args, "seed", None),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def verify_manifest(path: str | Path) -> RunManifest:
    """Load a manifest and check every recorded digest against the file on disk."""
    m = RunManifest(**json.loads(Path(path).read_text()))
    for fname, digest in {**m.inputs, **m.outputs}.items():
        if not Path(fname).is_file() or sha256_file(fname) != digest:
            raise ManifestMismatch(f"{fname} does not match its recorded digest")
    return m


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    started = time.time()
    languages = [code.strip() for code in args.languages.split(",") if code.strip()]
    if args.mock:
        client = datagen.MockClient(reject_languages=args.mock_reject or ())
    else:
        if not args.gen_config:
            raise UsageError("--gen-config is required unless --mock is given")
        client = datagen.ChatCompletionClient.from_config(args.gen_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = datagen.build_synthetic_dataset(
        args.corpus, languages, args.per_lang, client, out, seed=args.seed,
        min_len=args.min_len, max_len=args.max_len, concurrency=args.concurrency,
    )
    stats = datagen.stats_path(out)
    RunManifest.build(args, [args.corpus], [out, stats], started).write(
        _sidecar(out, ".manifest.json"))
    for lang in result.failed_languages:
        s = result.stats[lang]
        print(f"{lang}: {s.error or f'{s.transport_errors} transport errors'}", file=sys.stderr)
    return EXIT_PARTIAL if result.failed_languages else EXIT_OK


def cmd_mine(args) -> int:
    started = time.time()
    pairs = read_pairs(args.pairs)
    extra = read_documents(args.corpus) if args.corpus else []
    pool = pool_from_pairs(pairs, extra)
    if args.random:
        mined = random_negatives(pairs, pool, args.k, seed=args.seed)
    else:
        params = load_checkpoint(args.model)
        index = build_index(params, pool)
        mined = mine_hard_negatives(pairs, params, index, K=args.k,
                                    margin_filter=args.margin, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pairs(out, mined)
    inputs = [args.pairs] + ([args.corpus] if args.corpus else []) + ([args.model] if args.model else [])
    RunManifest.build(args, inputs, [out], started).write(_sidecar(out, ".manifest.json"))
    return EXIT_OK


def _load_yaml(path) -> dict:
    return yaml.safe_load(Path(path).read_text()) or {}


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_yaml(args.config)
    tcfg_d = dict(cfg.get("trainer", cfg))
    if args.seed is not None:
        tcfg_d["seed"] = args.seed
    tcfg = TrainerConfig(**tcfg_d)
    params = load_checkpoint(args.model) if args.model else ModelConfig(**cfg.get("model", {})).build()
    pairs = read_pairs(args.pairs)
    trained, step_log = train(params, pairs, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "model.ckpt")
    (out / "log.json").write_text(json.dumps(
        {"trainer": tcfg.to_json(), "steps": step_log}, indent=1) + "\n")
    inputs = [args.pairs, args.config] + ([args.model] if args.model else [])
    RunManifest.build(args, inputs, [out / "model.ckpt", out / "log.json"], started).write(
        out / "manifest.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    params = load_checkpoint(args.model)
    tasks = [load_task(d) for d in args.task_dir]
    grouping = _load_yaml(args.groups) if args.groups else default_grouping(tasks)
    report = evaluate_tasks(params, tasks, grouping)
    table = report.to_markdown()
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
        (out / "metrics.md").write_text(table)
        task_files = [Path(d) / f for d in args.task_dir
                      for f in ("queries.jsonl", "corpus.jsonl", "qrels.tsv")]
        RunManifest.build(args, [args.model, *task_files],
                          [out / "metrics.json", out / "metrics.md"], started).write(
            out / "manifest.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = load_experiment_config(args.config)
    result = run_experiment(cfg, args.out)
    sys.stdout.write(result.to_markdown())
    outputs = [result.run_dir / "results.csv", result.run_dir / "results.md"]
    RunManifest.build(args, [args.config], outputs, started).write(result.run_dir / "manifest.json")
    print(f"results in {result.run_dir}", file=sys.stderr)
    return EXIT_OK


def collect_runs(paths) -> list[tuple[str, MetricReport]]:
    runs = []
    for p in map(Path, paths):
        if (p / "metrics.json").is_file():
            runs.append((p.name, MetricReport.from_json(json.loads((p / "metrics.json").read_text()))))
        elif (p / "runs").is_dir():
            for sub in sorted((p / "runs").iterdir()):
                if (sub / "metrics.json").is_file():
                    runs.append((sub.name, MetricReport.from_json(
                        json.loads((sub / "metrics.json").read_text()))))
    if not runs:
        raise NoRunsFound("no metrics.json found under the given run directories")
    return runs


def report_tables(runs: list[tuple[str, MetricReport]]) -> tuple[str, str]:
    """Rows = runs, columns = union of aggregate groups (blank when absent)."""
    columns: list[str] = []
    for _, rep in runs:
        columns.extend(g for g in rep.aggregates if g not in columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", *columns])
    md = ["| run | " + " | ".join(columns) + " |", "|:---|" + "---:|" * len(columns)]
    for name, rep in runs:
        vals = [rep.aggregates.get(c) for c in columns]
        w.writerow([name, *("" if v is None else repr(v) for v in vals)])
        md.append(f"| {name} | " + " | ".join("" if v is None else f"{100 * v:.2f}" for v in vals)
                  + " |")
    return buf.getvalue(), "\n".join(md) + "\n"


def cmd_report(args) -> int:
    started = time.time()
    runs = collect_runs(args.run_dirs)
    csv_text, md_text = report_tables(runs)
    sys.stdout.write(md_text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(csv_text)
        (out / "report.md").write_text(md_text)
        RunManifest.build(args, [], [out / "report.csv", out / "report.md"], started).write(
            out / "manifest.json")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="build synthetic query-document pairs")
    p.add_argument("--corpus", required=True, help='JSONL of {"id","text","lang"}')
    p.add_argument("--languages", required=True, help="comma-separated ISO-639 codes")
    p.add_argument("--per-lang", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mock", action="store_true", help="use the offline mock generator")
    p.add_argument("--mock-reject", nargs="*", metavar="LANG",
                   help="languages the mock generator rejects")
    p.add_argument("--gen-config", help="YAML with endpoint, model[, temperature]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=100)
    p.add_argument("--max-len", type=int, default=1000)
    p.add_argument("--concurrency", type=int, default=4)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("mine", help="attach hard (or random) negatives to pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", help="checkpoint used for mining")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--corpus", help="extra candidate documents (JSONL id/text/task)")
    p.add_argument("--margin", type=float, default=None,
                   help="drop candidates scoring above sim(query, positive) - MARGIN")
    p.add_argument("--random", action="store_true", help="uniform random negatives instead")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="contrastive training")
    p.add_argument("--pairs", required=True)
    p.add_argument("--config", required=True, help="YAML with trainer (and model) sections")
    p.add_argument("--model", help="initial checkpoint; fresh init from config if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on task bundles")
    p.add_argument("--model", required=True)
    p.add_argument("--task-dir", required=True, nargs="+")
    p.add_argument("--groups", help="YAML mapping group label -> task names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge metrics from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FATAL
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "mine" and not args.random and not args.model:
        print(parser.format_usage() + "embkit: error: mine needs --model unless --random",
              file=sys.stderr)
        return EXIT_FATAL
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"embkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (EmbkitError, ValueError, KeyError, OSError) as exc:
        print(f"embkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
