"""Experiment runners: data-scale sweep, negative-strategy comparison and
data-mixture study.

Each runner reads a declarative config (YAML or JSON), trains one model per
(condition, seed) from a shared initialization, evaluates it on the
configured task bundles and writes::

    <out_root>/<kind>-<config hash>/
        config.json
        results.csv
        results.md
        runs/<condition>-seed<s>/{model.ckpt, log.json, metrics.json}

Metrics are computed on the checkpoint as saved (float32), so re-evaluating
a stored checkpoint reproduces them exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .data import TrainingPair, read_pairs
from .errors import EmptySource, InsufficientData
from .evaluation import MetricReport, RetrievalTask, default_grouping, evaluate_tasks, load_task
from .loss import LossConfig, LossVariant
from .model import ModelParams, TokenizerConfig, checkpoint_bytes, checkpoint_from_bytes, init_params
from .trainer import TrainerConfig, train

log = logging.getLogger(__name__)


class ExperimentKind(str, Enum):
    SCALE_SWEEP = "scale_sweep"
    NEGATIVE_COMPARISON = "negative_comparison"
    MIXTURE_STUDY = "mixture_study"


@dataclass
class ModelConfig:
    hash_buckets: int = 65536
    d_embed: int = 64
    d_out: int = 64
    lora_rank: int = 8
    lora_scale: float = 16.0
    init_seed: int = 0
    lowercase: bool = True
    max_query_tokens: int = 256
    max_doc_tokens: int = 512

    def build(self) -> ModelParams:
        tok = TokenizerConfig(self.hash_buckets, self.lowercase, self.max_query_tokens,
                              self.max_doc_tokens)
        return init_params(tok, self.d_embed, self.d_out, self.lora_rank, self.lora_scale,
                           seed=self.init_seed)


@dataclass
class Arm:
    name: str
    pairs: str
    variant: LossVariant = LossVariant.HARD_NEGATIVES

    def __post_init__(self):
        self.variant = LossVariant(self.variant)


@dataclass
class ExperimentConfig:
    kind: ExperimentKind
    trainer: TrainerConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_tasks: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    groups: dict[str, list[str]] | None = None
    sources: dict[str, str] = field(default_factory=dict)
    sizes: list[int] = field(default_factory=list)
    arms: list[Arm] = field(default_factory=list)
    mixtures: dict[str, dict[str, float]] = field(default_factory=dict)
    mixture_size: int | None = None
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.kind = ExperimentKind(self.kind)
        if not self.seeds:
            raise ValueError("at least one seed (repetition) is required")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path = ".") -> "ExperimentConfig":
        d = dict(d)
        trainer = dict(d.get("trainer", {}))
        trainer["loss"] = LossConfig(**trainer.get("loss", {}))
        return cls(
            kind=d["kind"],
            trainer=TrainerConfig(**trainer),
            model=ModelConfig(**d.get("model", {})),
            eval_tasks=list(d.get("eval_tasks", [])),
            seeds=list(d.get("seeds", [0, 1, 2])),
            groups=d.get("groups"),
            sources=dict(d.get("sources", {})),
            sizes=list(d.get("sizes", [])),
            arms=[Arm(**a) for a in d.get("arms", [])],
            mixtures={k: dict(v) for k, v in d.get("mixtures", {}).items()},
            mixture_size=d.get("mixture_size"),
            base_dir=Path(base_dir),
            raw=json.loads(json.dumps(d)),
        )

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self, out_root: str | Path) -> Path:
        return Path(out_root) / f"{self.kind.value}-{self.config_hash()}"


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_dict(yaml.safe_load(path.read_text()), path.parent)


@dataclass
class ExperimentResult:
    header: list[str]
    rows: list[list]
    run_dir: Path | None = None
    reports: dict[str, MetricReport] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.header) + " |",
                 "|" + "---|" * len(self.header)]
        for row in self.rows:
            cells = [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out_root: str | Path | None):
        self.cfg = cfg
        self.init = cfg.model.build()
        if not cfg.eval_tasks:
            raise InsufficientData("no eval tasks configured")
        self.tasks: list[RetrievalTask] = [load_task(cfg.resolve(t)) for t in cfg.eval_tasks]
        self.grouping = cfg.groups if cfg.groups is not None else default_grouping(self.tasks)
        self.run_dir = None
        if out_root is not None:
            self.run_dir = cfg.run_dir(out_root)
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(
                json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
        self.reports: dict[str, MetricReport] = {}

    def load_pairs(self, path: str) -> list[TrainingPair]:
        p = self.cfg.resolve(path)
        if not p.is_file():
            raise InsufficientData(f"training data {p} not found")
        pairs = read_pairs(p)
        if not pairs:
            raise InsufficientData(f"training data {p} is empty")
        return pairs

    def train_eval(self, label: str, seed: int, pairs: Sequence[TrainingPair],
                   variant: LossVariant | None = None) -> MetricReport:
        tcfg = self.cfg.trainer
        loss = tcfg.loss if variant is None else LossConfig(
            tcfg.loss.temperature, tcfg.loss.num_negatives if variant is not LossVariant.IN_BATCH
            else 0, variant)
        tcfg = TrainerConfig(tcfg.total_steps, tcfg.batch_size, tcfg.learning_rate,
                             tcfg.warmup_steps, seed, loss, tcfg.adapter_only)
        log.info("training %s seed %d on %d pairs", label, seed, len(pairs))
        trained, step_log = train(self.init, pairs, tcfg)
        blob = checkpoint_bytes(trained)
        trained = checkpoint_from_bytes(blob)
        report = evaluate_tasks(trained, self.tasks, self.grouping)
        name = f"{label}-seed{seed}"
        self.reports[name] = report
        if self.run_dir is not None:
            d = self.run_dir / "runs" / name
            d.mkdir(parents=True, exist_ok=True)
            (d / "model.ckpt").write_bytes(blob)
            (d / "log.json").write_text(json.dumps(
                {"trainer": tcfg.to_json(), "steps": step_log}, indent=1) + "\n")
            (d / "metrics.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
        return report

    def score(self, report: MetricReport) -> float:
        if "all" in report.aggregates:
            return report.aggregates["all"]
        return math.fsum(r["ndcg@10"] for r in report.per_task.values()) / len(report.per_task)

    def finish(self, result: ExperimentResult) -> ExperimentResult:
        result.run_dir = self.run_dir
        result.reports = self.reports
        if self.run_dir is not None:
            (self.run_dir / "results.csv").write_text(result.to_csv())
            (self.run_dir / "results.md").write_text(result.to_markdown())
        return result


def run_scale_sweep(cfg: ExperimentConfig, out_root: str | Path | None = None) -> ExperimentResult:
    """Train on nested seeded subsets of one source at each configured size."""
    if not cfg.sizes:
        raise InsufficientData("scale sweep needs at least one size")
    if any(s < 1 for s in cfg.sizes):
        raise InsufficientData(f"sizes must be positive, got {cfg.sizes}")
    if list(cfg.sizes) != sorted(cfg.sizes):
        raise ValueError(f"sizes must be ascending, got {cfg.sizes}")
    if len(cfg.sources) != 1:
        raise ValueError("scale sweep takes exactly one source")
    runner = _Runner(cfg, out_root)
    pairs = runner.load_pairs(next(iter(cfg.sources.values())))
    if cfg.sizes[-1] > len(pairs):
        raise InsufficientData(f"largest size {cfg.sizes[-1]} exceeds {len(pairs)} available pairs")
    rows = []
    for size in cfg.sizes:
        scores = []
        for seed in cfg.seeds:
            perm = np.random.default_rng(seed).permutation(len(pairs))[:size]
            subset = [pairs[i] for i in perm]
            scores.append(runner.score(runner.train_eval(f"size{size}", seed, subset)))
        rows.append([size, *mean_std(scores), len(scores)])
    return runner.finish(ExperimentResult(["train_size", "mean_ndcg@10", "std", "n_seeds"], rows))


def run_negative_comparison(cfg: ExperimentConfig,
                            out_root: str | Path | None = None) -> ExperimentResult:
    """Matched runs that differ only in their training data / negatives."""
    if len(cfg.arms) < 1:
        raise InsufficientData("negative comparison needs at least one arm")
    runner = _Runner(cfg, out_root)
    data = {arm.name: runner.load_pairs(arm.pairs) for arm in cfg.arms}
    rows = []
    for arm in cfg.arms:
        scores = [runner.score(runner.train_eval(arm.name, seed, data[arm.name], arm.variant))
                  for seed in cfg.seeds]
        rows.append([arm.name, *mean_std(scores), len(scores)])
    return runner.finish(ExperimentResult(["strategy", "mean_ndcg@10", "std", "n_seeds"], rows))


def mixture_counts(available: Mapping[str, int], weights: Mapping[str, float],
                   size: int) -> dict[str, int]:
    """Per-source counts summing to ``size`` (largest-remainder rounding,
    ties to the earlier source)."""
    total = math.fsum(weights.values())
    if not total > 0:
        raise ValueError("mixture weights must sum to a positive value")
    raw = {k: size * w / total for k, w in weights.items()}
    counts = {k: math.floor(v) for k, v in raw.items()}
    left = size - sum(counts.values())
    order = sorted(weights, key=lambda k: (-(raw[k] - counts[k]), list(weights).index(k)))
    for k in order[:left]:
        counts[k] += 1
    for k, c in counts.items():
        if c > available[k]:
            raise InsufficientData(f"source {k!r} has {available[k]} pairs, mixture needs {c}")
    return counts


def build_mixture(sources: Mapping[str, Sequence[TrainingPair]], weights: Mapping[str, float],
                  size: int | None = None) -> list[TrainingPair]:
    """Interleave sources in proportion to ``weights``.

    Each source contributes its first ``count`` pairs; the streams are merged
    by stratified round-robin (item ``j`` of a source with ``c`` items sits
    at fractional position ``(j + 0.5) / c``).
    """
    for name in weights:
        if name not in sources or not sources[name]:
            raise EmptySource(f"mixture source {name!r} is empty or missing")
    avail = {k: len(sources[k]) for k in weights}
    total_w = math.fsum(weights.values())
    if size is None:
        size = min(math.floor(avail[k] * total_w / w) for k, w in weights.items() if w > 0)
    counts = mixture_counts(avail, weights, size)
    keyed = []
    for s_idx, (name, c) in enumerate(counts.items()):
        for j in range(c):
            keyed.append(((j + 0.5) / c, s_idx, sources[name][j]))
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [p for _, _, p in keyed]


def run_mixture_experiment(cfg: ExperimentConfig,
                           out_root: str | Path | None = None) -> ExperimentResult:
    if len(cfg.sources) < 2:
        raise ValueError("mixture study needs at least two named sources")
    if not cfg.mixtures:
        raise ValueError("no mixtures configured")
    runner = _Runner(cfg, out_root)
    sources = {}
    for name, path in cfg.sources.items():
        p = cfg.resolve(path)
        sources[name] = read_pairs(p) if p.is_file() else []
    groups = list(runner.grouping)
    rows = []
    for label, weights in cfg.mixtures.items():
        pairs = build_mixture(sources, weights, cfg.mixture_size)
        per_seed = [runner.train_eval(_slug(label), seed, pairs) for seed in cfg.seeds]
        rows.append([label, *(math.fsum(r.aggregates[g] for r in per_seed) / len(per_seed)
                              for g in groups)])
    return runner.finish(ExperimentResult(["mixture", *groups], rows))


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)


RUNNERS = {
    ExperimentKind.SCALE_SWEEP: run_scale_sweep,
    ExperimentKind.NEGATIVE_COMPARISON: run_negative_comparison,
    ExperimentKind.MIXTURE_STUDY: run_mixture_experiment,
}


def run_experiment(cfg: ExperimentConfig, out_root: str | Path | None = None) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg, out_root)
