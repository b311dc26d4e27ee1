"""Ready-made desk-scale experiments on the bundled synthetic fixtures.

``materialize(name, directory)`` writes the fixture data plus an experiment
config next to it and returns the config path, so every preset runs through
the same file-based path as a user-written config.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from . import fixtures
from .experiments import ModelConfig
from .fixtures import write_pairs_with_ids
from .miner import build_index, mine_hard_negatives, pool_from_pairs, random_negatives

# The toy encoder wants a much larger step size than the full-size recipe
# (1e-5); temperature stays at 0.02.
_TRAINER = {"batch_size": 32, "learning_rate": 1e-2, "warmup_steps": 20, "total_steps": 200,
            "loss": {"variant": "in_batch", "temperature": 0.02, "num_negatives": 7}}

PRESETS = {
    "separable": {
        "kind": "scale_sweep",
        "model": {"hash_buckets": 16384, "d_embed": 64, "d_out": 64, "lora_rank": 8},
        "trainer": {**_TRAINER, "batch_size": 64, "warmup_steps": 50, "total_steps": 500},
        "sources": {"train": "train.jsonl"},
        "sizes": [200],
        "seeds": [0],
        "eval_tasks": ["tasks/separable-eval"],
    },
    "scale": {
        "kind": "scale_sweep",
        "model": {"hash_buckets": 4096, "d_embed": 64, "d_out": 64, "lora_rank": 8},
        "trainer": _TRAINER,
        "sources": {"fr-syn": "train.jsonl"},
        "sizes": [50, 100, 200, 400],
        "seeds": [0, 1, 2],
        "eval_tasks": ["tasks/clustered-eval"],
    },
    "negatives": {
        "kind": "negative_comparison",
        "model": {"hash_buckets": 16384, "d_embed": 64, "d_out": 64, "lora_rank": 8},
        "trainer": {**_TRAINER, "warmup_steps": 50, "total_steps": 300},
        "arms": [
            {"name": "hard", "pairs": "mined.jsonl", "variant": "hard_negatives"},
            {"name": "vanilla", "pairs": "train.jsonl", "variant": "in_batch"},
        ],
        "seeds": [0, 1, 2, 3, 4],
        "eval_tasks": ["tasks/distractor-eval"],
    },
    "mixture": {
        "kind": "mixture_study",
        "model": {"hash_buckets": 4096, "d_embed": 64, "d_out": 64, "lora_rank": 8},
        "trainer": _TRAINER,
        "sources": {"en-syn": "en-syn.jsonl", "fr-syn": "fr-syn.jsonl", "en-mix": "en-mix.jsonl"},
        "mixtures": {
            "En-Mix": {"en-mix": 1.0},
            "Mul-Syn": {"en-syn": 0.5, "fr-syn": 0.5},
            "En-Syn + En-Mix": {"en-syn": 0.5, "en-mix": 0.5},
            "All": {"en-syn": 1.0, "fr-syn": 1.0, "en-mix": 1.0},
        },
        "mixture_size": 120,
        "seeds": [0, 1],
        "eval_tasks": ["tasks/enseparable-eval", "tasks/frseparable-eval",
                       "tasks/mxseparable-eval"],
    },
}

FIXTURES = {
    "separable": lambda seed: fixtures.separable(seed),
    "scale": lambda seed: fixtures.clustered(seed),
    "negatives": lambda seed: fixtures.distractors(seed),
    "mixture": lambda seed: fixtures.bilingual(seed),
}


def preset_config(name: str) -> dict:
    return copy.deepcopy(PRESETS[name])


def materialize(name: str, directory: str | Path, seed: int = 0,
                overrides: dict | None = None) -> Path:
    """Write fixture ``name`` and its experiment config under ``directory``."""
    d = Path(directory)
    fx = FIXTURES[name](seed)
    fx.write(d)
    cfg = preset_config(name)
    for key, value in (overrides or {}).items():
        cfg[key] = value
    if name == "negatives":
        # mined with the untrained starting model, as the backbone would be
        init = ModelConfig(**cfg["model"]).build()
        pool = pool_from_pairs(fx.pairs)
        index = build_index(init, pool)
        k = cfg["trainer"]["loss"]["num_negatives"]
        mined = mine_hard_negatives(fx.pairs, init, index, K=k, seed=seed)
        write_pairs_with_ids(d / "mined.jsonl", [m.to_training_pair() for m in mined])
        rand = random_negatives(fx.pairs, pool, k, seed=seed)
        write_pairs_with_ids(d / "random.jsonl", [m.to_training_pair() for m in rand])
    path = d / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


def run_preset(name: str, workdir: str | Path, out_root: str | Path | None = None,
               seed: int = 0, overrides: dict | None = None):
    """Materialize preset ``name`` under ``workdir`` and run it."""
    from .experiments import load_experiment_config, run_experiment

    cfg = load_experiment_config(materialize(name, workdir, seed, overrides))
    return run_experiment(cfg, out_root)
