"""Contrastive training loop: Adam, warmup + linear decay, seeded batching."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import TrainingPair
from .errors import EmbkitError, NonFiniteGradient, ShapeMismatch, StepOutOfRange
from .loss import (
    LossConfig,
    LossVariant,
    block_from_embeddings,
    contrastive_loss,
    embedding_gradients,
)
from .model import Gradients, ModelParams, backward_batch, forward_batch, tokenize

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

# batch size / learning rate / warmup reported for the full-size model
FULL_SIZE_RECIPE = {"batch_size": 1024, "learning_rate": 1e-5, "warmup_steps": 100}


@dataclass
class TrainerConfig:
    total_steps: int
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    adapter_only: bool = False

    def __post_init__(self):
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.total_steps > 0 and self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.loss.variant is LossVariant.IN_BATCH and self.batch_size < 2:
            raise ValueError("in-batch negatives need batch_size >= 2")

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        return d


def lr_at(step: int, cfg: TrainerConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0 at the last step."""
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step / cfg.warmup_steps)
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.learning_rate
    return cfg.learning_rate * ((cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()},
                   {k: np.zeros_like(a) for k, a in tensors.items()})


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place.

    ``params`` is a :class:`ModelParams` or a dict of arrays; ``grads`` the
    matching :class:`Gradients` (row-sparse embedding) or dict.  Tensors named
    in ``grads.frozen`` are skipped.  Returns ``(params, state)``.
    """
    tensors = params.tensors() if isinstance(params, ModelParams) else params
    if isinstance(grads, Gradients):
        items = list(grads.items())
        frozen = grads.frozen
        sparse_rows = {"embed": grads.embed_rows}
    else:
        items = list(grads.items())
        frozen = frozenset()
        sparse_rows = {}
    for name, g in items:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}", name)
    if not state.m:
        fresh = AdamState.zeros_like(tensors)
        state.m, state.v = fresh.m, fresh.v

    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, g in items:
        if name in frozen:
            continue
        p, m, v = tensors[name], state.m[name], state.v[name]
        if name in sparse_rows:
            rows = sparse_rows[name]
            m *= BETA1
            m[rows] += (1.0 - BETA1) * g
            v *= BETA2
            v[rows] += (1.0 - BETA2) * g * g
        else:
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


@dataclass
class EncodedPair:
    query: list[int]
    pos: list[int]
    negs: list[list[int]]


def encode_pairs(params: ModelParams, pairs: Sequence[TrainingPair]) -> list[EncodedPair]:
    tok = params.tokenizer
    return [
        EncodedPair(tokenize(p.query, tok, True), tokenize(p.pos, tok),
                    [tokenize(n, tok) for n in p.negs])
        for p in pairs
    ]


def batch_loss_and_grads(params: ModelParams, batch: Sequence[EncodedPair], loss_cfg: LossConfig,
                         adapter_only: bool = False) -> tuple[float, Gradients]:
    """Forward the batch end to end and return the loss with parameter gradients."""
    n = len(batch)
    k = loss_cfg.num_negatives if loss_cfg.needs_negatives else 0
    q_ids = [ex.query for ex in batch]
    d_ids = [ex.pos for ex in batch]
    for i, ex in enumerate(batch):
        if len(ex.negs) < k:
            raise ShapeMismatch(f"pair {i} has {len(ex.negs)} negatives, loss needs {k}")
        d_ids.extend(ex.negs[:k])

    q, q_cache = forward_batch(params, q_ids)
    d, d_cache = forward_batch(params, d_ids)
    p = d[:n]
    negs = d[n:].reshape(n, k, -1) if k else None
    result = contrastive_loss(block_from_embeddings(q, p, negs, loss_cfg.variant), loss_cfg)
    dq, dp, dn = embedding_gradients(result, q, p, negs)
    d_up = dp if dn is None else np.concatenate([dp, dn.reshape(n * k, -1)])
    grads = (backward_batch(params, q_ids, dq, q_cache, adapter_only)
             + backward_batch(params, d_ids, d_up, d_cache, adapter_only))
    return result.loss, grads


def train(params: ModelParams, pairs: Sequence[TrainingPair],
          cfg: TrainerConfig) -> tuple[ModelParams, list[dict]]:
    """Train a copy of ``params``; returns it with a per-step log of
    ``{"step", "lr", "loss"}``."""
    params = params.copy()
    step_log: list[dict] = []
    if cfg.total_steps == 0:
        return params, step_log
    if not pairs:
        raise ValueError("no training pairs")
    encoded = encode_pairs(params, pairs)
    rng = np.random.default_rng(cfg.seed)
    bsz = min(cfg.batch_size, len(encoded))
    per_epoch = len(encoded) // bsz
    state = AdamState()
    order = None
    for step in range(1, cfg.total_steps + 1):
        slot = (step - 1) % per_epoch
        if slot == 0:
            order = rng.permutation(len(encoded))
        batch = [encoded[i] for i in order[slot * bsz : (slot + 1) * bsz]]
        lr = lr_at(step, cfg)
        try:
            loss, grads = batch_loss_and_grads(params, batch, cfg.loss, cfg.adapter_only)
            adam_step(params, grads, state, lr)
        except EmbkitError as exc:
            exc.args = (f"step {step}: {exc.args[0] if exc.args else ''}",) + exc.args[1:]
            exc.step = step
            raise
        step_log.append({"step": step, "lr": lr, "loss": loss})
        if step % 100 == 0:
            log.debug("step %d lr %.3g loss %.4f", step, lr, loss)
    return params, step_log
