"""Temperature-scaled contrastive (InfoNCE) losses over cosine similarities.

Three variants share one softmax cross-entropy core:

* ``HARD_NEGATIVES``: each query sees its positive and its own K negatives.
* ``IN_BATCH``: each query sees every positive in the batch; the diagonal is
  its own.
* ``COMBINED``: the in-batch row followed by the K explicit negatives.

All returned gradients are with respect to the raw similarities (not the
similarities divided by the temperature).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NotSquare, ShapeMismatch, TemperatureNonPositive


class LossVariant(str, Enum):
    IN_BATCH = "in_batch"
    HARD_NEGATIVES = "hard_negatives"
    COMBINED = "combined"


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.02
    num_negatives: int = 7
    variant: LossVariant = LossVariant.HARD_NEGATIVES

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        _check_temperature(self.temperature)
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be non-negative")
        if self.variant is LossVariant.HARD_NEGATIVES and self.num_negatives < 1:
            raise ValueError("hard-negative loss needs at least one negative")

    @property
    def needs_negatives(self) -> bool:
        return self.variant is not LossVariant.IN_BATCH


@dataclass
class SimilarityBlock:
    pos: np.ndarray  # [N]
    neg: np.ndarray | None = None  # [N, K]
    inbatch: np.ndarray | None = None  # [N, N], diagonal = pos

    @property
    def n(self) -> int:
        return len(self.pos)


@dataclass
class LossResult:
    loss: float
    d_pos: np.ndarray | None = None
    d_neg: np.ndarray | None = None
    d_inbatch: np.ndarray | None = None


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise TemperatureNonPositive(f"temperature must be > 0, got {tau}")


def softmax_xent(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` rows against ``target`` columns, with
    its gradient w.r.t. the logits.  Max-shifted, so safe for large logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    e = np.exp(shifted)
    # log z = log1p(sum of the non-max terms): keeps full relative precision
    # when the softmax is nearly saturated and the loss is tiny
    others = e.copy()
    others[rows, top] = 0.0
    rest = others.sum(axis=1)
    z = (1.0 + rest)[:, None]
    losses = np.log1p(rest) - shifted[rows, target]
    grad = e / z
    # p_target - 1 cancels catastrophically when p_target ~ 1; for a target
    # holding the max it equals -rest / z exactly
    on_top = target == top
    grad[rows, target] -= 1.0
    grad[rows[on_top], target[on_top]] = -rest[on_top] / z[on_top, 0]
    return float(losses.sum() / n), grad / n


def hard_negative_loss(block: SimilarityBlock, cfg: LossConfig) -> LossResult:
    _check_temperature(cfg.temperature)
    pos = np.asarray(block.pos, dtype=np.float64)
    if block.neg is None:
        raise ShapeMismatch("hard-negative loss needs a negative similarity matrix")
    neg = np.asarray(block.neg, dtype=np.float64)
    if pos.ndim != 1 or pos.size == 0 or neg.shape != (pos.size, cfg.num_negatives):
        raise ShapeMismatch(
            f"expected pos [N] and neg [N, {cfg.num_negatives}], got {pos.shape} and {neg.shape}"
        )
    logits = np.concatenate([pos[:, None], neg], axis=1) / cfg.temperature
    loss, g = softmax_xent(logits, np.zeros(pos.size, dtype=np.int64))
    g /= cfg.temperature
    return LossResult(loss, d_pos=g[:, 0].copy(), d_neg=g[:, 1:].copy())


def _square_inbatch(block: SimilarityBlock) -> np.ndarray:
    if block.inbatch is None:
        raise ShapeMismatch("in-batch loss needs an in-batch similarity matrix")
    s = np.asarray(block.inbatch, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise NotSquare(f"in-batch similarities must be a non-empty square matrix, got {s.shape}")
    return s


def in_batch_loss(block: SimilarityBlock, cfg: LossConfig) -> LossResult:
    _check_temperature(cfg.temperature)
    s = _square_inbatch(block)
    n = s.shape[0]
    loss, g = softmax_xent(s / cfg.temperature, np.arange(n))
    return LossResult(loss, d_inbatch=g / cfg.temperature)


def combined_loss(block: SimilarityBlock, cfg: LossConfig) -> LossResult:
    _check_temperature(cfg.temperature)
    s = _square_inbatch(block)
    n = s.shape[0]
    neg = np.zeros((n, 0)) if block.neg is None else np.asarray(block.neg, dtype=np.float64)
    if neg.ndim != 2 or neg.shape[0] != n:
        raise ShapeMismatch(f"neg must have {n} rows, got shape {neg.shape}")
    logits = np.concatenate([s, neg], axis=1) / cfg.temperature
    loss, g = softmax_xent(logits, np.arange(n))
    g /= cfg.temperature
    return LossResult(loss, d_neg=g[:, n:].copy(), d_inbatch=g[:, :n].copy())


def contrastive_loss(block: SimilarityBlock, cfg: LossConfig) -> LossResult:
    if cfg.variant is LossVariant.HARD_NEGATIVES:
        return hard_negative_loss(block, cfg)
    if cfg.variant is LossVariant.IN_BATCH:
        return in_batch_loss(block, cfg)
    return combined_loss(block, cfg)


def block_from_embeddings(
    q: np.ndarray, p: np.ndarray, n: np.ndarray | None, variant: LossVariant
) -> SimilarityBlock:
    """Similarities for queries ``q`` [N, d], positives ``p`` [N, d] and
    negatives ``n`` [N, K, d] (rows assumed unit norm)."""
    neg = None if n is None else np.einsum("nd,nkd->nk", q, n)
    if variant is LossVariant.HARD_NEGATIVES:
        return SimilarityBlock(np.sum(q * p, axis=1), neg)
    inbatch = q @ p.T
    return SimilarityBlock(np.diag(inbatch).copy(), neg, inbatch)


def embedding_gradients(
    result: LossResult, q: np.ndarray, p: np.ndarray, n: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Push similarity gradients back onto the embeddings that produced them."""
    dq = np.zeros_like(q)
    dp = np.zeros_like(p)
    dn = None if n is None else np.zeros_like(n)
    if result.d_pos is not None:
        dq += result.d_pos[:, None] * p
        dp += result.d_pos[:, None] * q
    if result.d_inbatch is not None:
        dq += result.d_inbatch @ p
        dp += result.d_inbatch.T @ q
    if result.d_neg is not None and n is not None and result.d_neg.size:
        dq += np.einsum("nk,nkd->nd", result.d_neg, n)
        dn = result.d_neg[:, :, None] * q[:, None, :]
    return dq, dp, dn
