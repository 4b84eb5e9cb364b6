"""Reranker optimization: listwise loss, hard-negative sampling, epoch loop.

The loss on one query's K-candidate list is cross-entropy against the gold
plus a KL regularizer pulling the reranker's score distribution toward the
retriever's:

    loss = sum_i ( -lambda1 * y_i * log p_i  +  lambda2 * p_i * log(p_i / r_i) )

with p = softmax(reranker scores) and r = softmax(retriever scores).

Negatives mix a fixed head and a sampled tail: the top ``p * (K-1)`` pool
entries are always kept, the remainder are drawn without replacement with
probability proportional to exp(retriever score), renormalizing after each
draw.  The gold never enters the pool and is inserted at an rng-chosen
position in the final candidate list.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import EmbeddingTable
from .errors import (InvalidConfig, InvalidIndex, InvalidInput, InvalidShape,
                     PoolTooSmall)
from .index import CandidateIndex, RankedList, search_topk
from .nn.layer import GradientSet
from .nn.optim import OptimizerState, adamw_step
from .reranker import CmcParams, cmc_forward_recorded, cmc_score

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one training run."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    k_train: int = 64              # gold + 63 negatives
    fixed_fraction: float = 0.5    # share of negatives fixed to the pool top
    negative_pool_size: int = 1024
    base_lr: float = 1e-5
    batch_size: int = 4
    epochs: int = 5
    weight_decay: float = 0.0
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        if self.lambda1 + self.lambda2 <= 0:
            raise InvalidConfig("at least one of lambda1, lambda2 must be positive")
        if not 0.0 <= self.fixed_fraction <= 1.0:
            raise InvalidConfig("fixed_fraction must lie in [0, 1]")
        if self.k_train < 2:
            raise InvalidConfig("k_train must include the gold and at least one negative")
        if self.k_train > self.negative_pool_size + 1:
            raise InvalidConfig(
                f"k_train {self.k_train} exceeds negative_pool_size "
                f"{self.negative_pool_size} + 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch_size and epochs must be positive")


@dataclass
class TrainingBatch:
    """One query's training example: embeddings, gold slot, retriever scores."""

    query: np.ndarray
    candidates: np.ndarray        # (k_train, dim)
    candidate_ids: np.ndarray
    gold_position: int
    retriever_scores: np.ndarray  # (k_train,)


@dataclass
class StepRecord:
    step: int
    epoch: int
    effective_lr: float
    loss: float


@dataclass
class TrainingLog:
    steps: list[StepRecord] = field(default_factory=list)

    def epoch_mean_loss(self, epoch: int) -> float:
        losses = [s.loss for s in self.steps if s.epoch == epoch]
        return float(np.mean(losses)) if losses else math.nan

    def to_csv(self) -> str:
        lines = ["step,epoch,effective_lr,loss"]
        for s in self.steps:
            lines.append(f"{s.step},{s.epoch},{s.effective_lr:.10g},{s.loss:.10g}")
        return "\n".join(lines) + "\n"


def compute_loss(scores: np.ndarray, gold_position: int,
                 retriever_scores: np.ndarray,
                 lambda1: float, lambda2: float) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. the raw reranker scores."""
    scores = np.asarray(scores)
    retriever_scores = np.asarray(retriever_scores)
    k = scores.shape[0]
    if scores.shape != retriever_scores.shape or scores.ndim != 1:
        raise InvalidShape(
            f"scores {scores.shape} and retriever scores {retriever_scores.shape} "
            "must be equal-length vectors")
    if not 0 <= gold_position < k:
        raise InvalidIndex(f"gold position {gold_position} not in [0, {k})")

    s = scores.astype(np.float64)
    p = np.exp(s - s.max())
    p /= p.sum()
    r = retriever_scores.astype(np.float64)
    r = np.exp(r - r.max())
    r /= r.sum()

    log_p = np.log(np.maximum(p, LOG_CLAMP))
    log_ratio = log_p - np.log(np.maximum(r, LOG_CLAMP))
    kl = float(np.dot(p, log_ratio))
    loss = -lambda1 * log_p[gold_position] + lambda2 * kl

    # Exact gradient of the loss as computed: where the clamp is active the
    # log is flat, which the indicator terms below account for.
    unclamped = (p > LOG_CLAMP).astype(np.float64)
    d_scores = np.zeros(k, dtype=np.float64)
    if lambda1 and unclamped[gold_position]:
        d_scores += lambda1 * p
        d_scores[gold_position] -= lambda1
    if lambda2:
        g = log_ratio + unclamped
        d_scores += lambda2 * p * (g - float(np.dot(p, g)))
    return float(loss), d_scores.astype(scores.dtype)


def sample_negatives(ranked_pool: RankedList, gold_id: int,
                     cfg: TrainingConfig, rng: np.random.Generator) -> np.ndarray:
    """Pick ``k_train - 1`` negative ids: a fixed top block plus score-
    proportional draws without replacement from the remainder."""
    mask = ranked_pool.ids != np.uint64(gold_id)
    pool_ids = ranked_pool.ids[mask]
    pool_scores = ranked_pool.scores[mask]
    needed = cfg.k_train - 1
    if len(pool_ids) < needed:
        raise PoolTooSmall(
            f"pool has {len(pool_ids)} non-gold candidates, need {needed}")

    n_fixed = int(math.floor(cfg.fixed_fraction * needed))
    chosen = list(pool_ids[:n_fixed])

    n_sampled = needed - n_fixed
    if n_sampled:
        rest_ids = pool_ids[n_fixed:]
        rest_scores = pool_scores[n_fixed:].astype(np.float64)
        weights = np.exp(rest_scores - rest_scores.max())
        alive = np.ones(len(rest_ids), dtype=bool)
        for _ in range(n_sampled):
            alive_idx = np.flatnonzero(alive)
            cum = np.cumsum(weights[alive_idx])
            j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = alive_idx[min(j, len(alive_idx) - 1)]
            chosen.append(rest_ids[pick])
            alive[pick] = False
    return np.asarray(chosen, dtype=np.uint64)


def assemble_batch_example(query: np.ndarray, gold_id: int,
                           index: CandidateIndex,
                           candidates: EmbeddingTable,
                           cfg: TrainingConfig,
                           rng: np.random.Generator) -> TrainingBatch:
    """Retrieve a pool, sample negatives, and insert the gold at a random slot."""
    pool = search_topk(index, query, cfg.negative_pool_size)
    negatives = sample_negatives(pool, gold_id, cfg, rng)

    gold_position = int(rng.integers(0, cfg.k_train))
    ids = np.empty(cfg.k_train, dtype=np.uint64)
    ids[:gold_position] = negatives[:gold_position]
    ids[gold_position] = gold_id
    ids[gold_position + 1:] = negatives[gold_position:]

    retriever_scores = index.scores_for(query, ids)
    return TrainingBatch(
        query=np.asarray(query, dtype=np.float32),
        candidates=candidates.batch(ids),
        candidate_ids=ids,
        gold_position=gold_position,
        retriever_scores=retriever_scores,
    )


def example_loss_and_grads(params: CmcParams, example: TrainingBatch,
                           cfg: TrainingConfig) -> tuple[float, GradientSet]:
    tape = cmc_forward_recorded(params, example.query, example.candidates)
    scores = cmc_score(tape.ctx).scores
    loss, d_scores = compute_loss(scores, example.gold_position,
                                  example.retriever_scores,
                                  cfg.lambda1, cfg.lambda2)
    grads, _, _ = tape.backward(d_scores)
    return loss, grads


def train(cfg: TrainingConfig,
          queries: np.ndarray,
          gold_ids: Sequence[int] | np.ndarray,
          index: CandidateIndex,
          candidates: EmbeddingTable,
          params: CmcParams,
          epoch_callback=None) -> TrainingLog:
    """Run the full epoch loop, mutating ``params`` in place.

    Deterministic given ``cfg.seed``: example order, negative draws and gold
    positions all come from one generator consumed in a fixed order.
    """
    queries = np.asarray(queries, dtype=np.float32)
    gold_ids = np.asarray(gold_ids, dtype=np.uint64)
    n = len(queries)
    if n == 0:
        raise InvalidInput("training set is empty")
    if len(gold_ids) != n:
        raise InvalidShape(f"{n} queries but {len(gold_ids)} gold ids")

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    arrays = params.arrays()
    state = OptimizerState.for_arrays(
        arrays, learning_rate=cfg.base_lr, weight_decay=cfg.weight_decay,
        warmup_fraction=cfg.warmup_fraction,
        total_steps=cfg.epochs * steps_per_epoch)

    log = TrainingLog()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            effective_lr = state.effective_lr()
            total = GradientSet.zeros_like(arrays)
            batch_loss = 0.0
            for qi in chunk:
                example = assemble_batch_example(
                    queries[qi], int(gold_ids[qi]), index, candidates, cfg, rng)
                loss, grads = example_loss_and_grads(params, example, cfg)
                batch_loss += loss
                total.accumulate(grads)
            total.scale(1.0 / len(chunk))
            adamw_step(arrays, total, state)
            step += 1
            log.steps.append(StepRecord(step=step, epoch=epoch,
                                        effective_lr=effective_lr,
                                        loss=batch_loss / len(chunk)))
        if epoch_callback is not None:
            epoch_callback(epoch, params, log)
    return log
