"""Ranking metrics, the synthetic confusable-candidates task, and the
forward-latency benchmark.

Metric conventions: recall@k and unnormalized accuracy divide by all
queries; normalized accuracy divides only by queries whose gold survived
retrieval (the ``gold_in_pool`` flag); MRR@10 counts 1/rank for golds
ranked in the top 10, else 0.

The synthetic task plants groups of ``m`` confusable candidates that share
one surface vector but carry distinct latent vectors.  The retriever index
stores surface-only embeddings (latent part zeroed), so the first stage
cannot tell confusables apart, while the reranker-side embeddings keep
both parts and a latent dot product identifies the gold.  This isolates
exactly the signal that joint query-candidate contextualization can use
and a single-vector retriever cannot.
"""
from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - benchmark falls back to ambient threads
    threadpool_limits = None

from .errors import InvalidConfig, InvalidInput, UndefinedMetric
from .reranker import CmcParams, cmc_forward, cmc_score

MRR_CUTOFF = 10


@dataclass(frozen=True)
class EvalRecord:
    """One query's ranked output plus the retrieval-stage gold flag."""

    query_id: int
    gold_id: int
    ranked_ids: tuple[int, ...]
    gold_in_pool: bool

    def __post_init__(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise InvalidInput(f"query {self.query_id}: ranked ids contain duplicates")

    def gold_rank(self) -> int | None:
        """1-based rank of the gold in the list, or None if absent."""
        try:
            return self.ranked_ids.index(self.gold_id) + 1
        except ValueError:
            return None


def compute_metrics(records: Sequence[EvalRecord], k_values: Iterable[int],
                    require_normalized: bool = True) -> dict[str, float]:
    """Recall@k for each k, both accuracies, and MRR@10.

    With ``require_normalized`` (the default), an evaluation set whose every
    gold missed the pool raises UndefinedMetric; otherwise the key is
    simply omitted.
    """
    records = list(records)
    if not records:
        raise InvalidInput("no evaluation records")
    ranks = [r.gold_rank() for r in records]
    n = len(records)

    metrics: dict[str, float] = {}
    for k in sorted(set(int(k) for k in k_values)):
        hits = sum(1 for rank in ranks if rank is not None and rank <= k)
        metrics[f"recall@{k}"] = hits / n

    top1 = sum(1 for rank in ranks if rank == 1)
    metrics["accuracy_unnormalized"] = top1 / n

    in_pool = [r for r, rank in zip(records, ranks) if r.gold_in_pool]
    if in_pool:
        correct = sum(1 for r in in_pool if r.gold_rank() == 1)
        metrics["accuracy_normalized"] = correct / len(in_pool)
    elif require_normalized:
        raise UndefinedMetric("normalized accuracy undefined: no query has its "
                              "gold in the retrieval pool")

    metrics[f"mrr@{MRR_CUTOFF}"] = sum(
        1.0 / rank for rank in ranks if rank is not None and rank <= MRR_CUTOFF) / n
    return metrics


def metrics_to_csv(metrics: dict[str, float]) -> str:
    lines = ["metric,value"]
    for name, value in metrics.items():
        lines.append(f"{name},{value:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic task


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Shape of the generated retrieval task (one query per confusable group)."""

    corpus_size: int = 5000
    confusables: int = 8       # group size m; one gold per group
    surface_dim: int = 48
    latent_dim: int = 16
    surface_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.confusables < 2:
            raise InvalidConfig("need at least 2 confusables per query")
        if self.surface_dim < 1 or self.latent_dim < 1:
            raise InvalidConfig("surface_dim and latent_dim must be positive")
        if self.corpus_size < self.confusables:
            raise InvalidConfig("corpus smaller than one confusable group")
        if self.surface_noise < 0:
            raise InvalidConfig("surface_noise must be nonnegative")

    @property
    def model_dim(self) -> int:
        return self.surface_dim + self.latent_dim


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    candidate_ids: np.ndarray
    retriever_embeddings: np.ndarray   # latent part zeroed
    reranker_embeddings: np.ndarray    # full surface + latent
    query_ids: np.ndarray
    query_embeddings: np.ndarray
    gold_ids: np.ndarray

    def heldout_split(self, every: int = 5):
        """Deterministic split: every ``every``-th query held out for eval."""
        idx = np.arange(len(self.query_ids))
        eval_idx = idx[::every]
        train_idx = np.setdiff1d(idx, eval_idx)
        return train_idx, eval_idx


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return rows / norms


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticDataset:
    """Deterministically build the confusable-candidates task for a spec."""
    rng = np.random.default_rng(spec.seed)
    m = spec.confusables
    n_groups = spec.corpus_size // m
    n = n_groups * m

    surfaces = _unit_rows(rng.standard_normal(
        (n_groups, spec.surface_dim)).astype(np.float32))
    latents = _unit_rows(rng.standard_normal(
        (n, spec.latent_dim)).astype(np.float32))
    candidate_surface = np.repeat(surfaces, m, axis=0)

    reranker_embeddings = np.concatenate([candidate_surface, latents], axis=1)
    retriever_embeddings = np.concatenate(
        [candidate_surface, np.zeros_like(latents)], axis=1)

    query_latent = _unit_rows(rng.standard_normal(
        (n_groups, spec.latent_dim)).astype(np.float32))
    noise = rng.standard_normal((n_groups, spec.surface_dim)).astype(np.float32)
    query_surface = _unit_rows(surfaces + spec.surface_noise * noise)
    query_embeddings = np.concatenate([query_surface, query_latent], axis=1)

    group_latents = latents.reshape(n_groups, m, spec.latent_dim)
    affinity = np.einsum("gmd,gd->gm", group_latents, query_latent)
    gold_member = affinity.argmax(axis=1)
    gold_ids = (np.arange(n_groups) * m + gold_member).astype(np.uint64)

    return SyntheticDataset(
        spec=spec,
        candidate_ids=np.arange(n, dtype=np.uint64),
        retriever_embeddings=retriever_embeddings.astype(np.float32),
        reranker_embeddings=reranker_embeddings.astype(np.float32),
        query_ids=np.arange(n_groups, dtype=np.uint64),
        query_embeddings=query_embeddings.astype(np.float32),
        gold_ids=gold_ids,
    )


def records_from_rankings(query_ids: Sequence[int], gold_ids: Sequence[int],
                          rankings: Sequence[Sequence[int]],
                          pools: Sequence[Sequence[int]] | None = None
                          ) -> list[EvalRecord]:
    """Bundle parallel arrays into EvalRecords.

    ``pools`` defaults to the rankings themselves: the gold is "in pool"
    iff it appears in the evaluated list.
    """
    records = []
    for i, qid in enumerate(query_ids):
        ranked = tuple(int(c) for c in rankings[i])
        pool = ranked if pools is None else tuple(int(c) for c in pools[i])
        records.append(EvalRecord(
            query_id=int(qid), gold_id=int(gold_ids[i]),
            ranked_ids=ranked, gold_in_pool=int(gold_ids[i]) in pool))
    return records


# ---------------------------------------------------------------------------
# Latency benchmark


@dataclass(frozen=True)
class BenchRow:
    k: int
    median_us: float
    p95_us: float
    error: str | None = None


@dataclass
class BenchReport:
    model_dim: int
    repeats: int
    rows: list[BenchRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["k,median_us,p95_us,error"]
        for row in self.rows:
            if row.error is None:
                lines.append(f"{row.k},{row.median_us:.3f},{row.p95_us:.3f},")
            else:
                lines.append(f"{row.k},,,{row.error}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        lines = [f"{'K':>8} {'median (us)':>16} {'p95 (us)':>16}"]
        for row in self.rows:
            if row.error is None:
                lines.append(f"{row.k:>8} {row.median_us:>16.1f} {row.p95_us:>16.1f}")
            else:
                lines.append(f"{row.k:>8} {'failed: ' + row.error:>33}")
        return "\n".join(lines)


def bench_latency(params: CmcParams, k_values: Sequence[int],
                  model_dim: int | None = None, repeats: int = 5,
                  seed: int = 0) -> BenchReport:
    """Median/p95 wall time of one forward + scoring pass per candidate count.

    One warm-up pass per K is excluded from the statistics, and the timed
    region is pinned to single-threaded BLAS execution so medians stay
    comparable across K.  An allocation failure at some K is recorded on
    that row instead of crashing.
    """
    if model_dim is None:
        model_dim = params.model_dim
    if model_dim != params.model_dim:
        raise InvalidConfig(
            f"model_dim {model_dim} does not match params dim {params.model_dim}")
    k_values = [int(k) for k in k_values]
    if any(b <= a for a, b in zip(k_values, k_values[1:])):
        raise InvalidConfig("k values must be strictly increasing")
    if repeats < 5:
        raise InvalidConfig("need at least 5 repeats per row")

    rng = np.random.default_rng(seed)
    report = BenchReport(model_dim=model_dim, repeats=repeats)
    pin = (threadpool_limits(limits=1) if threadpool_limits is not None
           else nullcontext())
    with pin:
        for k in k_values:
            try:
                h_query = rng.standard_normal(model_dim).astype(np.float32)
                h_cands = rng.standard_normal((k, model_dim)).astype(np.float32)
                cmc_score(cmc_forward(params, h_query, h_cands))  # warm-up
                times = np.empty(repeats, dtype=np.float64)
                for i in range(repeats):
                    t0 = time.perf_counter()
                    cmc_score(cmc_forward(params, h_query, h_cands))
                    times[i] = (time.perf_counter() - t0) * 1e6
                report.rows.append(BenchRow(
                    k=k, median_us=float(np.median(times)),
                    p95_us=float(np.percentile(times, 95))))
            except MemoryError as exc:
                report.rows.append(BenchRow(k=k, median_us=float("nan"),
                                            p95_us=float("nan"),
                                            error=f"out of memory: {exc}"))
    return report
